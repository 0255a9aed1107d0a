import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Union

import pandas as pd
from pydantic import TypeAdapter

from app.backend.config.config import DataPaths, EvalConfig, PostprocessConfig, SynthConfig, TrainConfig
from app.backend.evaluation.evaluate import TASKS, evaluate
from app.backend.exceptions import ConfigError, DataIOError, NwsdError, PipelineError, ShapeError
from app.backend.features.ingest import fuse, load_feature_dir
from app.backend.model.checkpoint import load_checkpoint, save_checkpoint
from app.backend.postprocess.postprocess import VideoScores, load_scores, postprocess_all, write_scores
from app.backend.schemas import Detection, EvalReport, validate_dataset
from app.backend.storage.binary import write_atomic
from app.backend.storage.tables import (
    read_annotations,
    read_detections,
    read_ground_truth,
    report_table,
    write_detections,
    write_frame,
    write_report,
    write_training_log,
)
from app.backend.synth.synthgen import SynthDataset, generate, oracle_report, write_dataset
from app.backend.training.trainer import TrainingData, TrainResult, detect_videos, score_videos, train


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class OutputTracker:
    """Paths a command is about to write, so a failed command can take them back."""
    paths: List[Path] = field(default_factory=list)

    def track(self, path: PathLike) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for path in self.paths:
            for candidate in (path, path.with_name(path.name + ".tmp")):
                if candidate.is_file():
                    candidate.unlink()
                    logger.info(f"Removed partial output {candidate}")


@contextmanager
def pipeline_step(step: str) -> Iterator[None]:
    try:
        yield
    except PipelineError:
        raise
    except NwsdError as e:
        raise PipelineError(e.message, step=step, cause=e) from e
    except ShapeError as e:
        raise PipelineError(str(e), step=step, cause=ConfigError(str(e))) from e


def _require(value: Optional[Path], key: str) -> Path:
    if value is None:
        raise ConfigError("required path is not set", key=key)
    return value


def read_video_list(path: PathLike) -> List[str]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError("Video list not found", path=str(path))
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def run_generate(config: SynthConfig, out_dir: PathLike, tracker: OutputTracker,
                 executor: Optional[ThreadPoolExecutor] = None) -> SynthDataset:
    out_dir = Path(out_dir)
    with pipeline_step("generate"):
        dataset = generate(config, executor)
        for video in dataset.videos:
            tracker.track(out_dir / "features" / f"{video.video_id}.nwsd")
        for name in ("annotations.csv", "ground_truth.csv", "manifest.txt"):
            tracker.track(out_dir / name)
        write_dataset(dataset, out_dir)
    with pipeline_step("oracle"):
        report = oracle_report(dataset)
        worst = min(min(t.mean_ap) for t in report.tasks.values())
        if worst < 1.0:
            logger.warning(f"Oracle evaluation of the generated dataset is below 1.0 ({worst:.4f})")
    return dataset


def load_training_data(paths: DataPaths, config: TrainConfig,
                       executor: Optional[ThreadPoolExecutor] = None) -> TrainingData:
    """
    Loads features, narrations and (optionally) ground truth, fusing the
    configured modalities and reporting dataset violations as warnings.
    """
    with pipeline_step("load"):
        features = load_feature_dir(_require(paths.features_dir, "features_dir"), executor=executor)
        if not features:
            raise DataIOError("No feature files found", path=str(paths.features_dir))
        annotations = read_annotations(_require(paths.annotations_path, "annotations_path"))
        ground_truth = read_ground_truth(paths.ground_truth_path) if paths.ground_truth_path else []
    with pipeline_step("validate"):
        c_verb = config.c_verb or 1 + max((a.verb for a in annotations), default=0)
        c_noun = config.c_noun or 1 + max((a.noun for a in annotations), default=0)
        for violation in validate_dataset(annotations, {v: f.info for v, f in features.items()}, c_verb, c_noun):
            logger.warning(f"{violation.video_id}: {violation.kind}: {violation.detail}")
    with pipeline_step("fuse"):
        fused = {vid: fuse(video, config.modalities) for vid, video in features.items()}
    return TrainingData(videos=fused, annotations=annotations, ground_truth=ground_truth)


def run_train(train_cfg: TrainConfig, post_cfg: PostprocessConfig, eval_cfg: EvalConfig, paths: DataPaths,
              tracker: OutputTracker, executor: Optional[ThreadPoolExecutor] = None) -> TrainResult:
    """
    Trains one variant and writes the checkpoint, the per-step log and the list
    of validation videos next to the checkpoint.
    """
    checkpoint = tracker.track(_require(paths.checkpoint_path, "checkpoint_path"))
    log_path = tracker.track(paths.log_path or sidecar(checkpoint, ".log.csv"))
    split_path = tracker.track(sidecar(checkpoint, ".split.txt"))
    data = load_training_data(paths, train_cfg, executor)
    if train_cfg.variant == "ful" and not data.ground_truth:
        raise PipelineError("the fully supervised variant needs ground truth",
                            step="train", cause=ConfigError("missing ground truth", key="ground_truth_path"))
    with pipeline_step("train"):
        result = train(data, train_cfg, post_cfg, eval_cfg, executor)
    with pipeline_step("save"):
        save_checkpoint(checkpoint, result.params)
        write_training_log(log_path, (entry.row() for entry in result.log))
        write_atomic(split_path, "".join(f"{vid}\n" for vid in result.val_videos))
    logger.info(f"Training finished: checkpoint {checkpoint}, log {log_path}")
    return result


def run_infer(checkpoint: PathLike, features_dir: PathLike, out: PathLike, tracker: OutputTracker,
              executor: Optional[ThreadPoolExecutor] = None,
              video_ids: Optional[Sequence[str]] = None) -> List[VideoScores]:
    out = tracker.track(out)
    with pipeline_step("load"):
        params = load_checkpoint(checkpoint)
        features = load_feature_dir(features_dir, video_ids=video_ids, executor=executor)
    with pipeline_step("infer"):
        fused = [fuse(video, params.modalities) for video in features.values()]
        scores = score_videos(params, fused, executor)
    with pipeline_step("save"):
        write_scores(out, scores)
    return scores


def run_postprocess(scores_path: PathLike, out: PathLike, config: PostprocessConfig, tracker: OutputTracker,
                    executor: Optional[ThreadPoolExecutor] = None) -> List[Detection]:
    out = tracker.track(out)
    with pipeline_step("load"):
        scores = load_scores(scores_path)
    with pipeline_step("postprocess"):
        detections = postprocess_all(scores, config, executor)
    with pipeline_step("save"):
        write_detections(out, detections)
    return detections


def _report_paths(prefix: Path, tracker: OutputTracker) -> None:
    for suffix in (".csv", ".json"):
        tracker.track(sidecar(prefix, suffix))


def run_eval(detections_path: PathLike, ground_truth_path: PathLike, out_prefix: PathLike,
             config: EvalConfig, tracker: OutputTracker) -> EvalReport:
    prefix = Path(out_prefix)
    _report_paths(prefix, tracker)
    with pipeline_step("load"):
        detections = read_detections(detections_path)
        ground_truth = read_ground_truth(ground_truth_path)
    with pipeline_step("evaluate"):
        report = evaluate(detections, ground_truth, config)
    with pipeline_step("save"):
        write_report(prefix, report)
    return report


def comparison_table(reports: Mapping[str, EvalReport]) -> pd.DataFrame:
    """One row per (run, task) with mAP at each threshold and Avg."""
    frames = []
    for run, report in reports.items():
        table = report_table(report, run)
        frames.append(table[table["class"] == "ALL"].drop(columns="class"))
    return pd.concat(frames, ignore_index=True)


def top_classes(reports: Mapping[str, EvalReport], k: int) -> pd.DataFrame:
    """Best-detected classes per run and task, ranked by Avg AP (ties by class name)."""
    rows = []
    for run, report in reports.items():
        for task in TASKS:
            per_class = report.tasks[task].per_class
            ranked = sorted(per_class.items(), key=lambda kv: (-sum(kv[1]) / len(kv[1]), kv[0]))
            for rank, (cls_name, aps) in enumerate(ranked[:k], start=1):
                rows.append([run, task, rank, cls_name, sum(aps) / len(aps)])
    return pd.DataFrame(rows, columns=["run", "task", "rank", "class", "Avg"])


def run_report(runs: Mapping[str, PathLike], features_dir: PathLike, ground_truth_path: PathLike,
               out_prefix: PathLike, post_cfg: PostprocessConfig, eval_cfg: EvalConfig, tracker: OutputTracker,
               executor: Optional[ThreadPoolExecutor] = None, video_ids: Optional[Sequence[str]] = None,
               top_k: int = 5) -> Dict[str, EvalReport]:
    """
    Evaluates several checkpoints on the same videos and writes:
    <prefix>.csv (mAP comparison), <prefix>.classes.csv (per-class AP),
    <prefix>.topk.csv (best classes per run) and <prefix>.json.
    """
    if not runs:
        raise ConfigError("report needs at least one --run name=checkpoint", key="run")
    prefix = Path(out_prefix)
    outputs = {suffix: tracker.track(sidecar(prefix, suffix))
               for suffix in (".csv", ".classes.csv", ".topk.csv", ".json")}
    with pipeline_step("load"):
        features = load_feature_dir(features_dir, video_ids=video_ids, executor=executor)
        ground_truth = read_ground_truth(ground_truth_path)
        if video_ids is not None:
            wanted = set(video_ids)
            ground_truth = [g for g in ground_truth if g.video_id in wanted]

    reports: Dict[str, EvalReport] = {}
    for name, checkpoint in runs.items():
        with pipeline_step(f"report:{name}"):
            params = load_checkpoint(checkpoint)
            fused = [fuse(video, params.modalities) for video in features.values()]
            detections = detect_videos(params, fused, post_cfg, executor)
            reports[name] = evaluate(detections, ground_truth, eval_cfg, c_noun=params.c_noun)
            logger.info(f"{name}: action mAP Avg {reports[name].tasks['action'].avg:.4f}")

    with pipeline_step("save"):
        write_frame(outputs[".csv"], comparison_table(reports))
        write_frame(outputs[".classes.csv"],
                    pd.concat([report_table(r, run) for run, r in reports.items()], ignore_index=True))
        write_frame(outputs[".topk.csv"], top_classes(reports, top_k))
        payload = TypeAdapter(Dict[str, EvalReport]).dump_json(dict(reports), indent=2)
        write_atomic(outputs[".json"], payload + b"\n")
    logger.info(f"Comparison of {len(reports)} runs written with prefix {prefix}")
    return reports
