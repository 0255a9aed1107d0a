import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.backend.config.config import EvalConfig, PostprocessConfig, TrainConfig
from app.backend.evaluation.evaluate import evaluate
from app.backend.exceptions import ConfigError, NumericError
from app.backend.factories import create_params, create_rng
from app.backend.features.ingest import FusedSequence
from app.backend.kernel.numkernel import Matrix
from app.backend.model.model import (
    DropoutState,
    FrameUnit,
    ModelParams,
    predict_scores,
    supervised_objective,
    weak_objective,
)
from app.backend.postprocess.postprocess import VideoScores, postprocess_all
from app.backend.schemas import (
    Clip,
    Detection,
    GroundTruthInstance,
    NarrationAnnotation,
    group_by_video,
    seconds_to_frame,
)
from app.backend.training.optimizer import AdamState, adam_step


logger = logging.getLogger(__name__)

TrainUnit = Union[Clip, FrameUnit]


@dataclass(frozen=True)
class LogEntry:
    step: int
    loss: float
    val_action_map: Optional[float] = None

    def row(self) -> Tuple[int, float, Optional[float]]:
        return (self.step, self.loss, self.val_action_map)


@dataclass
class TrainingData:
    """Fused features of every video plus its narrations (and GT for selection / the ful baseline)."""
    videos: Dict[str, FusedSequence]
    annotations: List[NarrationAnnotation]
    ground_truth: List[GroundTruthInstance] = field(default_factory=list)


@dataclass
class TrainResult:
    params: ModelParams
    log: List[LogEntry]
    train_videos: List[str]
    val_videos: List[str]
    best_step: int
    best_val: Optional[float]


def cut_clips(annotations: Sequence[NarrationAnnotation], video_len_frames: int, fps: float,
              features: Optional[FusedSequence] = None) -> List[Clip]:
    """
    Cuts one video at its narration timestamps. Clip i spans
    [frame(t_i), frame(t_i+1)) and the last clip runs to the end of the video;
    frames before the first narration are unused and empty clips are dropped.

    Args:
        annotations: Narrations of a single video, sorted by time.
        video_len_frames: Frame count of the video.
        fps: Frame rate used to convert narration times.
        features: Fused sequence attached to every clip, if any.
    Returns:
        Clips in temporal order.
    """
    starts = [min(seconds_to_frame(a.time, fps), video_len_frames) for a in annotations]
    ends = starts[1:] + [video_len_frames]
    clips = []
    for ann, start, end in zip(annotations, starts, ends):
        if end <= start:
            logger.debug(f"{ann.video_id}: dropped empty clip at frame {start}")
            continue
        clips.append(Clip(video_id=ann.video_id, start_frame=start, end_frame=end,
                          verb=ann.verb, noun=ann.noun, features=features))
    return clips


def make_narr_bas_labels(clips: Sequence[Clip]) -> List[FrameUnit]:
    """Treats each clip as an instance: every frame carries the clip's verb and noun (no background)."""
    return [
        FrameUnit(video_id=c.video_id, start_frame=c.start_frame, end_frame=c.end_frame,
                  verb_labels=np.full(c.length, c.verb, dtype=np.int64),
                  noun_labels=np.full(c.length, c.noun, dtype=np.int64),
                  features=c.features)
        for c in clips
    ]


def video_frame_labels(units: Sequence[FrameUnit], n_frames: int, c_verb: int,
                       c_noun: int) -> Tuple[np.ndarray, np.ndarray]:
    """Paints per-unit labels onto a whole video; frames no unit covers get the background index C."""
    verb = np.full(n_frames, c_verb, dtype=np.int64)
    noun = np.full(n_frames, c_noun, dtype=np.int64)
    for unit in units:
        verb[unit.start_frame:unit.end_frame] = unit.verb_labels
        noun[unit.start_frame:unit.end_frame] = unit.noun_labels
    return verb, noun


def ground_truth_unit(instances: Sequence[GroundTruthInstance], fused: FusedSequence, c_verb: int,
                      c_noun: int) -> FrameUnit:
    """Whole-video frame labels from instance-level ground truth, background elsewhere."""
    verb = np.full(fused.length, c_verb, dtype=np.int64)
    noun = np.full(fused.length, c_noun, dtype=np.int64)
    for g in instances:
        start = min(seconds_to_frame(g.t_start, fused.fps), fused.length)
        end = min(max(seconds_to_frame(g.t_end, fused.fps), start + 1), fused.length)
        verb[start:end] = g.verb
        noun[start:end] = g.noun
    return FrameUnit(video_id=fused.video_id, start_frame=0, end_frame=fused.length,
                     verb_labels=verb, noun_labels=noun, features=fused)


def split_videos(video_ids: Sequence[str], val_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """Deterministic by-video split; returns (train, val), each sorted."""
    ordered = sorted(set(video_ids))
    n_val = int(round(val_fraction * len(ordered)))
    if val_fraction > 0 and len(ordered) >= 2:
        n_val = max(1, n_val)
    order = create_rng(seed, 0).permutation(len(ordered))
    val = sorted(ordered[i] for i in order[:n_val])
    train = sorted(ordered[i] for i in order[n_val:])
    return train, val


def infer_class_counts(data: TrainingData, config: TrainConfig) -> Tuple[int, int]:
    labels = [(a.verb, a.noun) for a in data.annotations] + [(g.verb, g.noun) for g in data.ground_truth]
    if not labels:
        raise ConfigError("no annotations to infer class counts from", key="c_verb")
    c_verb = config.c_verb or 1 + max(v for v, _ in labels)
    c_noun = config.c_noun or 1 + max(n for _, n in labels)
    return c_verb, c_noun


def build_units(data: TrainingData, video_ids: Sequence[str], config: TrainConfig, c_verb: int,
                c_noun: int) -> List[TrainUnit]:
    """Training units of the configured variant for the given videos."""
    narrations = group_by_video(data.annotations)
    instances = group_by_video(data.ground_truth)
    units: List[TrainUnit] = []
    for vid in video_ids:
        fused = data.videos[vid]
        if config.variant == "ful":
            if vid in instances:
                units.append(ground_truth_unit(instances[vid], fused, c_verb, c_noun))
            continue
        clips = cut_clips(sorted(narrations.get(vid, []), key=lambda a: a.time), fused.length, fused.fps, fused)
        units.extend(make_narr_bas_labels(clips) if config.variant == "narr_bas" else clips)
    return units


def batch_indices(n_units: int, batch_size: int, rng: np.random.Generator) -> Iterator[List[int]]:
    """Endless batches; unit order is reshuffled at the start of every epoch."""
    order = rng.permutation(n_units)
    cursor = 0
    while True:
        batch: List[int] = []
        while len(batch) < batch_size:
            if cursor == n_units:
                order = rng.permutation(n_units)
                cursor = 0
            take = min(batch_size - len(batch), n_units - cursor)
            batch.extend(int(i) for i in order[cursor:cursor + take])
            cursor += take
        yield batch


def score_videos(params: ModelParams, videos: Sequence[FusedSequence],
                 executor: Optional[ThreadPoolExecutor] = None) -> List[VideoScores]:
    ordered = sorted(videos, key=lambda f: f.video_id)

    def run(fused: FusedSequence) -> VideoScores:
        return VideoScores(video_id=fused.video_id, fps=fused.fps, heads=predict_scores(params, fused))

    return list(executor.map(run, ordered)) if executor else [run(f) for f in ordered]


def detect_videos(params: ModelParams, videos: Sequence[FusedSequence], config: PostprocessConfig,
                  executor: Optional[ThreadPoolExecutor] = None) -> List[Detection]:
    return postprocess_all(score_videos(params, videos, executor), config, executor)


def _objective(params: ModelParams) -> Callable[[TrainUnit, DropoutState], Tuple[float, Dict[str, Matrix]]]:
    if params.supervised:
        return lambda unit, dropout: supervised_objective(unit, params, dropout)  # type: ignore[arg-type]
    return lambda unit, dropout: weak_objective(unit, params, dropout)  # type: ignore[arg-type]


def _validation_map(params: ModelParams, data: TrainingData, val_videos: Sequence[str],
                    post_cfg: PostprocessConfig, eval_cfg: EvalConfig,
                    executor: Optional[ThreadPoolExecutor]) -> Optional[float]:
    val_set = set(val_videos)
    gt = [g for g in data.ground_truth if g.video_id in val_set]
    if not gt:
        return None
    detections = detect_videos(params, [data.videos[v] for v in val_videos], post_cfg, executor)
    report = evaluate(detections, gt, eval_cfg, c_noun=params.c_noun)
    return report.tasks["action"].avg


def train(data: TrainingData, config: TrainConfig, post_cfg: Optional[PostprocessConfig] = None,
          eval_cfg: Optional[EvalConfig] = None, executor: Optional[ThreadPoolExecutor] = None) -> TrainResult:
    """
    Runs Adam on summed per-unit losses and keeps the parameters with the best
    validation action mAP (Avg over the IoU thresholds).

    Args:
        data: Fused videos, narrations and ground truth.
        config: Optimizer, model and split settings.
        post_cfg: Post-processing used for validation detections.
        eval_cfg: Evaluation protocol used for validation.
        executor: Optional pool for per-unit forwards and validation.
    Returns:
        Selected parameters, per-step log and the split that was used.
    """
    post_cfg = post_cfg or PostprocessConfig()
    eval_cfg = eval_cfg or EvalConfig()
    c_verb, c_noun = infer_class_counts(data, config)
    train_ids, val_ids = split_videos(list(data.videos), config.val_fraction, config.seed)
    units = build_units(data, train_ids, config, c_verb, c_noun)
    if not units:
        raise ConfigError("training split has no usable clips", key="val_fraction")

    din = next(iter(data.videos.values())).dim
    params = create_params(config.variant, c_verb, c_noun, din, config.d, config.modalities,
                           create_rng(config.seed, 1), shared_trunk=config.shared_trunk)
    logger.info(f"Training {config.variant}: {len(units)} units from {len(train_ids)} videos, "
                f"{len(val_ids)} validation videos, {config.max_steps} steps")
    if config.max_steps == 0:
        return TrainResult(params=params, log=[], train_videos=train_ids, val_videos=val_ids,
                           best_step=0, best_val=None)

    state = AdamState.for_params(params.blocks)
    objective = _objective(params)
    batches = batch_indices(len(units), config.batch_size, create_rng(config.seed, 2))
    log: List[LogEntry] = []
    best: Optional[ModelParams] = None
    best_step, best_val = 0, None

    for step in range(1, config.max_steps + 1):
        batch = next(batches)
        dropouts = [DropoutState(create_rng(config.seed, 3, step, slot), config.dropout_p, config.conv_dropout_p)
                    for slot in range(len(batch))]
        jobs = list(zip((units[i] for i in batch), dropouts))
        if executor is not None:
            results = list(executor.map(lambda job: objective(*job), jobs))
        else:
            results = [objective(unit, dropout) for unit, dropout in jobs]

        loss = 0.0
        grads: Dict[str, Matrix] = {}
        for unit_loss, unit_grads in results:
            loss += unit_loss
            for name, g in unit_grads.items():
                grads[name] = grads[name] + g if name in grads else g.copy()
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {step}")
        adam_step(params.blocks, grads, state, config.learning_rate)

        val_map = None
        if step % config.eval_every == 0 or step == config.max_steps:
            val_map = _validation_map(params, data, val_ids, post_cfg, eval_cfg, executor)
            if val_map is not None and (best_val is None or val_map > best_val):
                best, best_step, best_val = params.copy(), step, val_map
            window = [e.loss for e in log if e.step > step - config.eval_every] + [loss]
            val_text = "n/a" if val_map is None else f"{val_map:.4f}"
            logger.info(f"step {step}/{config.max_steps}: mean loss {np.mean(window):.4f}, "
                        f"val action mAP {val_text}")
        log.append(LogEntry(step=step, loss=loss, val_action_map=val_map))

    if best is None:
        best, best_step = params, config.max_steps
    else:
        logger.info(f"Selected step {best_step} (val action mAP {best_val:.4f})")
    return TrainResult(params=best, log=log, train_videos=train_ids, val_videos=val_ids,
                       best_step=best_step, best_val=best_val)
