"""
Synthetic narrated-video benchmark.

Each video is a run of planted action instances separated by gaps. A frame of
an instance emits, per modality, the sum of its verb prototype (first half of
the feature columns) and its noun prototype (second half) plus Gaussian noise.
Narrations are the instance starts, optionally jittered.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from app.backend.config.config import MODALITY_ORDER, EvalConfig, Modality, SynthConfig
from app.backend.evaluation.evaluate import evaluate
from app.backend.factories import create_rng
from app.backend.features.ingest import FEATURE_SUFFIX, FeatureTrack, VideoFeatures, write_features
from app.backend.kernel.numkernel import Matrix
from app.backend.schemas import HEADS, Detection, EvalReport, GroundTruthInstance, Head, NarrationAnnotation
from app.backend.storage.binary import write_atomic
from app.backend.storage.tables import write_annotations, write_ground_truth


logger = logging.getLogger(__name__)

PROTOTYPE_SCALE = 3.0
MANIFEST_NAME = "manifest.txt"


@dataclass
class SynthVideo:
    video_id: str
    tracks: Dict[Modality, Matrix]
    instances: List[GroundTruthInstance]
    annotations: List[NarrationAnnotation]


@dataclass
class SynthDataset:
    config: SynthConfig
    prototypes: Dict[Modality, Dict[Head, Matrix]]
    videos: List[SynthVideo] = field(default_factory=list)

    @property
    def annotations(self) -> List[NarrationAnnotation]:
        return [a for v in self.videos for a in v.annotations]

    @property
    def ground_truth(self) -> List[GroundTruthInstance]:
        return [g for v in self.videos for g in v.instances]

    def video_features(self, video: SynthVideo) -> VideoFeatures:
        fps = self.config.fps
        duration = self.config.video_len_frames / fps
        tracks = {
            m: FeatureTrack(m, fps if m != "audio" else data.shape[0] / duration, data)
            for m, data in video.tracks.items()
        }
        return VideoFeatures(video_id=video.video_id, fps=fps, tracks=tracks)


def _split_columns(dim: int) -> Tuple[slice, slice]:
    return slice(0, dim // 2), slice(dim // 2, dim)


def make_prototypes(config: SynthConfig) -> Dict[Modality, Dict[Head, Matrix]]:
    """Full-width prototypes: verb rows live in the first half of the columns, noun rows in the second."""
    rng = create_rng(config.seed)
    prototypes: Dict[Modality, Dict[Head, Matrix]] = {}
    for modality, dim in config.dims().items():
        verb_cols, noun_cols = _split_columns(dim)
        verb = np.zeros((config.c_verb, dim))
        noun = np.zeros((config.c_noun, dim))
        verb[:, verb_cols] = rng.normal(0.0, PROTOTYPE_SCALE, size=(config.c_verb, verb_cols.stop))
        noun[:, noun_cols] = rng.normal(0.0, PROTOTYPE_SCALE, size=(config.c_noun, dim - noun_cols.start))
        prototypes[modality] = {"verb": verb, "noun": noun}
    for entry in config.silent:
        modality, task, cls_idx = entry.split(":")
        prototypes[modality][task][int(cls_idx)] = 0.0  # type: ignore[index]
    return prototypes


def _layout(config: SynthConfig, rng: np.random.Generator) -> List[Tuple[int, int, int, int]]:
    """(start, end, verb, noun) frames of the planted instances, gap first."""
    L = config.video_len_frames
    planted: List[Tuple[int, int, int, int]] = []
    cursor = 0
    while True:
        start = cursor + int(rng.poisson(config.gap_len))
        if start >= L:
            break
        length = max(1, int(rng.poisson(config.mean_action_len)))
        end = min(start + length, L)
        planted.append((start, end, int(rng.integers(config.c_verb)), int(rng.integers(config.c_noun))))
        cursor = end
    if not planted:
        planted.append((0, min(config.mean_action_len, L), int(rng.integers(config.c_verb)),
                        int(rng.integers(config.c_noun))))
    return planted


def _narration_times(planted: List[Tuple[int, int, int, int]], config: SynthConfig,
                     rng: np.random.Generator) -> List[float]:
    """
    Jittered starts, clamped so times stay >= 0, at least one frame apart and
    leave a frame for every later narration before the end of the video.
    """
    fps = config.fps
    n = len(planted)
    times: List[float] = []
    for i, (start, _, _, _) in enumerate(planted):
        t = start / fps
        if config.timestamp_noise_sd > 0:
            t += float(rng.normal(0.0, config.timestamp_noise_sd))
        lower = 0.0 if not times else times[-1] + 1.0 / fps
        upper = (config.video_len_frames - (n - i)) / fps
        times.append(min(max(t, lower), upper))
    return times


def _clean_frames(planted: List[Tuple[int, int, int, int]], fill: List[Tuple[int, int, int, int]],
                  proto: Dict[Head, Matrix], L: int) -> Matrix:
    frames = np.zeros((L, proto["verb"].shape[1]))
    for start, end, verb, noun in [*fill, *planted]:
        frames[start:end] = proto["verb"][verb] + proto["noun"][noun]
    return frames


def _distractors(planted: List[Tuple[int, int, int, int]], config: SynthConfig,
                 rng: np.random.Generator) -> List[Tuple[int, int, int, int]]:
    """Unnarrated instances of random classes covering every gap."""
    fill = []
    cursor = 0
    for start, end, _, _ in [*planted, (config.video_len_frames, config.video_len_frames, 0, 0)]:
        if start > cursor:
            fill.append((cursor, start, int(rng.integers(config.c_verb)), int(rng.integers(config.c_noun))))
        cursor = end
    return fill


def generate_video(index: int, config: SynthConfig, prototypes: Dict[Modality, Dict[Head, Matrix]]) -> SynthVideo:
    rng = create_rng(config.seed, index)
    video_id = f"vid{index:04d}"
    L, fps = config.video_len_frames, config.fps
    planted = _layout(config, rng)
    fill = _distractors(planted, config, rng) if config.gap_fill == "distractor" else []

    tracks: Dict[Modality, Matrix] = {}
    for modality in MODALITY_ORDER:
        clean = _clean_frames(planted, fill, prototypes[modality], L)
        if modality == "audio":
            T = max(1, int(round(L / fps)))
            rows = np.zeros(1, dtype=np.int64) if T == 1 else np.rint(np.arange(T) * (L - 1) / (T - 1))
            clean = clean[rows.astype(np.int64)]
        tracks[modality] = clean + rng.normal(0.0, config.emission_noise_sd, size=clean.shape)

    times = _narration_times(planted, config, rng)
    instances = [GroundTruthInstance(video_id=video_id, t_start=s / fps, t_end=e / fps, verb=v, noun=n)
                 for s, e, v, n in planted]
    annotations = [NarrationAnnotation(video_id=video_id, time=t, verb=v, noun=n)
                   for t, (_, _, v, n) in zip(times, planted)]
    return SynthVideo(video_id=video_id, tracks=tracks, instances=instances, annotations=annotations)


def generate(config: SynthConfig, executor: Optional[ThreadPoolExecutor] = None) -> SynthDataset:
    """
    Builds a dataset that depends only on `config` (per-video generators are
    derived from the seed and the video index).
    """
    prototypes = make_prototypes(config)
    indices = range(config.n_videos)
    if executor is not None:
        videos = list(executor.map(lambda i: generate_video(i, config, prototypes), indices))
    else:
        videos = [generate_video(i, config, prototypes) for i in indices]
    dataset = SynthDataset(config=config, prototypes=prototypes, videos=videos)
    logger.info(f"Generated {len(videos)} videos with {len(dataset.ground_truth)} instances")
    return dataset


def manifest_text(dataset: SynthDataset) -> str:
    lines = ["# synthetic dataset"]
    for key, value in dataset.config.model_dump().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    lines.append(f"# instances = {len(dataset.ground_truth)}")
    lines.append(f"# annotations = {len(dataset.annotations)}")
    return "\n".join(lines) + "\n"


def read_manifest_counts(path: Union[str, Path]) -> Dict[str, int]:
    counts = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# ") and " = " in line:
            key, value = line[2:].split(" = ", 1)
            counts[key] = int(value)
    return counts


def write_dataset(dataset: SynthDataset, out_dir: Union[str, Path]) -> List[Path]:
    """
    Writes features/<video_id>.nwsd, annotations.csv, ground_truth.csv and
    manifest.txt (a loadable config echo plus instance counts).

    Returns:
        Every path written.
    """
    out_dir = Path(out_dir)
    written = []
    for video in dataset.videos:
        path = out_dir / "features" / f"{video.video_id}{FEATURE_SUFFIX}"
        written.append(write_features(path, video.video_id, dataset.config.fps, video.tracks))
    written.append(write_annotations(out_dir / "annotations.csv", dataset.annotations))
    written.append(write_ground_truth(out_dir / "ground_truth.csv", dataset.ground_truth))
    written.append(write_atomic(out_dir / MANIFEST_NAME, manifest_text(dataset)))
    logger.info(f"Synthetic dataset written to {out_dir}")
    return written


def ground_truth_as_detections(instances: List[GroundTruthInstance], shift: float = 0.0) -> List[Detection]:
    return [
        Detection(video_id=g.video_id, t_start=g.t_start + shift, t_end=g.t_end + shift,
                  task=head, class_=g.verb if head == "verb" else g.noun, intensity=1.0)
        for g in instances
        for head in HEADS
    ]


def oracle_report(dataset: SynthDataset, config: Optional[EvalConfig] = None) -> EvalReport:
    """Ground truth scored against itself; every AP should come out 1.0."""
    return evaluate(ground_truth_as_detections(dataset.ground_truth), dataset.ground_truth, config,
                    c_noun=dataset.config.c_noun)
