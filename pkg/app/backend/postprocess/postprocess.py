"""
Intensity-sensitive post-processing: per-frame class scores become ranked
temporal detections (smooth, retrieve runs at many thresholds, score by mean
intensity, per-class NMS, aggregate).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from app.backend.config.config import PostprocessConfig
from app.backend.exceptions import FormatError
from app.backend.kernel.numkernel import Matrix, check_finite
from app.backend.schemas import HEADS, Detection, Head, frames_to_seconds
from app.backend.storage.binary import BinaryReader, BinaryWriter, read_bytes, write_atomic


logger = logging.getLogger(__name__)

SCORES_MAGIC = b"NWSS"
HEAD_TAGS: Dict[Head, int] = {"verb": 0, "noun": 1}
_TAG_HEADS = {tag: h for h, tag in HEAD_TAGS.items()}

Vector = npt.NDArray[np.float64]


@dataclass(frozen=True)
class Segment:
    start_frame: int
    end_frame: int
    class_index: int
    intensity: float
    source_threshold: float

    def __post_init__(self) -> None:
        if self.end_frame <= self.start_frame:
            raise ValueError(f"empty segment [{self.start_frame}, {self.end_frame})")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class VideoScores:
    video_id: str
    fps: float
    heads: Dict[Head, Matrix]


def smooth(scores: Vector, size: int) -> Vector:
    """Uniform filter whose window is clipped to the sequence (no padding values)."""
    scores = np.asarray(scores, dtype=np.float64)
    if size <= 1 or scores.size == 0:
        return scores.copy()
    half = size // 2
    window = np.ones(size)
    sums = np.convolve(scores, window)[half:half + scores.size]
    counts = np.convolve(np.ones(scores.size), window)[half:half + scores.size]
    return sums / counts


def retrieve_segments(scores: Vector, threshold: float) -> List[Tuple[int, int]]:
    """Maximal runs [start, end) of frames whose score is >= threshold."""
    above = np.concatenate([[0], (np.asarray(scores) >= threshold).astype(np.int8), [0]])
    edges = np.diff(above)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def score_segment(scores: Vector, segment: Tuple[int, int]) -> float:
    start, end = segment
    return float(np.mean(scores[start:end]))


def segment_iou(a: Segment, b: Segment) -> float:
    inter = max(0, min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame))
    union = a.length + b.length - inter
    return inter / union


def rank_key(segment: Segment) -> Tuple[float, int, int]:
    """Descending intensity, then earlier start, then longer."""
    return (-segment.intensity, segment.start_frame, -segment.length)


def nms(segments: Sequence[Segment], iou_threshold: float) -> List[Segment]:
    """
    Greedy suppression for one class: walk segments by rank and keep one
    unless it reaches `iou_threshold` IoU with an already kept segment.
    """
    kept: List[Segment] = []
    for candidate in sorted(segments, key=rank_key):
        if all(segment_iou(candidate, k) < iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def class_segments(scores: Vector, class_index: int, config: PostprocessConfig) -> List[Segment]:
    smoothed = smooth(scores, config.smooth_size)
    found: List[Segment] = []
    for threshold in config.thresholds:
        for span in retrieve_segments(smoothed, threshold):
            found.append(Segment(span[0], span[1], class_index, score_segment(smoothed, span), float(threshold)))
    return nms(found, config.nms_iou)


def postprocess_head(D: Matrix, config: PostprocessConfig) -> List[Segment]:
    """All classes of one head, NMS-ed per class and ranked by intensity."""
    segments: List[Segment] = []
    for k in range(D.shape[1]):
        segments.extend(class_segments(D[:, k], k, config))
    return sorted(segments, key=lambda s: (-s.intensity, s.class_index, s.start_frame))


def postprocess_video(video: VideoScores, config: PostprocessConfig) -> List[Detection]:
    """
    Turns one video's per-head score matrices into detections in seconds,
    verb detections first, each task ranked by intensity.
    """
    detections: List[Detection] = []
    for head in HEADS:
        if head not in video.heads:
            continue
        check_finite(video.heads[head], f"{video.video_id} {head} scores")
        for seg in postprocess_head(video.heads[head], config):
            detections.append(Detection(
                video_id=video.video_id,
                t_start=frames_to_seconds(seg.start_frame, video.fps),
                t_end=frames_to_seconds(seg.end_frame, video.fps),
                task=head,
                class_=seg.class_index,
                intensity=seg.intensity,
            ))
    logger.debug(f"{video.video_id}: {len(detections)} detections")
    return detections


def postprocess_all(videos: Sequence[VideoScores], config: PostprocessConfig,
                    executor: Optional[ThreadPoolExecutor] = None) -> List[Detection]:
    ordered = sorted(videos, key=lambda v: v.video_id)
    if executor is not None:
        per_video = list(executor.map(lambda v: postprocess_video(v, config), ordered))
    else:
        per_video = [postprocess_video(v, config) for v in ordered]
    detections = [d for batch in per_video for d in batch]
    logger.info(f"Post-processed {len(ordered)} videos into {len(detections)} detections")
    return detections


def encode_scores(videos: Sequence[VideoScores]) -> bytes:
    writer = BinaryWriter(SCORES_MAGIC).u32(len(videos))
    for video in sorted(videos, key=lambda v: v.video_id):
        writer.text(video.video_id).f64(video.fps).u32(len(video.heads))
        for head in HEADS:
            if head not in video.heads:
                continue
            D = video.heads[head]
            writer.u8(HEAD_TAGS[head]).u32(D.shape[0]).u32(D.shape[1]).matrix(D)
    return writer.getvalue()


def write_scores(path: Union[str, Path], videos: Sequence[VideoScores]) -> Path:
    written = write_atomic(path, encode_scores(videos))
    logger.info(f"Score dump for {len(videos)} videos written to {written}")
    return written


def load_scores(path: Union[str, Path]) -> List[VideoScores]:
    reader = BinaryReader(read_bytes(path), SCORES_MAGIC, path=str(path))
    videos: List[VideoScores] = []
    for _ in range(reader.u32("video count")):
        video_id = reader.text("video_id")
        fps = reader.f64("fps")
        heads: Dict[Head, Matrix] = {}
        for _ in range(reader.u32("head count")):
            tag_offset = reader.offset
            head = _TAG_HEADS.get(reader.u8("head tag"))
            if head is None:
                raise FormatError("unknown head tag", offset=tag_offset, path=str(path))
            L, C = reader.u32("L"), reader.u32("C")
            scores = reader.matrix(L, C, f"{video_id} {head} scores")
            heads[head] = check_finite(scores, f"{path}: {video_id} {head} scores")
        videos.append(VideoScores(video_id=video_id, fps=fps, heads=heads))
    reader.expect_end()
    logger.info(f"Loaded scores for {len(videos)} videos from {path}")
    return videos
