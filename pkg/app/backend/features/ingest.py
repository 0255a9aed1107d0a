import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.backend.config.config import MODALITY_ORDER, Modality
from app.backend.exceptions import ConfigError, DataIOError, FormatError, ShapeError
from app.backend.kernel.numkernel import Matrix, as_matrix, check_finite
from app.backend.schemas import VideoInfo
from app.backend.storage.binary import BinaryReader, BinaryWriter, read_bytes, write_atomic


logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"NWSD"
FEATURE_SUFFIX = ".nwsd"
MODALITY_TAGS: Dict[Modality, int] = {"rgb": 0, "flow": 1, "audio": 2}
_TAG_MODALITIES: Dict[int, Modality] = {tag: m for m, tag in MODALITY_TAGS.items()}


@dataclass(frozen=True)
class FeatureTrack:
    modality: Modality
    step_rate: float
    data: Matrix

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ShapeError(f"{self.modality} track needs T >= 1 rows and dim >= 1, got {self.data.shape}")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class VideoFeatures:
    """All tracks stored for one video, as read from a feature file."""
    video_id: str
    fps: float
    tracks: Dict[Modality, FeatureTrack] = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return _frame_track(self.tracks).length

    @property
    def info(self) -> VideoInfo:
        return VideoInfo(n_frames=self.n_frames, fps=self.fps)


@dataclass(frozen=True)
class FusedSequence:
    """Early-fused per-frame features: rgb | flow | audio columns, absent modalities skipped."""
    video_id: str
    fps: float
    data: Matrix
    spans: Dict[Modality, Tuple[int, int]]

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def modalities(self) -> Tuple[Modality, ...]:
        return tuple(self.spans)

    def window(self, start: int, end: int) -> Matrix:
        return self.data[start:end]


def _frame_track(tracks: Mapping[Modality, FeatureTrack]) -> FeatureTrack:
    for modality in ("rgb", "flow"):
        if modality in tracks:
            return tracks[modality]  # type: ignore[index]
    raise FormatError("an rgb or flow track is required to define the frame count")


def interpolate_track(track: FeatureTrack, target_len: int) -> Matrix:
    """
    Linearly resamples a track so its endpoints land on the target endpoints.

    Row t of the output is taken at source position t * (T - 1) / (target_len - 1);
    a single-row source or a single-row target replicates the first source row.
    """
    if target_len < 1:
        raise ShapeError(f"target_len must be >= 1, got {target_len}")
    src = track.data
    T = src.shape[0]
    if T == target_len:
        return src.copy()
    if T == 1 or target_len == 1:
        return np.repeat(src[:1], target_len, axis=0)
    pos = np.arange(target_len) * (T - 1) / (target_len - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return (1.0 - w) * src[lo] + w * src[hi]


def fuse(video: VideoFeatures, modalities: Sequence[Modality]) -> FusedSequence:
    """
    Concatenates the selected modalities frame by frame in rgb, flow, audio order.
    Tracks whose length differs from the frame count are interpolated onto it.
    """
    selected = [m for m in MODALITY_ORDER if m in modalities]
    if not selected:
        raise ConfigError("no modality selected for fusion", key="modalities")
    L = video.n_frames
    blocks = []
    spans: Dict[Modality, Tuple[int, int]] = {}
    col = 0
    for modality in selected:
        track = video.tracks.get(modality)
        if track is None:
            raise ConfigError(f"video {video.video_id} has no {modality} track", key="modalities")
        block = track.data if track.length == L else interpolate_track(track, L)
        blocks.append(block)
        spans[modality] = (col, col + track.dim)
        col += track.dim
    return FusedSequence(video_id=video.video_id, fps=video.fps, data=np.hstack(blocks), spans=spans)


def encode_features(video_id: str, fps: float, tracks: Mapping[Modality, Matrix]) -> bytes:
    writer = BinaryWriter(FEATURE_MAGIC).text(video_id).f64(fps).u32(len(tracks))
    for modality in MODALITY_ORDER:
        if modality not in tracks:
            continue
        data = as_matrix(tracks[modality])
        writer.u8(MODALITY_TAGS[modality]).u32(data.shape[1]).u32(data.shape[0]).matrix(data)
    return writer.getvalue()


def write_features(path: Union[str, Path], video_id: str, fps: float, tracks: Mapping[Modality, Matrix]) -> Path:
    return write_atomic(path, encode_features(video_id, fps, tracks))


def load_features(path: Union[str, Path]) -> VideoFeatures:
    """
    Parses one feature file.

    Args:
        path: `.nwsd` file.
    Returns:
        The video's tracks with step rates derived from the declared fps.
    """
    data = read_bytes(path)
    reader = BinaryReader(data, FEATURE_MAGIC, path=str(path))
    video_id = reader.text("video_id")
    fps = reader.f64("fps")
    if not fps > 0:
        raise FormatError(f"fps must be positive, got {fps}", offset=reader.offset - 8, path=str(path))
    count = reader.u32("track count")
    raw: Dict[Modality, Matrix] = {}
    for i in range(count):
        tag_offset = reader.offset
        tag = reader.u8("modality tag")
        modality = _TAG_MODALITIES.get(tag)
        if modality is None:
            raise FormatError(f"unknown modality tag {tag}", offset=tag_offset, path=str(path))
        if modality in raw:
            raise FormatError(f"duplicate {modality} track", offset=tag_offset, path=str(path))
        dim = reader.u32("dim")
        T = reader.u32("T")
        if dim < 1 or T < 1:
            raise FormatError(f"{modality} track has T={T}, dim={dim}", offset=tag_offset, path=str(path))
        remaining = len(data) - reader.offset
        if i == count - 1 and remaining != 8 * T * dim:
            raise FormatError(f"{modality} payload holds {remaining / 8:g} values but header declares "
                              f"T={T} x dim={dim} (dim mismatch)", offset=reader.offset, path=str(path))
        raw[modality] = check_finite(reader.matrix(T, dim, f"{modality} payload"), f"{path}: {modality} track")
    reader.expect_end()

    n_frames = _frame_track({m: FeatureTrack(m, fps, d) for m, d in raw.items()}).length
    duration = n_frames / fps
    tracks = {
        m: FeatureTrack(m, fps if m != "audio" else d.shape[0] / duration, d)
        for m, d in raw.items()
    }
    logger.debug(f"Loaded {video_id}: {n_frames} frames, tracks {list(tracks)}")
    return VideoFeatures(video_id=video_id, fps=fps, tracks=tracks)


def load_feature_dir(directory: Union[str, Path], video_ids: Optional[Sequence[str]] = None,
                     executor: Optional[ThreadPoolExecutor] = None) -> Dict[str, VideoFeatures]:
    """Loads `<video_id>.nwsd` files; all of them unless `video_ids` narrows the set."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataIOError("Feature directory not found", path=str(directory))
    if video_ids is None:
        paths = sorted(directory.glob(f"*{FEATURE_SUFFIX}"))
    else:
        paths = [directory / f"{vid}{FEATURE_SUFFIX}" for vid in sorted(set(video_ids))]
    loaded = list(executor.map(load_features, paths)) if executor else [load_features(p) for p in paths]
    videos = {v.video_id: v for v in loaded}
    logger.info(f"Loaded features for {len(videos)} videos from {directory}")
    return videos
