import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterable, List, Literal, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.backend.exceptions import ConfigError

if TYPE_CHECKING:
    from app.backend.features.ingest import FusedSequence


logger = logging.getLogger(__name__)

Task = Literal["verb", "noun", "action"]
Head = Literal["verb", "noun"]
HEADS: tuple[Head, ...] = ("verb", "noun")


class NarrationAnnotation(BaseModel):
    """Single-timestamp weak label: when the narrator spoke and what they said."""
    model_config = ConfigDict(frozen=True)

    video_id: str
    time: float = Field(..., ge=0.0)
    verb: int = Field(..., ge=0)
    noun: int = Field(..., ge=0)


class GroundTruthInstance(BaseModel):
    """Instance-level target used only for evaluation and the fully supervised baseline."""
    model_config = ConfigDict(frozen=True)

    video_id: str
    t_start: float
    t_end: float
    verb: int = Field(..., ge=0)
    noun: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_span(self) -> "GroundTruthInstance":
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        return self


class Detection(BaseModel):
    """Scored temporal segment. `class_` is serialized as `class`."""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    video_id: str
    t_start: float
    t_end: float
    task: Task
    class_: int = Field(..., ge=0, alias="class")
    intensity: float

    @model_validator(mode="after")
    def check_span(self) -> "Detection":
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        if not math.isfinite(self.intensity):
            raise ValueError("intensity must be finite")
        return self


@dataclass(frozen=True)
class ClipLabel:
    """One-hot clip label over a head's class space."""
    index: int
    n_classes: int

    def __post_init__(self) -> None:
        if not 0 <= self.index < self.n_classes:
            raise ConfigError(f"class {self.index} outside [0, {self.n_classes})")

    @property
    def vector(self) -> np.ndarray:
        y = np.zeros(self.n_classes)
        y[self.index] = 1.0
        return y


@dataclass(frozen=True)
class Clip:
    """Span between consecutive narrations: the bag that carries one clip label."""
    video_id: str
    start_frame: int
    end_frame: int
    verb: int
    noun: int
    features: Optional["FusedSequence"] = None

    def __post_init__(self) -> None:
        if self.end_frame <= self.start_frame:
            raise ValueError(f"empty clip [{self.start_frame}, {self.end_frame}) in {self.video_id}")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame

    def label(self, head: Head, n_classes: int) -> ClipLabel:
        return ClipLabel(self.verb if head == "verb" else self.noun, n_classes)


@dataclass(frozen=True)
class VideoInfo:
    n_frames: int
    fps: float

    @property
    def duration(self) -> float:
        return frames_to_seconds(self.n_frames, self.fps)


class Violation(BaseModel):
    video_id: str
    kind: Literal["class_range", "unsorted", "past_end", "unknown_video"]
    detail: str


class TaskReport(BaseModel):
    task: Task
    per_class: Dict[str, List[float]] = Field(default_factory=dict)
    mean_ap: List[float]
    avg: float


class EvalReport(BaseModel):
    """Per-class AP at each IoU threshold plus means, for verb, noun and action."""
    iou_thresholds: List[float]
    tasks: Dict[str, TaskReport]

    @field_validator("tasks")
    @classmethod
    def check_ranges(cls, v: Dict[str, TaskReport]) -> Dict[str, TaskReport]:
        for report in v.values():
            for aps in report.per_class.values():
                if any(not 0.0 <= ap <= 1.0 for ap in aps):
                    raise ValueError(f"AP outside [0, 1] in task {report.task}")
        return v


def frames_to_seconds(frame: float, fps: float) -> float:
    if fps <= 0:
        raise ConfigError(f"fps must be positive, got {fps}", key="fps")
    return frame / fps


def seconds_to_frame(time: float, fps: float) -> int:
    """Frame containing `time`; a small guard absorbs float error on exact frame boundaries."""
    if fps <= 0:
        raise ConfigError(f"fps must be positive, got {fps}", key="fps")
    return int(math.floor(time * fps + 1e-9))


def validate_dataset(
    annotations: Iterable[NarrationAnnotation],
    videos: Mapping[str, VideoInfo],
    c_verb: int,
    c_noun: int,
) -> List[Violation]:
    """
    Lists problems with a narration set without raising.

    Args:
        annotations: Narrations, in file order.
        videos: Frame count and rate per video id.
        c_verb: Size of the verb class space.
        c_noun: Size of the noun class space.
    Returns:
        One Violation per offending annotation and rule.
    """
    violations: List[Violation] = []
    last_time: Dict[str, float] = {}
    for ann in annotations:
        if ann.verb >= c_verb:
            violations.append(Violation(video_id=ann.video_id, kind="class_range",
                                        detail=f"verb {ann.verb} >= {c_verb} at t={ann.time}"))
        if ann.noun >= c_noun:
            violations.append(Violation(video_id=ann.video_id, kind="class_range",
                                        detail=f"noun {ann.noun} >= {c_noun} at t={ann.time}"))
        prev = last_time.get(ann.video_id)
        if prev is not None and not ann.time > prev:
            violations.append(Violation(video_id=ann.video_id, kind="unsorted",
                                        detail=f"t={ann.time} does not follow t={prev}"))
        last_time[ann.video_id] = ann.time if prev is None else max(prev, ann.time)
        info = videos.get(ann.video_id)
        if info is None:
            violations.append(Violation(video_id=ann.video_id, kind="unknown_video",
                                        detail="no features for this video"))
        elif ann.time >= info.duration:
            violations.append(Violation(video_id=ann.video_id, kind="past_end",
                                        detail=f"t={ann.time} >= duration {info.duration}"))
    if violations:
        logger.warning(f"Dataset validation found {len(violations)} violations.")
    return violations


def group_by_video(records: Iterable[BaseModel]) -> Dict[str, List]:
    grouped: Dict[str, List] = {}
    for record in records:
        grouped.setdefault(getattr(record, "video_id"), []).append(record)
    return grouped
