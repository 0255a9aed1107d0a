import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Type

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.backend.exceptions import ConfigError, DataIOError


logger = logging.getLogger(__name__)

Modality = Literal["rgb", "flow", "audio"]
Variant = Literal["ours", "cls_agno", "narr_bas", "ful"]
MODALITY_ORDER: tuple[Modality, ...] = ("rgb", "flow", "audio")


class Settings(BaseSettings):
    THREADS: int = Field(default=1, ge=1, description="Worker threads (NWSD_THREADS)")
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="NWSD_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


def _split_list(v: Any) -> Any:
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


class _FlatConfig(BaseModel):
    """Base for every model that can be filled from a flat key-value file."""
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainConfig(_FlatConfig):
    learning_rate: float = Field(default=1e-5, ge=0.0, description="Adam step size")
    batch_size: int = Field(default=8, ge=1, description="clips per optimizer step")
    max_steps: int = Field(default=2000, ge=0, description="optimizer steps (300000 for full-scale runs)")
    dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0, description="dropout on the selected attention row")
    conv_dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0, description="dropout on the Conv1D output")
    seed: int = Field(default=0, ge=0, description="run seed (split, init, batching, dropout)")
    variant: Variant = Field(default="ours", description="ours | cls_agno | narr_bas | ful")
    eval_every: int = Field(default=200, ge=1, description="steps between validation evaluations")
    d: int = Field(default=100, ge=1, description="Conv1D filters")
    shared_trunk: bool = Field(default=True, description="verb and noun heads share the Conv1D trunk")
    modalities: List[Modality] = Field(default_factory=lambda: list(MODALITY_ORDER), description="fused modalities")
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0, description="share of videos held out for model selection")
    c_verb: Optional[int] = Field(default=None, ge=1, description="verb classes (inferred from the data when unset)")
    c_noun: Optional[int] = Field(default=None, ge=1, description="noun classes (inferred from the data when unset)")

    @field_validator("modalities", mode="before")
    @classmethod
    def split_modalities(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("modalities")
    @classmethod
    def check_modalities(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("at least one modality must be selected")
        return [m for m in MODALITY_ORDER if m in v]


class PostprocessConfig(_FlatConfig):
    smooth_size: int = Field(default=3, ge=1, description="uniform filter width (odd)")
    threshold_min: float = Field(default=0.01, gt=0.0, lt=1.0, description="lowest retrieval threshold")
    threshold_max: float = Field(default=0.4, gt=0.0, lt=1.0, description="highest retrieval threshold")
    threshold_count: int = Field(default=40, ge=1, description="evenly spaced thresholds")
    nms_iou: float = Field(default=0.4, gt=0.0, le=1.0, description="NMS IoU threshold")

    @field_validator("smooth_size")
    @classmethod
    def check_odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError("smooth_size must be odd")
        return v

    @model_validator(mode="after")
    def check_grid(self) -> "PostprocessConfig":
        if self.threshold_count > 1 and not self.threshold_min < self.threshold_max:
            raise ValueError("threshold_min must be below threshold_max")
        return self

    @property
    def thresholds(self) -> np.ndarray:
        if self.threshold_count == 1:
            return np.array([self.threshold_min])
        return np.linspace(self.threshold_min, self.threshold_max, self.threshold_count)


class EvalConfig(_FlatConfig):
    iou_thresholds: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5],
                                        description="IoU thresholds for AP")
    action_pairing: Literal["intersection", "verb_span"] = Field(
        default="intersection", description="how verb and noun detections combine into action detections")
    action_iou: float = Field(default=0.5, gt=0.0, le=1.0, description="verb/noun IoU gate for pairing")
    ap_interpolation: Literal["none", "envelope"] = Field(default="none", description="AP rule")

    @field_validator("iou_thresholds", mode="before")
    @classmethod
    def split_thresholds(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("iou_thresholds")
    @classmethod
    def check_thresholds(cls, v: List[float]) -> List[float]:
        if not v or any(not 0.0 < t <= 1.0 for t in v):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        return sorted(v)


class SynthConfig(_FlatConfig):
    n_videos: int = Field(default=50, ge=1, description="videos to generate")
    video_len_frames: int = Field(default=128, ge=1, description="frames per video")
    fps: float = Field(default=5.0, gt=0.0, description="feature frames per second")
    c_verb: int = Field(default=8, ge=1, description="verb classes")
    c_noun: int = Field(default=8, ge=1, description="noun classes")
    rgb_dim: int = Field(default=16, ge=1, description="RGB feature dim")
    flow_dim: int = Field(default=16, ge=1, description="flow feature dim")
    audio_dim: int = Field(default=4, ge=1, description="audio feature dim")
    mean_action_len: int = Field(default=12, ge=1, description="mean action length in frames")
    gap_len: int = Field(default=4, ge=0, description="mean gap between actions in frames")
    timestamp_noise_sd: float = Field(default=0.0, ge=0.0, description="narration jitter sd in seconds")
    emission_noise_sd: float = Field(default=1.0, ge=0.0, description="feature noise sd")
    gap_fill: Literal["background", "distractor"] = Field(
        default="background", description="gap frames: zero prototype or unnarrated other classes")
    silent: List[str] = Field(default_factory=list, description="modality:task:class entries without signal")
    seed: int = Field(default=0, ge=0, description="generator seed")

    @field_validator("silent", mode="before")
    @classmethod
    def split_silent(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("silent")
    @classmethod
    def check_silent(cls, v: List[str]) -> List[str]:
        for entry in v:
            parts = entry.split(":")
            if len(parts) != 3 or parts[0] not in MODALITY_ORDER or parts[1] not in ("verb", "noun") \
                    or not parts[2].isdigit():
                raise ValueError(f"bad silent entry '{entry}', expected modality:task:class")
        return v

    @model_validator(mode="after")
    def check_dims(self) -> "SynthConfig":
        for name in ("rgb_dim", "flow_dim", "audio_dim"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2 (verb half + noun half)")
        for entry in self.silent:
            _, task, cls_idx = entry.split(":")
            limit = self.c_verb if task == "verb" else self.c_noun
            if int(cls_idx) >= limit:
                raise ValueError(f"silent entry '{entry}' names a class outside [0, {limit})")
        return self

    def dims(self) -> Dict[Modality, int]:
        return {"rgb": self.rgb_dim, "flow": self.flow_dim, "audio": self.audio_dim}


class DataPaths(_FlatConfig):
    features_dir: Optional[Path] = Field(default=None, description="directory of *.nwsd feature files")
    annotations_path: Optional[Path] = Field(default=None, description="narration CSV")
    ground_truth_path: Optional[Path] = Field(default=None, description="ground-truth CSV")
    checkpoint_path: Optional[Path] = Field(default=None, description="NWSM checkpoint output")
    log_path: Optional[Path] = Field(default=None, description="training log CSV output")


def load_config_file(path: Optional[Path]) -> Dict[str, str]:
    """
    Reads a flat `key = value` file. Blank lines and `#` comments are ignored.

    Args:
        path: Config file, or None for an empty config.
    Returns:
        Raw key-value strings in file order.
    """
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise DataIOError("Config file not found", path=str(path))
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'", key=stripped)
        key, value = (part.strip() for part in stripped.split("=", 1))
        raw[key] = value
    logger.debug(f"Loaded {len(raw)} config keys from {path}")
    return raw


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError("override must look like key=value", key=pair)
        key, value = (part.strip() for part in pair.split("=", 1))
        overrides[key] = value
    return overrides


def split_config(raw: Mapping[str, str], *models: Type[_FlatConfig]) -> List[Any]:
    """
    Builds one instance of each model from a flat mapping. Every key must be
    declared by exactly one of the models; anything else is rejected by name.
    """
    buckets: List[Dict[str, str]] = [{} for _ in models]
    for key, value in raw.items():
        for bucket, model in zip(buckets, models):
            if key in model.model_fields:
                bucket[key] = value
                break
        else:
            raise ConfigError("Unknown config key", key=key)

    built = []
    for bucket, model in zip(buckets, models):
        try:
            built.append(model.model_validate(bucket))
        except ValidationError as e:
            first = e.errors()[0]
            key = ".".join(str(p) for p in first["loc"]) or model.__name__
            raise ConfigError(f"Invalid value: {first['msg']}", key=key) from e
    return built


def describe_keys(*models: Type[BaseModel]) -> str:
    """Renders `key = default  # description` lines for --help epilogs."""
    lines = []
    for model in models:
        for name, field in model.model_fields.items():
            default = field.get_default(call_default_factory=True)
            if isinstance(default, list):
                default = ",".join(str(item) for item in default)
            elif default is None:
                default = ""
            lines.append(f"  {name} = {default}    # {field.description or ''}")
    return "\n".join(lines)


settings = Settings()


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
