from typing import Callable, Dict, Optional

import numpy as np
import pytest

from app.backend.config.config import MODALITY_ORDER, Modality, SynthConfig
from app.backend.factories import create_params, create_rng
from app.backend.features.ingest import FusedSequence, fuse
from app.backend.model.model import ModelParams
from app.backend.synth.synthgen import SynthDataset, generate, write_dataset
from app.backend.training.trainer import TrainingData


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_fused() -> Callable[..., FusedSequence]:
    def factory(data: np.ndarray, video_id: str = "v0", fps: float = 1.0,
                spans: Optional[Dict[Modality, tuple]] = None) -> FusedSequence:
        spans = spans or {"rgb": (0, data.shape[1])}
        return FusedSequence(video_id=video_id, fps=fps, data=np.asarray(data, dtype=float), spans=spans)
    return factory


@pytest.fixture
def make_params() -> Callable[..., ModelParams]:
    def factory(variant: str = "ours", c_verb: int = 3, c_noun: int = 4, din: int = 5, d: int = 4,
                seed: int = 0, shared_trunk: bool = True) -> ModelParams:
        return create_params(variant, c_verb, c_noun, din, d, ("rgb",), create_rng(seed, 1),  # type: ignore[arg-type]
                             shared_trunk=shared_trunk)
    return factory


@pytest.fixture
def numeric_grad() -> Callable[[Callable[[], float], np.ndarray, float], np.ndarray]:
    """Central finite differences of `f` with respect to the array `x`, perturbed in place."""
    def grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
        out = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + h
            plus = f()
            x[idx] = old - h
            minus = f()
            x[idx] = old
            out[idx] = (plus - minus) / (2 * h)
        return out
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


@pytest.fixture
def rel_err() -> Callable[[np.ndarray, np.ndarray], float]:
    return relative_error


@pytest.fixture
def small_synth_config() -> SynthConfig:
    return SynthConfig(n_videos=6, video_len_frames=40, fps=2.0, c_verb=3, c_noun=3, rgb_dim=4, flow_dim=4,
                       audio_dim=2, mean_action_len=6, gap_len=2, emission_noise_sd=0.3, seed=7)


@pytest.fixture
def small_dataset(small_synth_config: SynthConfig) -> SynthDataset:
    return generate(small_synth_config)


@pytest.fixture
def dataset_dir(tmp_path, small_dataset: SynthDataset):
    out = tmp_path / "data"
    write_dataset(small_dataset, out)
    return out


@pytest.fixture
def training_data(small_dataset: SynthDataset) -> TrainingData:
    videos = {v.video_id: fuse(small_dataset.video_features(v), MODALITY_ORDER) for v in small_dataset.videos}
    return TrainingData(videos=videos, annotations=small_dataset.annotations,
                        ground_truth=small_dataset.ground_truth)
