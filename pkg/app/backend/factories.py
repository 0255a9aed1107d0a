import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from app.backend.config.config import Modality, Variant, settings
from app.backend.model.model import ModelParams


logger = logging.getLogger(__name__)


def create_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for `seed`, optionally split into an independent stream (e.g. per video)."""
    return np.random.default_rng([seed, *stream])


def create_params(
    variant: Variant,
    c_verb: int,
    c_noun: int,
    din: int,
    d: int,
    modalities: Sequence[Modality],
    rng: np.random.Generator,
    shared_trunk: bool = True,
) -> ModelParams:
    """
    Creates Glorot-uniform initialized parameters for a variant.

    Args:
        variant: Head family to build.
        c_verb: Verb classes.
        c_noun: Noun classes.
        din: Fused feature dim.
        d: Conv1D filters.
        modalities: Modalities the fused input was built from.
        rng: Source of the initial weights.
        shared_trunk: Whether verb and noun heads share the Conv1D trunk.
    Returns:
        Parameters with zero biases.
    """
    params = ModelParams(variant=variant, c_verb=c_verb, c_noun=c_noun, d=d, din=din,
                         shared_trunk=shared_trunk, modalities=tuple(modalities))
    for name, (rows, cols) in params.expected_shapes().items():
        if name.endswith(".bias"):
            params.blocks[name] = np.zeros((rows, cols))
            continue
        limit = np.sqrt(6.0 / (rows + cols))
        params.blocks[name] = rng.uniform(-limit, limit, size=(rows, cols))
    logger.info(f"Initialized {variant} parameters: Din={din}, d={d}, C_verb={c_verb}, C_noun={c_noun}")
    return params


def create_executor(threads: Optional[int] = None) -> Optional[ThreadPoolExecutor]:
    """Thread pool capped at `threads` (default NWSD_THREADS); None means run inline."""
    count = threads if threads is not None else settings.THREADS
    if count <= 1:
        return None
    logger.info(f"Thread pool created with {count} workers.")
    return ThreadPoolExecutor(max_workers=count)
