import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from app.backend.exceptions import NumericError, ShapeError
from app.backend.kernel.numkernel import Matrix


logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, Matrix] = field(default_factory=dict)
    v: Dict[str, Matrix] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Matrix]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, Matrix], grads: Mapping[str, Matrix], state: AdamState, lr: float) -> None:
    """
    One bias-corrected Adam update, applied in place to `params` and `state`.
    A non-finite gradient aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise ShapeError(f"gradient for '{name}' does not match any parameter block")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient in '{name}' ({bad} entries) at step {state.step + 1}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
