"""Adam optimizer over lists of numpy parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss becomes NaN/inf."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays.

    ``state`` is advanced in place (moments and step counter).
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros(np.shape(p)) for p in params]
        state.v = [np.zeros(np.shape(p)) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g) or np.shape(p) != state.m[i].shape:
            raise ShapeError(f"parameter {i}: shape {np.shape(p)} vs gradient {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise DivergenceError(f"parameter {i}: {bad} non-finite gradient entries at step {state.step + 1}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        state.m[i], state.v[i] = m, v
        out.append(np.asarray(p) - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out
