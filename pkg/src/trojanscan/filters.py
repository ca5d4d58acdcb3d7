"""Colour-filter triggers: a per-pixel MLP ``(r, g, b, i, j) -> (r', g', b')``.

The filter has one hidden layer of 16 relu units and a logistic output, so
filtered images stay in [0,1]. ``i`` and ``j`` are the row and column
normalised to [0,1], which lets the colour mapping vary across the image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .model import ModelArtifact
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, record

HIDDEN = 16
N_PROBES = 16
PROBE_SEED = 20200101
# knots of the piecewise-linear logit used by the identity initialisation
_KNOTS = np.array([0.0, 0.05, 0.2, 0.8, 0.95, 1.0])


@dataclass
class FilterParams:
    w1: np.ndarray  # [16, 5]
    b1: np.ndarray  # [16]
    w2: np.ndarray  # [3, 16]
    b2: np.ndarray  # [3]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def from_arrays(cls, arrays) -> "FilterParams":
        return cls(*[np.array(a, dtype=np.float64) for a in arrays])

    @classmethod
    def zeros(cls) -> "FilterParams":
        return cls(np.zeros((HIDDEN, 5)), np.zeros(HIDDEN), np.zeros((3, HIDDEN)), np.zeros(3))


def identity_filter(rng: Optional[np.random.Generator] = None, noise: float = 1e-3) -> FilterParams:
    """Filter whose output is within 0.05 of its input colour.

    Each channel gets five hidden units ``relu(c - t_k)`` whose weighted sum
    traces a piecewise-linear approximation of ``logit(c)``; the output
    logistic undoes it. The sixteenth unit starts (almost) silent.
    """
    t = _KNOTS[:-1]
    vals = np.log(np.clip(_KNOTS, 0.02, 0.98) / (1 - np.clip(_KNOTS, 0.02, 0.98)))
    slopes = np.diff(vals) / np.diff(_KNOTS)
    gains = np.diff(slopes, prepend=0.0)  # slope change at each knot
    p = FilterParams.zeros()
    for c in range(3):
        for k in range(len(t)):
            u = 5 * c + k
            p.w1[u, c] = 1.0
            p.b1[u] = -t[k]
            p.w2[c, u] = gains[k]
        p.b2[c] = vals[0]
    if rng is not None and noise > 0:
        p.w1 += rng.normal(0.0, noise, p.w1.shape)
        p.w2 += rng.normal(0.0, noise, p.w2.shape)
    return p


def _pixel_inputs(x: np.ndarray) -> np.ndarray:
    """``[H*W, 5]`` rows of ``(r, g, b, i, j)`` for a ``[3,H,W]`` image."""
    _, H, W = x.shape
    ii, jj = np.meshgrid(
        np.linspace(0, 1, H) if H > 1 else np.zeros(1),
        np.linspace(0, 1, W) if W > 1 else np.zeros(1),
        indexing="ij",
    )
    return np.concatenate([x.reshape(3, -1).T, ii.reshape(-1, 1), jj.reshape(-1, 1)], axis=1)


def filter_apply(params: Sequence, x) -> Tensor:
    """Apply the filter to a ``[3,H,W]`` image; ``params`` is ``[w1, b1, w2, b2]``
    as arrays or Tensors (a FilterParams is also accepted)."""
    if isinstance(params, FilterParams):
        params = params.arrays()
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"colour filters need a [3,H,W] RGB image, got shape {x.shape}")
    w1, b1, w2, b2 = (as_tensor(p) for p in params)
    h = ops.relu(ops.dense(Tensor(_pixel_inputs(x)), w1, b1))
    out = ops.sigmoid(ops.dense(h, w2, b2))  # [H*W, 3]
    return ops.reshape(_transpose_hw(out), x.shape)


def _transpose_hw(t: Tensor) -> Tensor:
    """``[N,3] -> [3,N]`` as a differentiable op."""
    return record(t.data.T.copy(), (t,), lambda g: (g.T,))


def probe_tuples() -> np.ndarray:
    """The 16 fixed ``(r, g, b, i, j)`` probes shared by every descriptor."""
    return np.random.default_rng(PROBE_SEED).uniform(0.0, 1.0, (N_PROBES, 5))


def filter_descriptor(params: Sequence) -> Tensor:
    """48-vector: the filter's outputs on the 16 probe tuples, concatenated."""
    if isinstance(params, FilterParams):
        params = params.arrays()
    w1, b1, w2, b2 = (as_tensor(p) for p in params)
    h = ops.relu(ops.dense(Tensor(probe_tuples()), w1, b1))
    return ops.reshape(ops.sigmoid(ops.dense(h, w2, b2)), (3 * N_PROBES,))


@dataclass
class FilterCandidate:
    params: FilterParams
    descriptor: np.ndarray  # [48]
    source_label: int
    flipped_label: int
    flip: float
    div: float
    reg: float
    total: float
    class_index: int = 0
    round_index: int = 0

    @property
    def flipped(self) -> bool:
        return self.flipped_label != self.source_label


def filter_losses(params: Sequence, previous: Sequence, model: ModelArtifact, x, c_star: int,
                  lambda_div: float = 0.05, lambda_reg: float = 1e-4):
    """``flip + lambda_div * div + lambda_reg * ||weights||^2`` for one image.

    ``previous`` holds earlier descriptors (arrays or FilterCandidates).
    Returns ``(total, flip, div, reg, probs)``; the first four are Tensors.
    """
    if isinstance(params, FilterParams):
        params = params.arrays()
    params = [as_tensor(p) for p in params]
    probs = model(filter_apply(params, x))
    flip = probs[int(c_star)]
    u = filter_descriptor(params)
    if previous:
        prev = np.stack([p.descriptor if isinstance(p, FilterCandidate) else np.asarray(p) for p in previous])
        dists = ops.sqrt(ops.sum(ops.square(ops.sub(u, prev)), axis=-1))
        div = ops.neg(ops.sum(dists))
    else:
        div = Tensor(0.0)
    reg = ops.sum(ops.concat([ops.reshape(ops.square(p), (-1,)) for p in params], axis=0))
    total = ops.add(ops.add(flip, ops.mul(div, lambda_div)), ops.mul(reg, lambda_reg))
    return total, flip, div, reg, probs.data


def recover_filters(model: ModelArtifact, x: np.ndarray, config, image_index: int = 0) -> list[FilterCandidate]:
    """``config.filter_rounds`` sequential filter rounds on one image.

    Each round starts from a fresh near-identity filter and keeps the lowest
    total-loss iterate among flipped ones (else the lowest overall).
    """
    x = np.asarray(x, dtype=np.float64)
    c_star = int(model.predict(x[None])[0])
    found: list[FilterCandidate] = []
    for r in range(config.filter_rounds):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, image_index, r, 1]))
        raw = identity_filter(rng).arrays()
        state = AdamState(lr=config.filter_lr)
        best, best_key = None, None
        for it in range(config.filter_iterations + 1):
            ps = [Tensor(a, requires_grad=True) for a in raw]
            with Tape() as tape:
                total, flip, div, reg, probs = filter_losses(
                    ps, found, model, x, c_star, config.filter_lambda_div, config.filter_lambda_reg
                )
            pred = int(probs.argmax())
            key = (pred == c_star, total.item())
            if best_key is None or key < best_key:
                best_key = key
                p = FilterParams.from_arrays(raw)
                best = FilterCandidate(
                    params=p, descriptor=filter_descriptor(p).data.copy(),
                    source_label=c_star, flipped_label=pred,
                    flip=flip.item(), div=div.item(), reg=reg.item(), total=total.item(),
                    class_index=image_index, round_index=r,
                )
            if it == config.filter_iterations:
                break
            grads = tape.backward(total)
            raw = adam_step(raw, [grads[p] for p in ps], state)
        found.append(best)
    return found
