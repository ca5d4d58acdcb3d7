"""Multi-round reverse engineering of local (mask, pattern) triggers.

Each round minimises, per clean image ``x`` predicted as class ``c*``::

    p_c*(phi) + l_div * L_div + l_topo * L_topo(m) + R(m)
    phi = (1 - m) * x + m * theta

over a logistic-parameterised mask ``m`` and pattern ``theta``. ``L_div``
rewards distance from the masked patterns found in earlier rounds, and
``L_topo`` penalises every connected component of the mask beyond the
most persistent one.

All images of a model are optimised together as one batch; every per-image
term depends only on that image's parameters and Adam is elementwise, so a
batched run is the same as independent runs.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .model import ModelArtifact
from .optim import AdamState, adam_step
from .persistence import topo_loss_op
from .tensor import Tape, Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass
class RecoveryConfig:
    lambda_div: float = 1.0
    lambda_topo: float = 10.0
    n_rounds: int = 3
    iterations: int = 100
    lr: float = 0.1
    mask_init: float = 0.1
    init_noise: float = 0.1
    seed: int = 0
    filter_enabled: bool = False
    filter_lambda_div: float = 0.05
    filter_lambda_reg: float = 1e-4
    filter_rounds: int = 8
    filter_iterations: int = 10
    filter_lr: float = 3e-2

    def __post_init__(self):
        if self.n_rounds < 1 or self.filter_rounds < 1:
            raise ValueError("number of rounds must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskParams:
    raw_mask: Tensor  # [H,W] or [B,H,W], unconstrained
    raw_pattern: Tensor  # [C,H,W] or [B,C,H,W], unconstrained

    @property
    def mask(self) -> Tensor:
        return ops.sigmoid(self.raw_mask)

    @property
    def pattern(self) -> Tensor:
        return ops.sigmoid(self.raw_pattern)


@dataclass
class TriggerCandidate:
    mask: np.ndarray  # [H,W] in [0,1]
    pattern: np.ndarray  # [C,H,W] in [0,1]
    source_label: int  # c*, the clean prediction
    flipped_label: int  # prediction on the triggered image
    flip: float
    div: float
    topo: float
    reg: float
    total: float
    class_index: int = 0
    round_index: int = 0
    first_flip: Optional[int] = None  # iteration of the first label flip

    @property
    def flipped(self) -> bool:
        return self.flipped_label != self.source_label

    @property
    def masked_pattern(self) -> np.ndarray:
        return self.mask[None] * self.pattern

    @property
    def losses(self) -> tuple[float, float, float, float]:
        return self.flip, self.div, self.topo, self.reg


# -- loss terms ---------------------------------------------------------------

def compose(x, m, theta) -> Tensor:
    """``(1 - m) * x + m * theta`` with the mask broadcast over channels."""
    x, m, theta = as_tensor(x), as_tensor(m), as_tensor(theta)
    if m.shape[-2:] != x.shape[-2:] or theta.shape != x.shape[-theta.ndim:]:
        raise ValueError(f"compose shapes: x {x.shape}, m {m.shape}, theta {theta.shape}")
    mc = ops.reshape(m, m.shape[:-2] + (1,) + m.shape[-2:])
    return ops.add(ops.mul(ops.sub(1.0, mc), x), ops.mul(mc, theta))


def flip_loss(model: ModelArtifact, x, m, theta, c_star) -> Tensor:
    """Softmax probability of the clean class ``c_star`` on the composed image."""
    probs = model(compose(x, m, theta))
    if probs.ndim == 1:
        return probs[int(c_star)]
    c = np.asarray(c_star, dtype=np.int64)
    return probs[np.arange(len(c)), c]


def div_loss(m, theta, previous: Sequence) -> Tensor:
    """``-sum_j ||m*theta - m_j*theta_j||_2`` over earlier masked patterns.

    ``previous`` holds TriggerCandidates or masked-pattern arrays shaped
    like ``m * theta``. Batched inputs take a list of ``[B,C,H,W]`` arrays.
    """
    m, theta = as_tensor(m), as_tensor(theta)
    batched = theta.ndim == 4
    if not previous:
        return Tensor(np.zeros(theta.shape[0]) if batched else 0.0)
    prev = np.stack([p.masked_pattern if isinstance(p, TriggerCandidate) else np.asarray(p) for p in previous])
    mc = ops.reshape(m, m.shape[:-2] + (1,) + m.shape[-2:])
    current = ops.mul(mc, theta)
    diff = ops.sub(current, prev)  # broadcast over rounds j
    axes = tuple(range(diff.ndim - 3, diff.ndim))
    dists = ops.sqrt(ops.sum(ops.square(diff), axis=axes))  # [J] or [J,B]
    return ops.neg(ops.sum(dists, axis=0))


def _axis_coords(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)


def mask_regularizer(m) -> Tensor:
    """``mean(m) + std_x + std_y`` of the mask read as a 2-D distribution.

    Coordinates are normalised to [0,1]; an all-zero mask scores 0.
    """
    m = as_tensor(m)
    H, W = m.shape[-2:]
    mass = ops.sum(m, axis=(-2, -1), keepdims=True)
    if np.any(mass.data <= 0):
        if m.ndim == 2:
            return Tensor(0.0)
        safe = np.where(mass.data > 0, 1.0, 0.0)
        return ops.mul(mask_regularizer(ops.add(m, 1.0 - safe)), safe[..., 0, 0])
    p = ops.div(m, mass)
    spread = []
    for axis, coords in ((-2, _axis_coords(W)), (-1, _axis_coords(H))):
        # summing over rows gives the column (x) marginal and vice versa
        marginal = ops.sum(p, axis=axis)
        mu = ops.sum(ops.mul(marginal, coords), axis=-1, keepdims=True)
        centred = ops.sub(coords, mu)
        var = ops.sum(ops.mul(marginal, ops.square(centred)), axis=-1)
        spread.append(ops.sqrt(var))
    return ops.add(ops.add(ops.mean(m, axis=(-2, -1)), spread[0]), spread[1])


@dataclass
class LossTerms:
    total: Tensor  # scalar, summed over the batch
    per_image: np.ndarray
    flip: np.ndarray
    div: np.ndarray
    topo: np.ndarray
    reg: np.ndarray
    probs: np.ndarray


def total_loss(
    model: ModelArtifact,
    x,
    params: MaskParams,
    previous: Sequence,
    config: RecoveryConfig,
    c_star,
) -> LossTerms:
    """Weighted sum ``flip + l_div*div + l_topo*topo + R`` (summed over a batch)."""
    m, theta = params.mask, params.pattern
    batched = m.ndim == 3
    probs = model(compose(x, m, theta))
    if batched:
        c = np.asarray(c_star, dtype=np.int64)
        flip = probs[np.arange(len(c)), c]
    else:
        flip = probs[int(c_star)]
    terms = [flip]
    div = div_loss(m, theta, previous)
    if config.lambda_div and previous:
        terms.append(ops.mul(div, config.lambda_div))
    topo = topo_loss_op(m)
    if config.lambda_topo:
        terms.append(ops.mul(topo, config.lambda_topo))
    reg = mask_regularizer(m)
    terms.append(reg)
    per = terms[0]
    for t in terms[1:]:
        per = ops.add(per, t)
    total = ops.sum(per)
    return LossTerms(
        total=total,
        per_image=np.atleast_1d(per.data).copy(),
        flip=np.atleast_1d(flip.data).copy(),
        div=np.atleast_1d(div.data).copy(),
        topo=np.atleast_1d(topo.data).copy(),
        reg=np.atleast_1d(reg.data).copy(),
        probs=np.atleast_2d(probs.data).copy(),
    )


# -- optimisation -------------------------------------------------------------

def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _round_seed(seed: int, image_index: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, image_index, round_index]))


def init_params(shape, config: RecoveryConfig, image_index: int, round_index: int):
    """Raw mask at logit(mask_init) and raw pattern at logit(0.5), plus noise."""
    C, H, W = shape
    rng = _round_seed(config.seed, image_index, round_index)
    raw_mask = _logit(config.mask_init) + rng.normal(0.0, config.init_noise, (H, W))
    raw_pattern = rng.normal(0.0, config.init_noise, (C, H, W))
    return raw_mask, raw_pattern


def optimize_batch(
    model: ModelArtifact,
    images: np.ndarray,
    previous: Sequence[np.ndarray],
    config: RecoveryConfig,
    round_index: int = 0,
    image_indices: Optional[Sequence[int]] = None,
) -> list[TriggerCandidate]:
    """One recovery round for a batch of images.

    ``previous`` is a list (one per earlier round) of ``[B,C,H,W]`` masked
    patterns. Returns the best iterate per image: the lowest total loss
    among flipped iterates, else the lowest overall.
    """
    images = np.asarray(images, dtype=np.float64)
    B, C, H, W = images.shape
    idx = list(range(B)) if image_indices is None else list(image_indices)
    c_star = model.predict(images)
    x = Tensor(images)
    inits = [init_params((C, H, W), config, i, round_index) for i in idx]
    raw = [np.stack([a for a, _ in inits]), np.stack([b for _, b in inits])]
    state = AdamState(lr=config.lr)

    best_loss = np.full(B, np.inf)
    best_flipped = np.zeros(B, dtype=bool)
    best: list[Optional[TriggerCandidate]] = [None] * B
    first_flip: list[Optional[int]] = [None] * B

    for it in range(config.iterations + 1):
        params = MaskParams(Tensor(raw[0], requires_grad=True), Tensor(raw[1], requires_grad=True))
        with Tape() as tape:
            terms = total_loss(model, x, params, previous, config, c_star)
        preds = terms.probs.argmax(axis=1)
        mask = ops._logistic(raw[0])
        pattern = ops._logistic(raw[1])
        for b in range(B):
            flipped = preds[b] != c_star[b]
            if flipped and first_flip[b] is None:
                first_flip[b] = it
            better = (flipped and not best_flipped[b]) or (
                flipped == best_flipped[b] and terms.per_image[b] < best_loss[b]
            )
            if better:
                best_loss[b] = terms.per_image[b]
                best_flipped[b] = flipped
                best[b] = TriggerCandidate(
                    mask=mask[b].copy(), pattern=pattern[b].copy(),
                    source_label=int(c_star[b]), flipped_label=int(preds[b]),
                    flip=float(terms.flip[b]), div=float(terms.div[b]),
                    topo=float(terms.topo[b]), reg=float(terms.reg[b]),
                    total=float(terms.per_image[b]),
                    class_index=idx[b], round_index=round_index,
                )
        if it == config.iterations:
            break
        grads = tape.backward(terms.total)
        raw = adam_step(raw, [grads[params.raw_mask], grads[params.raw_pattern]], state)

    for b in range(B):
        best[b].first_flip = first_flip[b]
    return best


def recover_round(
    model: ModelArtifact,
    x: np.ndarray,
    previous: Sequence[TriggerCandidate],
    config: RecoveryConfig,
    image_index: int = 0,
    round_index: Optional[int] = None,
) -> TriggerCandidate:
    """Recover one candidate for a single ``[C,H,W]`` image."""
    r = len(previous) if round_index is None else round_index
    prev = [p.masked_pattern[None] for p in previous]
    return optimize_batch(model, np.asarray(x)[None], prev, config, r, [image_index])[0]


def recover_all(model: ModelArtifact, images: np.ndarray, config: RecoveryConfig) -> list[TriggerCandidate]:
    """``n_rounds`` sequential rounds for every image; ordered by (image, round)."""
    images = np.asarray(images, dtype=np.float64)
    rounds: list[list[TriggerCandidate]] = []
    for r in range(config.n_rounds):
        prev = [np.stack([c.masked_pattern for c in rc]) for rc in rounds]
        rounds.append(optimize_batch(model, images, prev, config, r))
    return [rounds[r][i] for i in range(len(images)) for r in range(config.n_rounds)]


def mask_iou(mask: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    pred = np.asarray(mask) > threshold
    truth = np.asarray(truth, dtype=bool)
    union = np.count_nonzero(pred | truth)
    return np.count_nonzero(pred & truth) / union if union else 0.0
