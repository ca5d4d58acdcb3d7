"""Bag-of-features Trojan classifier, its evaluation harness, and the MAD score.

The supervised detector maps every feature vector of a model through a
small MLP (``alpha``), averages the results, and classifies the pooled
vector with a second MLP (``beta``) ending in a logistic unit. When filter
features are present they get their own ``alpha`` and the two pooled
vectors are concatenated before ``beta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import ops
from .features import FeatureBag
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, record

MAD_EPS = 1e-9
MAD_CAP = 1e6
MAD_SCALE = 1.4826


@dataclass
class DetectorHyper:
    alpha_hidden: tuple[int, int] = (32, 32)
    beta_hidden: int = 16
    lr: float = 1e-2
    max_epochs: int = 300
    patience: int = 40
    use_filter: bool = False


@dataclass
class DetectorParams:
    """Weights plus the feature standardisation fitted on the training bags."""

    alpha: list[np.ndarray]  # w1 b1 w2 b2 for local features
    beta: list[np.ndarray]  # w1 b1 w2 b2
    local_mean: np.ndarray
    local_std: np.ndarray
    alpha_filter: list[np.ndarray] = field(default_factory=list)
    filter_mean: Optional[np.ndarray] = None
    filter_std: Optional[np.ndarray] = None

    def arrays(self) -> list[np.ndarray]:
        return [*self.alpha, *self.alpha_filter, *self.beta]

    def with_arrays(self, arrays) -> "DetectorParams":
        na, nf = len(self.alpha), len(self.alpha_filter)
        return DetectorParams(
            list(arrays[:na]), list(arrays[na + nf :]), self.local_mean, self.local_std,
            list(arrays[na : na + nf]), self.filter_mean, self.filter_std,
        )


def _mlp_init(sizes, rng) -> list[np.ndarray]:
    out = []
    for i, o in zip(sizes[:-1], sizes[1:]):
        out += [rng.normal(0.0, np.sqrt(2.0 / i), (o, i)), np.zeros(o)]
    return out


def init_detector(hyper: DetectorHyper, rng: np.random.Generator, local_dim: int = 11,
                  filter_dim: int = 50) -> DetectorParams:
    a1, a2 = hyper.alpha_hidden
    pooled = a2 * (2 if hyper.use_filter else 1)
    return DetectorParams(
        alpha=_mlp_init((local_dim, a1, a2), rng),
        beta=_mlp_init((pooled, hyper.beta_hidden, 1), rng),
        local_mean=np.zeros(local_dim),
        local_std=np.ones(local_dim),
        alpha_filter=_mlp_init((filter_dim, a1, a2), rng) if hyper.use_filter else [],
        filter_mean=np.zeros(filter_dim) if hyper.use_filter else None,
        filter_std=np.ones(filter_dim) if hyper.use_filter else None,
    )


def _dense_rows(x, w, b) -> Tensor:
    """Dense layer whose output rows depend only on their own input row.

    BLAS matrix products round a row differently depending on how many rows
    share the call, which would break exact invariance of bag scores.
    """
    x = ops.reshape(x, (x.shape[0], 1, x.shape[1]))
    return ops.add(ops.sum(ops.mul(x, w), axis=-1), b)


def _alpha(x, w):
    h = ops.relu(_dense_rows(x, w[0], w[1]))
    return ops.relu(_dense_rows(h, w[2], w[3]))


def _mean_pool(h: Tensor, counts) -> Tensor:
    """Per-bag column means of the stacked rows ``h`` (``[B, width]``).

    Sums are correctly rounded (``math.fsum``), so the result does not depend
    on row order, and duplicating every row leaves it bit-identical.
    """
    bounds = np.concatenate([[0], np.cumsum(counts)]).astype(int)
    if np.any(np.diff(bounds) == 0):
        raise ValueError("empty feature bag")
    cols = h.data.T
    out = np.array([
        [math.fsum(col[a:b]) / (b - a) for col in cols]
        for a, b in zip(bounds[:-1], bounds[1:])
    ])
    sizes = np.diff(bounds)

    def backward(g):
        return (np.repeat(g / sizes[:, None], sizes, axis=0),)

    return record(out, (h,), backward)


def _pooled(bags, key, mean, std, weights):
    rows = [getattr(b, key) for b in bags]
    x = (np.concatenate(rows) - mean) / std
    if x.shape[1] != weights[0].shape[1]:
        raise ValueError(f"feature width {x.shape[1]} does not match detector input {weights[0].shape[1]}")
    return _mean_pool(_alpha(Tensor(x), weights), [len(r) for r in rows])


def detector_scores(bags: Sequence[FeatureBag], params: DetectorParams, weights=None) -> Tensor:
    """Trojan scores in [0,1] for a list of bags (``[B]`` Tensor).

    ``weights`` optionally overrides ``params.arrays()`` with Tensors so the
    result can be differentiated.
    """
    w = list(weights) if weights is not None else [as_tensor(a) for a in params.arrays()]
    na, nf = len(params.alpha), len(params.alpha_filter)
    alpha, alpha_f, beta = w[:na], w[na : na + nf], w[na + nf :]
    h = _pooled(bags, "local", params.local_mean, params.local_std, alpha)
    if nf:
        hf = _pooled(bags, "filter", params.filter_mean, params.filter_std, alpha_f)
        h = ops.concat([hf, h], axis=-1)
    elif beta[0].shape[1] != h.shape[1]:
        raise ValueError(f"pooled width {h.shape[1]} does not match classifier input {beta[0].shape[1]}")
    z = _dense_rows(ops.relu(_dense_rows(h, beta[0], beta[1])), beta[2], beta[3])
    return ops.sigmoid(ops.reshape(z, (len(bags),)))


def detector_forward(bag: FeatureBag, params: DetectorParams) -> float:
    return float(detector_scores([bag], params).data[0])


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks: ties contribute 1/2 per pair
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    return float(np.mean((s >= threshold) == y))


def _standardiser(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    std = rows.std(axis=0)
    return rows.mean(axis=0), np.where(std > 1e-12, std, 1.0)


def train_detector(
    bags: Sequence[FeatureBag],
    labels,
    hyper: Optional[DetectorHyper] = None,
    seed: int = 0,
    val_bags: Optional[Sequence[FeatureBag]] = None,
    val_labels=None,
) -> DetectorParams:
    """Full-batch Adam on binary cross-entropy.

    With a validation set, the weights from the epoch with the best
    validation AUC (ties broken by validation loss) are returned and
    training stops after ``patience`` epochs without improvement.
    """
    hyper = hyper or DetectorHyper()
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both clean and Trojaned models")
    rng = np.random.default_rng(seed)
    params = init_detector(hyper, rng, bags[0].local.shape[1], bags[0].filter.shape[1] or 50)
    params.local_mean, params.local_std = _standardiser(np.concatenate([b.local for b in bags]))
    if hyper.use_filter:
        params.filter_mean, params.filter_std = _standardiser(np.concatenate([b.filter for b in bags]))
    has_val = val_bags is not None and len(np.unique(val_labels)) == 2

    raw = params.arrays()
    state = AdamState(lr=hyper.lr)
    best, best_auc, since = raw, (-np.inf, -np.inf), 0
    for _ in range(hyper.max_epochs):
        ws = [Tensor(a, requires_grad=True) for a in raw]
        with Tape() as tape:
            loss = ops.binary_cross_entropy(detector_scores(bags, params, ws), y)
        grads = tape.backward(loss)
        raw = adam_step(raw, [grads[w] for w in ws], state)
        if has_val:
            vs = detector_scores(val_bags, params.with_arrays(raw))
            # validation AUC first; validation BCE breaks ties
            score = (auc(vs.data, val_labels), -ops.binary_cross_entropy(vs, val_labels).item())
            if score > best_auc:
                best, best_auc, since = raw, score, 0
            else:
                since += 1
                if since >= hyper.patience:
                    break
    return params.with_arrays(best if has_val else raw)


@dataclass
class EvalReport:
    aucs: list[float]
    accs: list[float]

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def std_auc(self) -> float:
        return float(np.std(self.aucs))

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accs))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.accs))

    def to_tsv(self) -> str:
        lines = ["fold\tauc\tacc"]
        lines += [f"{k}\t{a!r}\t{c!r}" for k, (a, c) in enumerate(zip(self.aucs, self.accs))]
        lines += ["mean_auc\tstd_auc\tmean_acc\tstd_acc",
                  f"{self.mean_auc!r}\t{self.std_auc!r}\t{self.mean_acc!r}\t{self.std_acc!r}"]
        return "\n".join(lines) + "\n"


def stratified_splits(labels, folds: int = 8, seed: int = 0, val_fraction: float = 0.1):
    """Yield ``(train, val, test)`` index arrays, one triple per fold.

    Each class is shuffled and dealt round-robin into folds; the test set
    is one fold, the validation set takes ``val_fraction`` of all models
    (stratified) from the rest, and training gets the remainder.
    """
    y = np.asarray(labels)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    classes = np.unique(y)
    counts = {c: int((y == c).sum()) for c in classes}
    if len(classes) < 2 or min(counts.values()) < folds:
        raise ValueError(f"need at least {folds} models of each class for {folds}-fold stratification, got {counts}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        fold_of[idx] = np.arange(len(idx)) % folds
    for k in range(folds):
        test = np.flatnonzero(fold_of == k)
        val = []
        for c in classes:
            pool = rng.permutation(np.flatnonzero((fold_of != k) & (y == c)))
            n_val = max(1, int(round(val_fraction * counts[c])))
            val.extend(pool[:n_val].tolist())
        val = np.sort(np.array(val, dtype=np.int64))
        train = np.setdiff1d(np.flatnonzero(fold_of != k), val)
        yield train, val, test


def _fold_task(args):
    bags, y, train, val, test, hyper, seed = args
    pick = lambda idx: [bags[i] for i in idx]  # noqa: E731
    params = train_detector(pick(train), y[train], hyper, seed, pick(val), y[val])
    scores = detector_scores(pick(test), params).data
    return auc(scores, y[test]), accuracy(scores, y[test])


def cross_validate(bags: Sequence[FeatureBag], labels, folds: int = 8, seed: int = 0,
                   hyper: Optional[DetectorHyper] = None, workers: int = 1,
                   init_seed: Optional[int] = None) -> EvalReport:
    """Stratified k-fold evaluation; ``seed`` fixes the folds and ``init_seed``
    (default ``seed``) the detector initialisation in each fold."""
    from .zoo import _map

    init_seed = seed if init_seed is None else init_seed
    y = np.asarray(labels, dtype=np.int64)
    tasks = [
        (list(bags), y, tr, va, te, hyper, int(np.random.SeedSequence([init_seed, k]).generate_state(1)[0]))
        for k, (tr, va, te) in enumerate(stratified_splits(y, folds, seed))
    ]
    results = _map(_fold_task, tasks, workers)
    return EvalReport([r[0] for r in results], [r[1] for r in results])


def mad_score(values) -> float:
    """``|min - median| / (1.4826 * MAD)`` with MAD floored at 1e-9; capped at 1e6."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        raise ValueError("MAD scoring needs at least 3 per-class values")
    med = np.median(v)
    mad = max(np.median(np.abs(v - med)), MAD_EPS)
    return float(min(abs(v.min() - med) / (MAD_SCALE * mad), MAD_CAP))


def class_trigger_sizes(candidates, num_classes: int) -> np.ndarray:
    """Smallest mask L1 mass among flipped candidates that reach each label.

    Labels no candidate flips to get the largest mass seen for the model,
    since no trigger for them was found.
    """
    masses = np.array([float(np.sum(c.mask)) for c in candidates])
    sizes = np.full(num_classes, np.nan)
    for c, mass in zip(candidates, masses):
        if c.flipped and not mass >= sizes[c.flipped_label]:
            sizes[c.flipped_label] = mass
    return np.where(np.isnan(sizes), masses.max() if len(masses) else 0.0, sizes)


def mad_detect(per_class_statistics) -> np.ndarray:
    """MAD anomaly score for each row of a ``[models, K]`` array."""
    stats = np.atleast_2d(np.asarray(per_class_statistics, dtype=np.float64))
    return np.array([mad_score(row) for row in stats])
