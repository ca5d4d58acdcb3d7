"""Fixed-size feature vectors for trigger candidates, grouped per model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .filters import N_PROBES, FilterCandidate
from .persistence import count_components, topo_loss
from .triggers import TriggerCandidate

LOCAL_COLUMNS = (
    "L_flip", "L_div", "fg_fraction", "mean_x", "std_x", "mean_y", "std_y",
    "L_topo", "n_components", "comp_size_mean", "comp_size_std",
)
FILTER_COLUMNS = tuple(f"u{i}" for i in range(3 * N_PROBES)) + ("L_flip_filter", "L_div_filter")
THRESHOLD = 0.5


def _coords(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)


def spatial_moments(mask: np.ndarray) -> tuple[float, float, float, float]:
    """``(mean_x, std_x, mean_y, std_y)`` of the mask read as a distribution.

    x runs along columns, y along rows, both normalised to [0,1]. A mask
    with no mass gives zeros.
    """
    m = np.asarray(mask, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        return 0.0, 0.0, 0.0, 0.0
    out = []
    for marginal, coords in ((m.sum(axis=0) / total, _coords(m.shape[1])), (m.sum(axis=1) / total, _coords(m.shape[0]))):
        mu = float(marginal @ coords)
        out += [mu, float(np.sqrt(max(marginal @ (coords - mu) ** 2, 0.0)))]
    return tuple(out)


def local_features(mask: np.ndarray, flip: float, div: float) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    fg = m > THRESHOLD
    n, sizes = count_components(fg)
    sizes = np.asarray(sizes, dtype=np.float64)
    return np.array([
        flip,
        div,
        fg.sum() / fg.size,
        *spatial_moments(m),
        topo_loss(m)[0],
        n,
        sizes.mean() if n else 0.0,
        sizes.std() if n else 0.0,
    ])


def extract_features(candidate) -> np.ndarray:
    """11 values for a TriggerCandidate, 50 for a FilterCandidate."""
    if isinstance(candidate, FilterCandidate):
        return np.concatenate([candidate.descriptor, [candidate.flip, candidate.div]])
    if isinstance(candidate, TriggerCandidate):
        return local_features(candidate.mask, candidate.flip, candidate.div)
    raise TypeError(f"cannot extract features from {type(candidate).__name__}")


@dataclass
class FeatureBag:
    model_id: str
    local: np.ndarray  # [n_local, 11]
    local_index: np.ndarray  # [n_local, 2] (class, round)
    filter: np.ndarray = field(default_factory=lambda: np.zeros((0, len(FILTER_COLUMNS))))
    filter_index: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.local = np.asarray(self.local, dtype=np.float64).reshape(-1, len(LOCAL_COLUMNS))
        self.filter = np.asarray(self.filter, dtype=np.float64).reshape(-1, len(FILTER_COLUMNS))
        self.local_index = np.asarray(self.local_index, dtype=np.int64).reshape(-1, 2)
        self.filter_index = np.asarray(self.filter_index, dtype=np.int64).reshape(-1, 2)
        if len(self.local) != len(self.local_index) or len(self.filter) != len(self.filter_index):
            raise ValueError("feature rows and (class, round) indices differ in length")
        if not (np.isfinite(self.local).all() and np.isfinite(self.filter).all()):
            raise ValueError(f"non-finite features in bag {self.model_id}")

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return self.model_id == other.model_id and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("local", "local_index", "filter", "filter_index")
        )


def build_bag(model_id: str, local: Sequence[TriggerCandidate], filters: Sequence[FilterCandidate] = (),
              num_classes: int | None = None, n_rounds: int | None = None,
              n_filter_rounds: int | None = None) -> FeatureBag:
    """Assemble a bag; the expected counts are checked when given."""
    if num_classes is not None and n_rounds is not None and len(local) != num_classes * n_rounds:
        raise ValueError(f"{len(local)} local candidates, expected {num_classes}x{n_rounds}")
    if filters and num_classes is not None and n_filter_rounds is not None and len(filters) != num_classes * n_filter_rounds:
        raise ValueError(f"{len(filters)} filter candidates, expected {num_classes}x{n_filter_rounds}")
    return FeatureBag(
        model_id=model_id,
        local=np.array([extract_features(c) for c in local]).reshape(-1, len(LOCAL_COLUMNS)),
        local_index=[(c.class_index, c.round_index) for c in local],
        filter=np.array([extract_features(c) for c in filters]).reshape(-1, len(FILTER_COLUMNS)),
        filter_index=[(c.class_index, c.round_index) for c in filters],
    )


def _header(columns) -> str:
    return "\t".join(("model", "class", "round", *columns)) + "\n"


def dump_bags(bags: Sequence[FeatureBag]) -> str:
    """Tab-separated dump: a header naming the columns, then one line per
    candidate. Filter features, if any, follow under their own header."""
    parts = [_header(LOCAL_COLUMNS)]
    for bag in bags:
        for (c, r), row in zip(bag.local_index, bag.local):
            parts.append("\t".join([bag.model_id, str(c), str(r), *map(repr, row.tolist())]) + "\n")
    if any(len(b.filter) for b in bags):
        parts.append(_header(FILTER_COLUMNS))
        for bag in bags:
            for (c, r), row in zip(bag.filter_index, bag.filter):
                parts.append("\t".join([bag.model_id, str(c), str(r), *map(repr, row.tolist())]) + "\n")
    return "".join(parts)


def parse_bags(text: str) -> list[FeatureBag]:
    rows: dict[str, dict[str, list]] = {}
    width = None
    kind = "local"
    for line in text.splitlines():
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "model":
            width = len(fields) - 3
            kind = "local" if width == len(LOCAL_COLUMNS) else "filter"
            continue
        if width is None or len(fields) != width + 3:
            raise ValueError(f"malformed feature line: {line[:60]!r}")
        slot = rows.setdefault(fields[0], {"local": [], "li": [], "filter": [], "fi": []})
        slot[kind].append([float(v) for v in fields[3:]])
        slot["li" if kind == "local" else "fi"].append((int(fields[1]), int(fields[2])))
    return [
        FeatureBag(mid, s["local"], s["li"], s["filter"] or np.zeros((0, len(FILTER_COLUMNS))), s["fi"] or np.zeros((0, 2)))
        for mid, s in rows.items()
    ]
