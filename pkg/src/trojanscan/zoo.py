"""Synthetic population of clean and Trojaned classifiers.

Images are procedural glyphs (bars, crosses, rings, corners, blobs, ...)
drawn in a random bright colour over a dark noisy background. Trojaned
models are trained on data where a fraction of samples carry a solid
square patch and are relabelled to a target class.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .formats import read_idx_images, read_idx_labels
from .model import LayerSpec, ModelArtifact, default_architecture, forward, init_weights, load_model, save_model
from .optim import AdamState, DivergenceError, adam_step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

GLYPHS = (
    "hbar", "vbar", "cross", "ring", "blob",
    "diag", "antidiag", "corner", "xcross", "frame",
)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N]
    num_classes: int
    poisoned: Optional[np.ndarray] = None  # [N] bool, set by poison_dataset

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "square"  # "square" or "color-filter"
    row: int = 0
    col: int = 0
    side: int = 4
    color: tuple[float, ...] = (1.0, 1.0, 1.0)
    target_label: int = 0

    def check(self, shape, num_classes: Optional[int] = None) -> None:
        C, H, W = shape
        if self.kind not in ("square", "color-filter"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if len(self.color) != C:
            raise ValueError(f"trigger colour has {len(self.color)} channels, image has {C}")
        if self.kind == "square" and (
            self.side < 0 or self.row < 0 or self.col < 0
            or self.row + self.side > H or self.col + self.side > W
        ):
            raise ValueError(f"square trigger {self.side}px at ({self.row},{self.col}) outside {H}x{W}")
        if num_classes is not None and not 0 <= self.target_label < num_classes:
            raise ValueError(f"target label {self.target_label} outside [0,{num_classes})")

    def patch_mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        if self.kind == "square":
            m[self.row : self.row + self.side, self.col : self.col + self.side] = True
        return m


# -- data --------------------------------------------------------------------

def _glyph(kind: str, yy, xx, cy, cx, size, thick):
    dy, dx = yy - cy, xx - cx
    if kind == "hbar":
        d = np.maximum(np.abs(dy) - thick / 2, np.abs(dx) - size)
    elif kind == "vbar":
        d = np.maximum(np.abs(dx) - thick / 2, np.abs(dy) - size)
    elif kind == "cross":
        h = np.maximum(np.abs(dy) - thick / 2, np.abs(dx) - size)
        v = np.maximum(np.abs(dx) - thick / 2, np.abs(dy) - size)
        d = np.minimum(h, v)
    elif kind == "ring":
        d = np.abs(np.hypot(dy, dx) - size * 0.75) - thick / 2
    elif kind == "blob":
        d = np.hypot(dy, dx) - size * 0.6
    elif kind in ("diag", "antidiag"):
        s = 1.0 if kind == "diag" else -1.0
        along = (dx + s * dy) / np.sqrt(2)
        across = (dx - s * dy) / np.sqrt(2)
        d = np.maximum(np.abs(across) - thick / 2, np.abs(along) - size)
    elif kind == "corner":
        h = np.maximum(np.abs(dy - size / 2) - thick / 2, np.abs(dx) - size / 2)
        v = np.maximum(np.abs(dx + size / 2) - thick / 2, np.abs(dy) - size / 2)
        d = np.minimum(h, v)
    elif kind == "xcross":
        a = np.maximum(np.abs((dx - dy) / np.sqrt(2)) - thick / 2, np.abs((dx + dy) / np.sqrt(2)) - size)
        b = np.maximum(np.abs((dx + dy) / np.sqrt(2)) - thick / 2, np.abs((dx - dy) / np.sqrt(2)) - size)
        d = np.minimum(a, b)
    elif kind == "frame":
        d = np.abs(np.maximum(np.abs(dy), np.abs(dx)) - size * 0.6) - thick / 2
    else:
        raise ValueError(kind)
    return np.clip(0.5 - d, 0.0, 1.0)


def gen_dataset(seed: int, num_classes: int = 5, n_per_class: int = 200, shape=(3, 28, 28)) -> Dataset:
    """Deterministic procedural glyph dataset, class-balanced and shuffled."""
    if not 2 <= num_classes <= len(GLYPHS):
        raise ValueError(f"num_classes must be in [2, {len(GLYPHS)}]")
    C, H, W = shape
    rng = np.random.default_rng(seed)
    n = num_classes * n_per_class
    labels = np.repeat(np.arange(num_classes), n_per_class)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    scale = min(H, W) / 28.0
    cy = H / 2 - 0.5 + rng.uniform(-3, 3, n) * scale
    cx = W / 2 - 0.5 + rng.uniform(-3, 3, n) * scale
    size = rng.uniform(6.0, 8.5, n) * scale
    thick = rng.uniform(2.0, 3.5, n) * scale
    alpha = np.empty((n, H, W))
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        alpha[idx] = _glyph(
            GLYPHS[k], yy, xx,
            cy[idx, None, None], cx[idx, None, None], size[idx, None, None], thick[idx, None, None],
        )
    fg = rng.uniform(0.45, 1.0, (n, C, 1, 1))
    bg = rng.uniform(0.0, 0.25, (n, C, 1, 1))
    a = alpha[:, None]
    images = bg * (1 - a) + fg * a + rng.normal(0.0, 0.05, (n, C, H, W))
    order = rng.permutation(n)
    return Dataset(np.clip(images, 0.0, 1.0)[order], labels[order], num_classes)


def load_idx_dataset(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Dataset from an MNIST-style IDX image/label pair (single channel)."""
    images = read_idx_images(images_path)[:, None]
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(images, labels, k)


def plant_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Return a copy of ``[C,H,W]`` (or a ``[N,C,H,W]`` batch) carrying the trigger."""
    image = np.asarray(image, dtype=np.float64)
    spec.check(image.shape[-3:])
    out = image.copy()
    color = np.asarray(spec.color, dtype=np.float64)
    if spec.kind == "square":
        r, c, s = spec.row, spec.col, spec.side
        out[..., r : r + s, c : c + s] = color[:, None, None]
    else:
        # global tint standing in for a lens filter
        out = 0.5 * out + 0.5 * color[:, None, None]
    return out


def poison_dataset(dataset: Dataset, rate: float, spec: TriggerSpec, seed: int = 0) -> Dataset:
    """Plant the trigger in ``floor(rate*n)`` uniformly chosen samples and relabel them."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poison rate {rate} outside [0,1]")
    spec.check(dataset.shape, dataset.num_classes)
    n = len(dataset)
    k = int(math.floor(rate * n))
    chosen = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    if k:
        images[chosen] = plant_trigger(images[chosen], spec)
        labels[chosen] = spec.target_label
    poisoned = np.zeros(n, dtype=bool)
    poisoned[chosen] = True
    return Dataset(images, labels, dataset.num_classes, poisoned=poisoned)


def triggered_eval_set(dataset: Dataset, spec: TriggerSpec) -> np.ndarray:
    """Triggered copies of every sample whose true label is not the target."""
    keep = dataset.labels != spec.target_label
    return plant_trigger(dataset.images[keep], spec)


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 6
    lr: float = 0.01
    batch_size: int = 32


@dataclass
class TrainResult:
    model: ModelArtifact
    accuracy: float
    attack_rate: Optional[float] = None
    final_loss: float = float("nan")


def accuracy(model: ModelArtifact, dataset: Dataset) -> float:
    return float(np.mean(model.predict(dataset.images) == dataset.labels))


def attack_success_rate(model: ModelArtifact, clean: Dataset, spec: TriggerSpec) -> float:
    triggered = triggered_eval_set(clean, spec)
    if len(triggered) == 0:
        return float("nan")
    return float(np.mean(model.predict(triggered) == spec.target_label))


def train_classifier(
    dataset: Dataset,
    layers: Optional[list[LayerSpec]] = None,
    epochs: int = 6,
    seed: int = 0,
    *,
    lr: float = 0.01,
    batch_size: int = 32,
    val: Optional[Dataset] = None,
    trigger: Optional[TriggerSpec] = None,
) -> TrainResult:
    """Minibatch Adam on cross-entropy. Accuracy is on ``val`` (else the training set).

    When ``trigger`` is given the attack success rate on triggered ``val``
    images is also reported.
    """
    C, H, W = dataset.shape
    if layers is None:
        layers = default_architecture(C, H, W, dataset.num_classes)
    rng = np.random.default_rng(seed)
    weights = init_weights(layers, rng)
    state = AdamState(lr=lr)
    n = len(dataset)
    loss_value = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            params = [Tensor(w, requires_grad=True) for w in weights]
            with Tape() as tape:
                probs = forward(layers, params, Tensor(dataset.images[idx]))
                loss = ops.cross_entropy(probs, dataset.labels[idx])
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(f"training loss became {loss_value} in epoch {epoch}")
            grads = tape.backward(loss)
            weights = adam_step(weights, [grads[p] for p in params], state)

    model = ModelArtifact(layers=layers, weights=weights, input_shape=(C, H, W), seed=seed)
    ref = val if val is not None else dataset
    asr = attack_success_rate(model, ref, trigger) if trigger is not None else None
    return TrainResult(model, accuracy(model, ref), asr, loss_value)


# -- zoo ---------------------------------------------------------------------

@dataclass
class ZooConfig:
    count: int = 200
    trojan_fraction: float = 0.5
    num_classes: int = 5
    shape: tuple[int, int, int] = (3, 28, 28)
    n_per_class: int = 200
    n_val_per_class: int = 40
    poison_rate: float = 0.2
    side_range: tuple[int, int] = (3, 6)
    trigger_kind: str = "square"
    epochs: int = 6
    lr: float = 0.01
    batch_size: int = 32
    max_retries: int = 3
    min_attack_rate: float = 0.95
    max_accuracy_gap: float = 0.05
    seed: int = 0
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.trojan_fraction <= 1.0:
            raise ValueError(f"trojan fraction {self.trojan_fraction} outside [0,1]")
        if self.count < 1:
            raise ValueError("zoo count must be positive")
        self.shape = tuple(self.shape)
        self.side_range = tuple(self.side_range)

    @property
    def n_trojaned(self) -> int:
        return int(round(self.count * self.trojan_fraction))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ZooConfig":
        return cls(**json.loads(text))


@dataclass
class ZooEntry:
    path: str
    trojaned: bool
    trigger: Optional[TriggerSpec]
    clean_acc: float
    attack_rate: Optional[float]
    flagged: bool = field(default=False, compare=False)

    def to_line(self) -> str:
        t = self.trigger
        if t is None:
            trig = ["-1", "-1", "-1", "0", "-"]
        else:
            trig = [str(t.target_label), str(t.row), str(t.col), str(t.side), ",".join(repr(float(c)) for c in t.color)]
        rate = "-" if self.attack_rate is None else repr(float(self.attack_rate))
        return "\t".join([self.path, "1" if self.trojaned else "0", *trig, repr(float(self.clean_acc)), rate])

    @classmethod
    def from_line(cls, line: str) -> "ZooEntry":
        f = line.rstrip("\n").split("\t")
        if len(f) != 9:
            raise ValueError(f"manifest line has {len(f)} fields, expected 9: {line!r}")
        trojaned = f[1] == "1"
        trigger = None
        if trojaned:
            side = int(f[5])
            trigger = TriggerSpec(
                kind="square" if side > 0 else "color-filter",
                row=int(f[3]), col=int(f[4]), side=side,
                color=tuple(float(c) for c in f[6].split(",")),
                target_label=int(f[2]),
            )
        rate = None if f[8] == "-" else float(f[8])
        return cls(f[0], trojaned, trigger, float(f[7]), rate)


@dataclass
class ZooManifest:
    entries: list[ZooEntry]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(e.trojaned) for e in self.entries])

    def dumps(self) -> str:
        return "".join(e.to_line() + "\n" for e in self.entries)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ZooManifest":
        lines = Path(path).read_text().splitlines()
        return cls([ZooEntry.from_line(l) for l in lines if l.strip() and not l.startswith("#")])


MANIFEST = "manifest.tsv"
ZOO_CONFIG = "zoo.json"


def random_trigger(rng: np.random.Generator, cfg: ZooConfig) -> TriggerSpec:
    C, H, W = cfg.shape
    target = int(rng.integers(cfg.num_classes))
    color = rng.uniform(0.0, 1.0, C)
    # a patch darker than the background would be nearly invisible
    if color.max() < 0.6:
        color[int(rng.integers(C))] = rng.uniform(0.6, 1.0)
    color = tuple(float(c) for c in color)
    if cfg.trigger_kind == "color-filter":
        return TriggerSpec("color-filter", -1, -1, 0, color, target)
    lo, hi = cfg.side_range
    side = int(rng.integers(lo, hi + 1))
    row = int(rng.integers(0, H - side + 1))
    col = int(rng.integers(0, W - side + 1))
    return TriggerSpec("square", row, col, side, color, target)


def _data_for(cfg: ZooConfig, seed: int) -> tuple[Dataset, Dataset]:
    if cfg.idx_images:
        full = load_idx_dataset(cfg.idx_images, cfg.idx_labels, cfg.num_classes)
        rng = np.random.default_rng(seed)
        take = rng.permutation(len(full))
        n_train = cfg.n_per_class * cfg.num_classes
        n_val = cfg.n_val_per_class * cfg.num_classes
        tr, va = take[:n_train], take[n_train : n_train + n_val]
        return (Dataset(full.images[tr], full.labels[tr], full.num_classes),
                Dataset(full.images[va], full.labels[va], full.num_classes))
    train_seed, val_seed = np.random.SeedSequence(seed).generate_state(2)
    return (gen_dataset(int(train_seed), cfg.num_classes, cfg.n_per_class, cfg.shape),
            gen_dataset(int(val_seed), cfg.num_classes, cfg.n_val_per_class, cfg.shape))


def _train_one(cfg: ZooConfig, seed_seq: np.random.SeedSequence, trojaned: bool, trigger=None):
    s_data, s_trig, s_poison, s_init = (int(s) for s in seed_seq.generate_state(4))
    train, val = _data_for(cfg, s_data)
    if trojaned:
        if trigger is None:
            trigger = random_trigger(np.random.default_rng(s_trig), cfg)
        train = poison_dataset(train, cfg.poison_rate, trigger, seed=s_poison)
    return train_classifier(
        train, epochs=cfg.epochs, seed=s_init, lr=cfg.lr, batch_size=cfg.batch_size,
        val=val, trigger=trigger if trojaned else None,
    ), trigger


def _zoo_task(args):
    cfg, i, seq, trojaned, reference_acc, fixed_trigger = args
    attempts = [seq] + seq.spawn(cfg.max_retries)
    result = trigger = None
    for attempt, s in enumerate(attempts):
        result, trigger = _train_one(cfg, s, trojaned, fixed_trigger)
        if not trojaned:
            return i, result, None, False
        floor = reference_acc - cfg.max_accuracy_gap if reference_acc is not None else 0.90
        if result.attack_rate >= cfg.min_attack_rate and result.accuracy >= floor:
            return i, result, trigger, False
        log.info("model %d attempt %d rejected (acc %.3f, asr %.3f)", i, attempt, result.accuracy, result.attack_rate)
    return i, result, trigger, True


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def build_zoo(cfg: ZooConfig, out_dir, workers: int = 1, fixed_trigger: Optional[TriggerSpec] = None) -> ZooManifest:
    """Train and save ``cfg.count`` models; writes models/, manifest.tsv and zoo.json.

    Clean models are trained first; Trojaned model ``j`` is checked against
    clean model ``j mod n_clean``. ``fixed_trigger`` overrides the random
    trigger draw (row/col are still taken from it verbatim).
    """
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    master = np.random.SeedSequence(cfg.seed)
    layout_seq, *model_seqs = master.spawn(cfg.count + 1)
    is_trojan = np.zeros(cfg.count, dtype=bool)
    is_trojan[np.random.default_rng(layout_seq).permutation(cfg.count)[: cfg.n_trojaned]] = True

    clean_idx = [i for i in range(cfg.count) if not is_trojan[i]]
    troj_idx = [i for i in range(cfg.count) if is_trojan[i]]
    results: dict[int, tuple] = {}
    for i, res, trig, flagged in _map(_zoo_task, [(cfg, i, model_seqs[i], False, None, None) for i in clean_idx], workers):
        results[i] = (res, None, flagged)
    clean_accs = [results[i][0].accuracy for i in clean_idx]
    tasks = [
        (cfg, i, model_seqs[i], True, clean_accs[j % len(clean_accs)] if clean_accs else None, fixed_trigger)
        for j, i in enumerate(troj_idx)
    ]
    for i, res, trig, flagged in _map(_zoo_task, tasks, workers):
        if flagged:
            log.warning("model %d kept after %d retries: acc %.3f asr %.3f", i, cfg.max_retries, res.accuracy, res.attack_rate)
        results[i] = (res, trig, flagged)

    entries = []
    for i in range(cfg.count):
        res, trig, flagged = results[i]
        rel = f"models/model_{i:04d}.nnm"
        save_model(res.model, out / rel)
        entries.append(ZooEntry(rel, bool(is_trojan[i]), trig, res.accuracy, res.attack_rate, flagged))
    manifest = ZooManifest(entries)
    manifest.save(out / MANIFEST)
    (out / ZOO_CONFIG).write_text(cfg.to_json() + "\n")
    return manifest


def load_zoo(zoo_dir) -> tuple[ZooConfig, ZooManifest]:
    zoo_dir = Path(zoo_dir)
    if not (zoo_dir / MANIFEST).is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {zoo_dir}")
    cfg = ZooConfig.from_json((zoo_dir / ZOO_CONFIG).read_text())
    return cfg, ZooManifest.load(zoo_dir / MANIFEST)


def probe_images(model: ModelArtifact, num_classes: int, seed: int, pool: int = 8) -> np.ndarray:
    """One fresh clean image per class, preferring ones the model classifies correctly."""
    data = gen_dataset(seed, num_classes, pool, model.input_shape)
    preds = model.predict(data.images)
    chosen = []
    for k in range(num_classes):
        idx = np.flatnonzero(data.labels == k)
        good = idx[preds[idx] == k]
        chosen.append(good[0] if len(good) else idx[0])
    return data.images[chosen]
