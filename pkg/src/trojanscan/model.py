"""Small sequential image classifiers and the NNM1 container format.

An NNM1 file is an ASCII header followed by raw little-endian float64
weights::

    NNM1 seed=7 input=3x28x28
    conv2d 8 3 3 1
    relu
    maxpool2x2
    conv2d 16 8 3 1
    relu
    maxpool2x2
    flatten
    dense 5 400
    softmax
    <blank line>
    <kernels/weights then bias, per layer, in layer order>

``conv2d`` takes ``filters in_channels kernel stride``; ``dense`` takes
``out in``. Only these layer kinds are accepted.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .tensor import Tensor

LAYER_ARITY = {"conv2d": 4, "dense": 2, "relu": 0, "maxpool2x2": 0, "flatten": 0, "softmax": 0}
MAGIC = "NNM1"


class ModelFormatError(ValueError):
    """Malformed, truncated or unsupported model container."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_ARITY:
            raise ModelFormatError(f"unknown layer kind {self.kind!r}")
        if len(self.params) != LAYER_ARITY[self.kind]:
            raise ModelFormatError(
                f"layer {self.kind} takes {LAYER_ARITY[self.kind]} parameters, got {len(self.params)}"
            )

    def weight_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "conv2d":
            f, c, k, _ = self.params
            return [(f, c, k, k), (f,)]
        if self.kind == "dense":
            out, inp = self.params
            return [(out, inp), (out,)]
        return []

    def to_line(self) -> str:
        return " ".join([self.kind, *map(str, self.params)])


def default_architecture(channels: int, height: int, width: int, classes: int) -> list[LayerSpec]:
    """conv(8,3x3)-relu-pool-conv(16,3x3)-relu-pool-flatten-dense(K)-softmax."""
    h, w = ((height - 2) // 2 - 2) // 2, ((width - 2) // 2 - 2) // 2
    return [
        LayerSpec("conv2d", (8, channels, 3, 1)),
        LayerSpec("relu"),
        LayerSpec("maxpool2x2"),
        LayerSpec("conv2d", (16, 8, 3, 1)),
        LayerSpec("relu"),
        LayerSpec("maxpool2x2"),
        LayerSpec("flatten"),
        LayerSpec("dense", (classes, 16 * h * w)),
        LayerSpec("softmax"),
    ]


def output_shape(layers, input_shape) -> tuple[int, ...]:
    """Propagate ``(C,H,W)`` through ``layers``; raises ModelFormatError on mismatch."""
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if layer.kind == "conv2d":
            f, c, k, s = layer.params
            if len(shape) != 3 or shape[0] != c or k > shape[1] or k > shape[2] or s < 1:
                raise ModelFormatError(f"layer {i} conv2d{layer.params} cannot take input {shape}")
            shape = (f, (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
        elif layer.kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ModelFormatError(f"layer {i} maxpool2x2 cannot take input {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            out, inp = layer.params
            if shape != (inp,):
                raise ModelFormatError(f"layer {i} dense{layer.params} cannot take input {shape}")
            shape = (out,)
    return shape


@dataclass
class ModelArtifact:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    input_shape: tuple[int, int, int]
    seed: int = 0
    _frozen: list[Tensor] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shapes = [s for layer in self.layers for s in layer.weight_shapes()]
        if len(shapes) != len(self.weights):
            raise ModelFormatError(f"{len(self.weights)} weight arrays for {len(shapes)} expected")
        self.weights = [np.asarray(w, dtype=np.float64).reshape(s) for w, s in zip(self.weights, shapes)]
        for w in self.weights:
            w.setflags(write=False)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        output_shape(self.layers, self.input_shape)

    @property
    def num_classes(self) -> int:
        return output_shape(self.layers, self.input_shape)[0]

    def frozen_params(self) -> list[Tensor]:
        if self._frozen is None:
            self._frozen = [Tensor(w) for w in self.weights]
        return self._frozen

    def __call__(self, x) -> Tensor:
        """Class probabilities for one image or a batch, weights frozen."""
        return forward(self.layers, self.frozen_params(), x)

    def predict_proba(self, images, batch_size: int = 500) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return np.concatenate(
            [self(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        )

    def predict(self, images) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=-1)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.weights:
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        return h.hexdigest()


def forward(layers, params, x) -> Tensor:
    """Run ``x`` through ``layers`` using the flat ``params`` tensor list."""
    it = iter(params)
    for layer in layers:
        if layer.kind == "conv2d":
            x = ops.conv2d(x, next(it), next(it), stride=layer.params[3])
        elif layer.kind == "dense":
            x = ops.dense(x, next(it), next(it))
        elif layer.kind == "relu":
            x = ops.relu(x)
        elif layer.kind == "maxpool2x2":
            x = ops.maxpool2x2(x)
        elif layer.kind == "flatten":
            x = ops.flatten(x)
        elif layer.kind == "softmax":
            x = ops.softmax(x)
    return x


def init_weights(layers, rng: np.random.Generator) -> list[np.ndarray]:
    """He-normal kernels/weights, zero biases."""
    out = []
    for layer in layers:
        if layer.kind == "conv2d":
            f, c, k, _ = layer.params
            out.append(rng.normal(0.0, np.sqrt(2.0 / (c * k * k)), size=(f, c, k, k)))
            out.append(np.zeros(f))
        elif layer.kind == "dense":
            o, i = layer.params
            out.append(rng.normal(0.0, np.sqrt(2.0 / i), size=(o, i)))
            out.append(np.zeros(o))
    return out


def save_model(model: ModelArtifact, path) -> None:
    c, h, w = model.input_shape
    lines = [f"{MAGIC} seed={model.seed} input={c}x{h}x{w}"]
    lines += [layer.to_line() for layer in model.layers]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in model.weights)
    Path(path).write_bytes(("\n".join(lines) + "\n\n").encode("ascii") + blob)


def load_model(path) -> ModelArtifact:
    data = Path(path).read_bytes()
    sep = data.find(b"\n\n")
    if sep < 0:
        raise ModelFormatError(f"{path}: malformed header (no blank line)")
    try:
        header = data[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise ModelFormatError(f"{path}: malformed header (not ASCII)") from None
    first = header[0].split()
    if not first or first[0] != MAGIC:
        raise ModelFormatError(f"{path}: malformed header (missing {MAGIC} magic)")
    meta = dict(tok.split("=", 1) for tok in first[1:] if "=" in tok)
    try:
        seed = int(meta.get("seed", 0))
        input_shape = tuple(int(v) for v in meta["input"].split("x"))
        if len(input_shape) != 3:
            raise ValueError
    except (KeyError, ValueError):
        raise ModelFormatError(f"{path}: malformed header (bad seed/input fields)") from None

    layers = []
    for n, line in enumerate(header[1:], start=2):
        parts = line.split()
        if not parts:
            raise ModelFormatError(f"{path}: malformed header (empty line {n})")
        if parts[0] not in LAYER_ARITY:
            raise ModelFormatError(f"{path}: unknown layer kind {parts[0]!r} on line {n}")
        try:
            layers.append(LayerSpec(parts[0], tuple(int(p) for p in parts[1:])))
        except ValueError:
            raise ModelFormatError(f"{path}: malformed layer line {n}: {line!r}") from None

    shapes = [s for layer in layers for s in layer.weight_shapes()]
    sizes = [int(np.prod(s)) for s in shapes]
    blob = data[sep + 2 :]
    need = 8 * sum(sizes)
    if len(blob) < need:
        raise ModelFormatError(f"{path}: truncated weights ({len(blob)} of {need} bytes)")
    if len(blob) > need:
        raise ModelFormatError(f"{path}: {len(blob) - need} trailing bytes after weights")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    weights, pos = [], 0
    for s, n in zip(shapes, sizes):
        weights.append(flat[pos : pos + n].reshape(s))
        pos += n
    return ModelArtifact(layers=layers, weights=weights, input_shape=input_shape, seed=seed)
