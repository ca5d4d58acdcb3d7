"""Differentiable operators over :class:`~trojanscan.tensor.Tensor`.

Layer operators accept either a single sample or a leading batch axis:
``dense`` takes ``[n]`` or ``[B, n]``, ``conv2d`` takes ``[C, H, W]`` or
``[B, C, H, W]``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record, unbroadcast

PROB_FLOOR = 1e-12


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root whose gradient is taken as 0 at 0 (not infinite)."""
    a = as_tensor(a)
    out = np.sqrt(np.maximum(a.data, 0.0))

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _logistic(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def _logistic(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


# -- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Flatten all but the leading (batch) axis; 3-d input is one sample."""
    a = as_tensor(a)
    if a.ndim <= 3:
        return reshape(a, (-1,))
    return reshape(a, (a.shape[0], -1))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return record(a.data[idx], (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, b.data) if b.ndim == 1 and a.ndim == 2 else g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                gb = unbroadcast(gb, b.shape)
        return ga, gb

    return record(a.data @ b.data, (a, b), backward)


def norm(a) -> Tensor:
    """Euclidean norm of all entries; gradient 0 at the origin."""
    return sqrt(sum(square(a)))


# -- layers ------------------------------------------------------------------

def dense(x, weights, bias) -> Tensor:
    """``out[i] = sum_j weights[i, j] * x[j] + bias[i]``."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense weights {weights.shape} / bias {bias.shape} mismatch")
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight columns {weights.shape[1]}")
    w = weights.data
    out = x.data @ w.T + bias.data

    def backward(g):
        gx = g @ w if x.requires_grad else None
        gw = gb = None
        if weights.requires_grad:
            gw = np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        if bias.requires_grad:
            gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return record(out, (x, weights, bias), backward)


def conv2d(x, kernels, bias, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``[B,]C,H,W`` input with ``F,C,k,k`` kernels."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [B,]C,H,W input and F,C,k,k kernels; got {x.shape}, {kernels.shape}")
    B, C, H, W = xd.shape
    F, Ck, k, k2 = kernels.shape
    if Ck != C or k != k2:
        raise ShapeError(f"kernel shape {kernels.shape} does not match {C} input channels")
    if k > H or k > W:
        raise ShapeError(f"kernel size {k} larger than input {H}x{W}")
    if bias.shape != (F,):
        raise ShapeError(f"bias shape {bias.shape} != ({F},)")
    s = int(stride)
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1

    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = kernels.data.reshape(F, -1)
    out = (cols @ wmat.T + bias.data).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, F)
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = (g2.T @ cols).reshape(kernels.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, k, k)
            gx = np.zeros_like(xd)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if single:
                gx = gx[0]
        return gx, gk, gb

    return record(np.ascontiguousarray(out), (x, kernels, bias), backward)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes (odd edges dropped)."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"maxpool2x2 needs spatial size >= 2, got {x.shape}")
    *lead, H, W = x.shape
    H2, W2 = H // 2, W // 2
    blocks = x.data[..., : 2 * H2, : 2 * W2].reshape(*lead, H2, 2, W2, 2)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(*lead, H2, W2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        inv = gf.reshape(*lead, H2, W2, 2, 2).transpose(perm).reshape(*lead, 2 * H2, 2 * W2)
        full = np.zeros(x.shape)
        full[..., : 2 * H2, : 2 * W2] = inv
        return (full,)

    return record(out, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def cross_entropy(probs, labels) -> Tensor:
    """Mean of ``-log(probs[label])`` with probabilities floored at 1e-12.

    ``probs`` is ``[K]`` with an int label, or ``[B, K]`` with ``B`` labels.
    """
    probs = as_tensor(probs)
    p = probs.data
    single = p.ndim == 1
    p2 = p[None] if single else p
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    K = p2.shape[1]
    if lab.shape[0] != p2.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {p2.shape[0]} rows")
    if np.any(lab < 0) or np.any(lab >= K):
        raise IndexError(f"label out of range for {K} classes: {lab}")
    rows = np.arange(p2.shape[0])
    picked = p2[rows, lab]
    clamped = np.maximum(picked, PROB_FLOOR)
    n = p2.shape[0]

    def backward(g):
        grad = np.zeros_like(p2)
        grad[rows, lab] = np.where(picked > PROB_FLOOR, -1.0 / clamped, 0.0) * (g / n)
        return (grad[0] if single else grad,)

    return record(np.array(-np.log(clamped).mean()), (probs,), backward)


def binary_cross_entropy(scores, targets) -> Tensor:
    """Mean BCE of probabilities ``scores`` against 0/1 ``targets`` (floored)."""
    scores = as_tensor(scores)
    s = scores.data
    y = np.asarray(targets, dtype=np.float64).reshape(s.shape)
    sp = np.maximum(s, PROB_FLOOR)
    sn = np.maximum(1.0 - s, PROB_FLOOR)
    value = -(y * np.log(sp) + (1 - y) * np.log(sn)).mean()

    def backward(g):
        dp = np.where(s > PROB_FLOOR, -y / sp, 0.0)
        dn = np.where(1.0 - s > PROB_FLOOR, (1 - y) / sn, 0.0)
        return ((dp + dn) * (g / s.size),)

    return record(np.array(value), (scores,), backward)
