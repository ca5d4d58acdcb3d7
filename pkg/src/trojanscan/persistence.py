"""0-dimensional persistent homology of superlevel sets on 2-D grids.

Grids are plain 2-D float arrays. Pixels are swept from the highest value
down (ties by ascending row-major index) and merged with already-swept
4-neighbours through a union-find; at every merge the younger component
(the one whose maximum was swept later) dies at the merging pixel.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numba
import numpy as np

from .tensor import Tensor, as_tensor, record

ESSENTIAL = -1


@dataclass(frozen=True)
class PersistentDot:
    birth: float
    death: float
    birth_pixel: int
    death_pixel: int  # ESSENTIAL for the component that never merges

    @property
    def persistence(self) -> float:
        return self.birth - self.death

    @property
    def essential(self) -> bool:
        return self.death_pixel == ESSENTIAL


@dataclass(frozen=True)
class PersistenceDiagram:
    dots: tuple[PersistentDot, ...]
    star_index: int

    def __len__(self) -> int:
        return len(self.dots)

    @property
    def star(self) -> PersistentDot:
        return self.dots[self.star_index]

    def pairs(self) -> list[tuple[float, float]]:
        return sorted((d.birth, d.death) for d in self.dots)


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _sweep(order, height, width):
    n = height * width
    parent = np.full(n, -1, np.int64)
    rank = np.empty(n, np.int64)  # sweep position of a component's maximum
    born = np.empty(n, np.int64)  # birth pixel, stored at the root
    birth_pix = np.empty(n, np.int64)
    death_pix = np.empty(n, np.int64)
    ndots = 0
    for r in range(n):
        p = order[r]
        parent[p] = p
        rank[p] = r
        born[p] = p
        row = p // width
        col = p - row * width
        for k in range(4):
            if k == 0:
                if row == 0:
                    continue
                q = p - width
            elif k == 1:
                if col == 0:
                    continue
                q = p - 1
            elif k == 2:
                if col == width - 1:
                    continue
                q = p + 1
            else:
                if row == height - 1:
                    continue
                q = p + width
            if parent[q] < 0:
                continue
            a = _find(parent, p)
            b = _find(parent, q)
            if a == b:
                continue
            if rank[a] < rank[b]:
                old, young = a, b
            else:
                old, young = b, a
            # p's own singleton merging in is not a topological event
            if born[young] != p:
                birth_pix[ndots] = born[young]
                death_pix[ndots] = p
                ndots += 1
            parent[young] = old
    root = _find(parent, order[0])
    birth_pix[ndots] = born[root]
    death_pix[ndots] = -1
    ndots += 1
    return birth_pix[:ndots].copy(), death_pix[:ndots].copy()


def sweep_order(values: np.ndarray) -> np.ndarray:
    """Pixel indices by decreasing value, ties by ascending index."""
    return np.argsort(-values.ravel(), kind="stable")


def critical_pixels(grid) -> tuple[np.ndarray, np.ndarray]:
    """Birth and death pixel arrays of the diagram (death -1 = essential)."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise ValueError(f"expected a non-empty 2-D grid, got shape {g.shape}")
    return _sweep(sweep_order(g), g.shape[0], g.shape[1])


def superlevel_diagram(grid) -> PersistenceDiagram:
    g = np.asarray(grid, dtype=np.float64)
    bp, dp = critical_pixels(g)
    flat = g.ravel()
    lowest = float(flat.min())
    dots = tuple(
        PersistentDot(
            birth=float(flat[b]),
            death=float(flat[d]) if d >= 0 else lowest,
            birth_pixel=int(b),
            death_pixel=int(d),
        )
        for b, d in zip(bp, dp)
    )
    return PersistenceDiagram(dots=dots, star_index=_star(dots))


def _star(dots) -> int:
    best = 0
    for i, d in enumerate(dots):
        top = dots[best]
        if d.persistence > top.persistence or (
            d.persistence == top.persistence and d.birth_pixel < top.birth_pixel
        ):
            best = i
    return best


def topo_loss(grid) -> tuple[float, np.ndarray]:
    """Squared persistence of every dot except the most persistent one.

    Returns ``(value, gradient)``; the gradient lives only on the critical
    pixels: ``+2(b-d)`` at each birth pixel and ``-2(b-d)`` at each death
    pixel, accumulated when pixels are shared.
    """
    g = np.asarray(grid, dtype=np.float64)
    bp, dp = critical_pixels(g)
    flat = g.ravel()
    births = flat[bp]
    deaths = np.where(dp >= 0, flat[dp], flat.min())
    pers = births - deaths
    top = np.flatnonzero(pers == pers.max())
    star = top[np.argmin(bp[top])]
    keep = np.arange(len(bp)) != star
    pers, bp, dp = pers[keep], bp[keep], dp[keep]
    grad = np.zeros(g.size)
    np.add.at(grad, bp, 2.0 * pers)
    mortal = dp >= 0
    np.add.at(grad, dp[mortal], -2.0 * pers[mortal])
    return float(np.dot(pers, pers)), grad.reshape(g.shape)


def topo_loss_op(masks) -> Tensor:
    """Differentiable topological loss: scalar for ``[H,W]``, ``[B]`` for a ``[B,H,W]`` stack."""
    masks = as_tensor(masks)
    stack = masks.data if masks.ndim == 3 else masks.data[None]
    values = np.empty(len(stack))
    grads = np.empty_like(stack)
    for i, m in enumerate(stack):
        values[i], grads[i] = topo_loss(m)
    if masks.ndim == 2:
        return record(np.array(values[0]), (masks,), lambda g: (g * grads[0],))
    return record(values, (masks,), lambda g: (g[:, None, None] * grads,))


def count_components(binary) -> tuple[int, list[int]]:
    """Count 4-connected foreground components of a 0/1 grid by flood fill.

    Sizes are listed in order of each component's first row-major pixel.
    """
    fg = np.asarray(binary) > 0
    if fg.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {fg.shape}")
    H, W = fg.shape
    seen = np.zeros_like(fg)
    sizes = []
    for start in zip(*np.nonzero(fg)):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        size = 0
        while queue:
            r, c = queue.popleft()
            size += 1
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < H and 0 <= cc < W and fg[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
        sizes.append(size)
    return len(sizes), sizes


def format_diagram(diagram: PersistenceDiagram) -> str:
    """Tab-separated ``birth death birth_pixel death_pixel`` lines (-1 = essential)."""
    return "".join(
        f"{d.birth!r}\t{d.death!r}\t{d.birth_pixel}\t{d.death_pixel}\n" for d in diagram.dots
    )


def parse_diagram(text: str) -> PersistenceDiagram:
    dots = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        b, d, bp, dp = line.split("\t")
        dots.append(PersistentDot(float(b), float(d), int(bp), int(dp)))
    if not dots:
        raise ValueError("empty diagram")
    dots = tuple(dots)
    return PersistenceDiagram(dots=dots, star_index=_star(dots))
