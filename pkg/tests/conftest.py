import numpy as np
import pytest
from scipy import ndimage

from trojanscan.model import ModelArtifact, default_architecture, init_weights
from trojanscan.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``.

    ``coords`` restricts the differences to those multi-indices (others stay 0).
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in (np.ndindex(x.shape) if coords is None else coords):
        old = x[i]
        x[i] = old + h
        up = f(x.copy())
        x[i] = old - h
        down = f(x.copy())
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def tape_grad(f, *arrays):
    """Gradients of the scalar ``f(*tensors)`` w.r.t. every array, via the tape."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*ts)
    grads = tape.backward(out)
    return [grads.get(t, np.zeros(t.shape)) for t in ts]


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def oracle_diagram(grid: np.ndarray) -> list[tuple[float, float]]:
    """(birth, death) multiset of the superlevel filtration by brute force.

    Thresholds the grid at every distinct value, labels 4-connected
    components with scipy, and tracks each component by its highest pixel.
    When components merge, every one but the oldest (highest peak) dies at
    the current level. The surviving component dies at the global minimum.
    """
    g = np.asarray(grid, dtype=np.float64)
    levels = np.unique(g)[::-1]
    alive = {}  # peak pixel -> birth value
    dots = []
    for t in levels:
        labels, n = ndimage.label(g >= t)
        peaks_by_comp = {}
        for peak, birth in alive.items():
            comp = labels.flat[peak]
            peaks_by_comp.setdefault(comp, []).append(peak)
        for comp, peaks in peaks_by_comp.items():
            if len(peaks) > 1:
                peaks.sort(key=lambda p: (-g.flat[p], p))
                for p in peaks[1:]:
                    dots.append((alive.pop(p), float(t)))
        covered = set(labels.flat[p] for p in alive)
        for comp in range(1, n + 1):
            if comp not in covered:
                pix = np.flatnonzero(labels.ravel() == comp)
                peak = int(pix[np.argmax(g.flat[pix])])
                alive[peak] = float(g.flat[peak])
    for birth in alive.values():
        dots.append((birth, float(g.min())))
    return sorted(dots)


@pytest.fixture(scope="session")
def tiny_model():
    """An untrained 3x12x12 classifier with 4 classes (fast forward passes)."""
    layers = default_architecture(3, 12, 12, 4)
    w = init_weights(layers, np.random.default_rng(0))
    return ModelArtifact(layers, w, (3, 12, 12), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
