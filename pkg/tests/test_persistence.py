import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from trojanscan.persistence import (
    count_components,
    critical_pixels,
    format_diagram,
    parse_diagram,
    superlevel_diagram,
    topo_loss,
    topo_loss_op,
)

from conftest import numeric_grad, oracle_diagram, tape_grad
from gradcases import topo_abs_error

grids = arrays(
    np.float64,
    st.tuples(st.integers(1, 7), st.integers(1, 7)),
    elements=st.integers(0, 1000).map(lambda k: k / 1000),
)


def distinct_grid(rng, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n) / n + rng.uniform(0, 1e-3)).reshape(shape)


def test_line_example():
    g = np.array([[0.9, 0.1, 0.8, 0.2, 0.0]])
    d = superlevel_diagram(g)
    assert d.pairs() == [(0.8, 0.1), (0.9, 0.0)]
    assert d.star.birth_pixel == 0 and d.star.essential
    value, grad = topo_loss(g)
    assert value == pytest.approx(0.49)
    np.testing.assert_allclose(grad, [[0.0, -1.4, 1.4, 0.0, 0.0]])


def test_line_example_gradient_matches_finite_differences():
    g = np.array([[0.9, 0.1, 0.8, 0.2, 0.0]])
    num = numeric_grad(lambda v: topo_loss(v)[0], g, 1e-6)
    np.testing.assert_allclose(topo_loss(g)[1], num, atol=1e-6)


def test_constant_grid_has_one_essential_dot():
    d = superlevel_diagram(np.full((3, 4), 0.3))
    assert len(d) == 1 and d.dots[0].death_pixel == -1
    assert topo_loss(np.full((3, 4), 0.3))[0] == 0.0


def test_five_peaks_give_five_dots():
    g = np.zeros((5, 21))
    for k, h in enumerate([0.9, 0.8, 0.7, 0.6, 0.5]):
        g[2, 2 + 4 * k] = h
    d = superlevel_diagram(g)
    # the flat background only adds zero-persistence dots
    live = [dot for dot in d.dots if dot.persistence > 0]
    assert len(live) == 5
    assert sorted(dot.birth for dot in live) == [0.5, 0.6, 0.7, 0.8, 0.9]


def test_four_connectivity_diagonal_peaks_stay_separate():
    g = np.array([[1.0, 0.0], [0.0, 0.9]])
    assert superlevel_diagram(g).pairs() == [(0.9, 0.0), (1.0, 0.0)]


def test_ties_break_by_index_deterministically():
    g = np.array([[0.5, 0.0, 0.5]])
    bp, dp = critical_pixels(g)
    assert list(bp) == [2, 0] and list(dp) == [1, -1]
    d = superlevel_diagram(g)
    assert d.star.birth_pixel == 0


def test_matches_oracle_on_random_grids():
    rng = np.random.default_rng(0)
    for _ in range(200):
        shape = tuple(rng.integers(1, 9, 2))
        g = distinct_grid(rng, shape)
        assert superlevel_diagram(g).pairs() == oracle_diagram(g)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    assert max(topo_abs_error(rng) for _ in range(30)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(grids, st.floats(-5, 5, allow_nan=False))
def test_loss_invariant_to_constant_shift(g, c):
    v0, g0 = topo_loss(g)
    v1, g1 = topo_loss(g + c)
    assert v1 == pytest.approx(v0, abs=1e-9)
    np.testing.assert_allclose(g1, g0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(grids)
def test_loss_zero_iff_single_dot_or_flat(g):
    d = superlevel_diagram(g)
    others = [dot.persistence for i, dot in enumerate(d.dots) if i != d.star_index]
    assert (topo_loss(g)[0] == 0.0) == all(p == 0 for p in others)


@settings(max_examples=60, deadline=None)
@given(grids)
def test_dot_count_matches_local_structure(g):
    # one dot per local maximum under the (value desc, index asc) order
    d = superlevel_diagram(g)
    h, w = g.shape
    flat = g.ravel()
    maxima = 0
    for p in range(h * w):
        y, x = divmod(p, w)
        nbrs = [(y + dy) * w + x + dx for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if 0 <= y + dy < h and 0 <= x + dx < w]
        maxima += all((flat[p], -p) > (flat[q], -q) for q in nbrs)
    assert len(d) == maxima
    assert sum(dot.essential for dot in d.dots) == 1
    assert all(dot.birth >= dot.death for dot in d.dots)


def test_topo_loss_op_scalar_and_batch():
    rng = np.random.default_rng(2)
    stack = np.stack([distinct_grid(rng, (4, 4)) for _ in range(3)])
    out = topo_loss_op(stack)
    assert out.shape == (3,)
    np.testing.assert_allclose(out.data, [topo_loss(m)[0] for m in stack])
    (g,) = tape_grad(lambda t: topo_loss_op(t).sum(), stack)
    np.testing.assert_allclose(g, np.stack([topo_loss(m)[1] for m in stack]))
    assert topo_loss_op(stack[0]).shape == ()


def test_rejects_non_2d():
    with pytest.raises(ValueError):
        critical_pixels(np.zeros(4))


def test_count_components_examples():
    assert count_components(np.array([[1, 0, 1, 0, 0]])) == (2, [1, 1])
    assert count_components(np.zeros((3, 3))) == (0, [])
    assert count_components(np.array([[1, 1], [0, 1]])) == (1, [3])


@settings(max_examples=60, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 1)))
def test_count_components_matches_scipy(b):
    labels, n = ndimage.label(b)
    count, sizes = count_components(b)
    assert count == n
    assert sorted(sizes) == sorted(np.bincount(labels.ravel())[1:].tolist())


def test_diagram_text_round_trip():
    rng = np.random.default_rng(3)
    d = superlevel_diagram(distinct_grid(rng, (5, 5)))
    back = parse_diagram(format_diagram(d))
    assert back == d


def test_monotone_square_has_one_dot():
    d = superlevel_diagram(np.array([[4.0, 3.0], [2.0, 1.0]]))
    assert d.pairs() == [(4.0, 1.0)]
    assert topo_loss(np.array([[4.0, 3.0], [2.0, 1.0]]))[0] == 0.0
