import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trojanscan.features import (
    FILTER_COLUMNS,
    LOCAL_COLUMNS,
    FeatureBag,
    build_bag,
    dump_bags,
    extract_features,
    local_features,
    parse_bags,
    spatial_moments,
)
from trojanscan.filters import FilterCandidate, identity_filter
from trojanscan.triggers import TriggerCandidate


def cand(mask, k=0, r=0, flip=0.3, div=-0.2):
    mask = np.asarray(mask, dtype=float)
    return TriggerCandidate(mask, np.zeros((3,) + mask.shape), 0, 1, flip, div, 0.0, 0.0, 0.0, k, r)


def fcand(k=0, r=0, seed=0):
    p = identity_filter(np.random.default_rng(seed), noise=0.1)
    d = np.random.default_rng(seed).uniform(0, 1, 48)
    return FilterCandidate(p, d, 0, 1, 0.4, -0.1, 1.0, 0.5, k, r)


def test_column_layout():
    assert len(LOCAL_COLUMNS) == 11 and len(FILTER_COLUMNS) == 50


def test_all_zero_mask_convention():
    f = extract_features(cand(np.zeros((28, 28)), flip=0.7, div=0.0))
    np.testing.assert_array_equal(f, [0.7] + [0.0] * 10)


def test_foreground_fraction_counts_pixels():
    m = np.zeros((28, 28))
    m.flat[[3, 50, 51, 100, 200, 300, 400, 500, 600, 700]] = 1.0
    assert extract_features(cand(m))[2] == pytest.approx(10 / 784)


def test_component_statistics_line_example():
    f = local_features(np.array([[1.0, 0, 1.0, 0, 0]]), 0.1, 0.0)
    assert f[LOCAL_COLUMNS.index("n_components")] == 2
    assert f[LOCAL_COLUMNS.index("comp_size_mean")] == 1
    assert f[LOCAL_COLUMNS.index("comp_size_std")] == 0


def test_spatial_moments_point_and_axis():
    m = np.zeros((5, 9))
    m[4, 2] = 1.0
    assert spatial_moments(m) == pytest.approx((0.25, 0.0, 1.0, 0.0))


def test_topo_feature_matches_persistence():
    m = np.array([[0.9, 0.1, 0.8, 0.2, 0.0]])
    assert local_features(m, 0, 0)[LOCAL_COLUMNS.index("L_topo")] == pytest.approx(0.49)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
    st.integers(0, 6),
    st.integers(0, 5),
)
def test_translation_moves_means_not_spreads(patch, dy, dx):
    base = np.zeros((10, 10))
    base[:3, :4] = patch
    moved = np.zeros((10, 10))
    moved[dy : dy + 3, dx : dx + 4] = patch
    a, b = local_features(base, 0, 0), local_features(moved, 0, 0)
    for name in ("fg_fraction", "std_x", "std_y", "n_components", "comp_size_mean", "comp_size_std", "L_topo"):
        i = LOCAL_COLUMNS.index(name)
        assert b[i] == pytest.approx(a[i], abs=1e-9)
    if patch.sum() > 0:
        i = LOCAL_COLUMNS.index("mean_x")
        assert b[i] == pytest.approx(a[i] + dx / 9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3))
def test_equal_components_have_zero_size_std(n, side):
    m = np.zeros((5, 20))
    for k in range(n):
        m[:side, 5 * k : 5 * k + side] = 1.0
    f = local_features(m, 0, 0)
    assert f[LOCAL_COLUMNS.index("n_components")] == n
    assert f[LOCAL_COLUMNS.index("comp_size_std")] == 0


def test_filter_features():
    c = fcand()
    f = extract_features(c)
    assert f.shape == (50,)
    np.testing.assert_array_equal(f[:48], c.descriptor)
    assert tuple(f[48:]) == (0.4, -0.1)
    with pytest.raises(TypeError):
        extract_features("nope")


def test_build_bag_counts():
    rng = np.random.default_rng(0)
    local = [cand(rng.uniform(0, 1, (6, 6)), k, r) for k in range(5) for r in range(3)]
    bag = build_bag("m", local, num_classes=5, n_rounds=3)
    assert bag.local.shape == (15, 11) and bag.filter.shape == (0, 50)
    assert bag.local_index.tolist() == [[k, r] for k in range(5) for r in range(3)]
    filters = [fcand(k, r, 8 * k + r) for k in range(5) for r in range(8)]
    assert build_bag("m", local, filters, 5, 3, 8).filter.shape == (40, 50)
    with pytest.raises(ValueError):
        build_bag("m", local[:-1], num_classes=5, n_rounds=3)
    with pytest.raises(ValueError):
        build_bag("m", local, filters[:-1], 5, 3, 8)


def test_bag_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureBag("m", np.full((1, 11), np.nan), [(0, 0)])


def test_dump_round_trip_is_bit_exact():
    rng = np.random.default_rng(1)
    bags = []
    for i in range(3):
        local = [cand(rng.uniform(0, 1, (6, 6)), k, r, rng.uniform(), -rng.uniform())
                 for k in range(2) for r in range(2)]
        filters = [fcand(k, r, 10 * i + 2 * k + r) for k in range(2) for r in range(2)] if i != 1 else []
        bags.append(build_bag(f"model_{i}", local, filters))
    text = dump_bags(bags)
    assert text.splitlines()[0].split("\t")[:4] == ["model", "class", "round", "L_flip"]
    back = parse_bags(text)
    assert back == bags
    assert dump_bags(back) == text


def test_parse_rejects_ragged_lines():
    with pytest.raises(ValueError):
        parse_bags("model\tclass\tround\t" + "\t".join(LOCAL_COLUMNS) + "\nm\t0\t0\t1.0\n")
