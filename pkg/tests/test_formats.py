import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trojanscan.formats import (
    FormatError,
    read_idx_images,
    read_idx_labels,
    read_pnm,
    write_idx_images,
    write_idx_labels,
    write_pgm,
    write_ppm,
)

unit = st.floats(0, 1, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=unit))
def test_pgm_round_trip_is_sample_exact(tmp_path_factory, grid):
    path = tmp_path_factory.mktemp("pgm") / "g.pgm"
    write_pgm(path, grid, comments=["hello"])
    back, maxval, comments = read_pnm(path)
    assert maxval == 65535 and comments == ["hello"]
    np.testing.assert_array_equal(back, np.rint(grid * 65535) / 65535)


def test_pgm_header_and_big_endian_samples(tmp_path):
    path = tmp_path / "a.pgm"
    write_pgm(path, np.array([[0.0, 1.0]]))
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 1\n65535\n")
    assert data.endswith(b"\x00\x00\xff\xff")


def test_ppm_round_trip_8bit(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (4, 5, 3)) / 255
    write_ppm(tmp_path / "a.ppm", img, maxval=255)
    back, maxval, _ = read_pnm(tmp_path / "a.ppm")
    assert maxval == 255
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_pnm_rejects_bad_input(tmp_path):
    with pytest.raises(FormatError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
    (tmp_path / "bad").write_bytes(b"P3\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pnm(tmp_path / "bad")
    (tmp_path / "short").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError, match="truncated"):
        read_pnm(tmp_path / "short")


def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(1).integers(0, 256, (3, 4, 5)) / 255
    write_idx_images(tmp_path / "i.idx", imgs)
    write_idx_labels(tmp_path / "l.idx", [0, 7, 2])
    np.testing.assert_allclose(read_idx_images(tmp_path / "i.idx"), imgs, atol=1e-12)
    np.testing.assert_array_equal(read_idx_labels(tmp_path / "l.idx"), [0, 7, 2])


def test_idx_hand_built_file(tmp_path):
    raw = struct.pack(">I3I", 0x803, 1, 2, 2) + bytes([0, 255, 51, 102])
    (tmp_path / "h.idx").write_bytes(raw)
    np.testing.assert_allclose(read_idx_images(tmp_path / "h.idx"), [[[0, 1], [0.2, 0.4]]])


def test_idx_wrong_magic_and_truncation(tmp_path):
    write_idx_labels(tmp_path / "l.idx", [1, 2])
    with pytest.raises(FormatError, match="magic"):
        read_idx_images(tmp_path / "l.idx")
    (tmp_path / "t.idx").write_bytes(struct.pack(">II", 0x801, 5) + b"\x01")
    with pytest.raises(FormatError):
        read_idx_labels(tmp_path / "t.idx")
