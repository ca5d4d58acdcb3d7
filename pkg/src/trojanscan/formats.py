"""Binary Netpbm (P5/P6) and MNIST IDX readers/writers."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


def _to_samples(values: np.ndarray, maxval: int) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    q = np.rint(v * maxval)
    return q.astype(">u2" if maxval > 255 else "u1")


def write_pnm(path, values, maxval: int = 65535, comments=()) -> None:
    """Write ``[H,W]`` as P5 or ``[H,W,3]`` as P6; values in [0,1] scaled by ``maxval``."""
    v = np.asarray(values)
    if v.ndim == 2:
        magic = b"P5"
    elif v.ndim == 3 and v.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot store array of shape {v.shape} as PGM/PPM")
    H, W = v.shape[:2]
    header = [magic]
    header += [b"# " + c.encode("ascii") for c in comments]
    header += [f"{W} {H}".encode(), str(maxval).encode()]
    with open(path, "wb") as f:
        f.write(b"\n".join(header) + b"\n")
        f.write(_to_samples(v, maxval).tobytes())


def write_pgm(path, grid, maxval: int = 65535, comments=()) -> None:
    write_pnm(path, np.asarray(grid), maxval, comments)


def write_ppm(path, image_hwc, maxval: int = 65535, comments=()) -> None:
    write_pnm(path, np.asarray(image_hwc), maxval, comments)


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int, list[str]]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, comments = [], []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise FormatError("truncated header")
        c = data[i : i + 1]
        if c == b"#":
            j = data.find(b"\n", i)
            j = len(data) if j < 0 else j
            comments.append(data[i + 1 : j].decode("ascii", "replace").strip())
            i = j + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    # exactly one whitespace byte separates header from raster
    return tokens, i + 1, comments


def read_pnm(path) -> tuple[np.ndarray, int, list[str]]:
    """Read P5/P6 into floats in [0,1]: ``[H,W]`` or ``[H,W,3]``.

    Returns ``(values, maxval, comments)``.
    """
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    (w, h, mx), start, comments = _tokens(data[2:], 3)
    W, H, maxval = int(w), int(h), int(mx)
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    n = W * H * channels
    raster = data[2 + start :]
    if len(raster) < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=dtype, count=n).astype(np.float64) / maxval
    shape = (H, W) if channels == 1 else (H, W, 3)
    return arr.reshape(shape), maxval, comments


def _read_idx(path, magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{path}: IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    body = data[4 + 4 * ndim :]
    n = int(np.prod(dims))
    if len(body) < n:
        raise FormatError(f"{path}: expected {n} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """IDX image file as float64 ``[N,H,W]`` scaled to [0,1]."""
    return _read_idx(path, IDX_IMAGES_MAGIC).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC).astype(np.int64)


def write_idx_images(path, images) -> None:
    q = np.rint(np.clip(np.asarray(images, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *q.shape))
        f.write(q.tobytes())


def write_idx_labels(path, labels) -> None:
    q = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", q.shape[0]))
        f.write(q.tobytes())
