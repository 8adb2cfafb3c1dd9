"""File formats: binary PGM images and the XSPT raw tensor container.

XSPT layout: b"XSPT", u16 version, u8 dtype tag (1=f32, 2=f64), u8 rank,
rank x u64 dims, then the row-major payload. Everything little-endian.
"""

import re
import struct

import numpy as np

TENSOR_MAGIC = b"XSPT"
TENSOR_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_FOR = {"f32": 1, "f64": 2}


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def write_tensor(path, arr, precision="f64"):
    if precision not in _TAG_FOR:
        raise ValueError(f"precision must be f32 or f64, got {precision!r}")
    tag = _TAG_FOR[precision]
    arr = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag])
    if arr.ndim > 255:
        raise ValueError("rank too large")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<HBB", TENSOR_VERSION, tag, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad tensor magic {data[:4]!r}")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated tensor header")
    version, tag, rank = struct.unpack_from("<HBB", data, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported tensor version {version}")
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    off = 8 + 8 * rank
    if len(data) < off:
        raise FormatError(f"{path}: truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    dtype = _DTYPE_TAGS[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - off != nbytes:
        raise FormatError(f"{path}: payload is {len(data) - off} bytes, expected {nbytes}")
    return np.frombuffer(data, dtype=dtype, offset=off).reshape(shape).astype(np.float64)


_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path):
    """Binary (P5) PGM as float64 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    m = _PGM_HEADER.match(data)
    if not m:
        raise FormatError(f"{path}: not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = width * height * dtype.itemsize
    payload = data[m.end():m.end() + n]
    if len(payload) != n:
        raise FormatError(f"{path}: truncated PGM payload")
    img = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval


def write_pgm(path, img, maxval=65535):
    """Write a [0, 1] image as 8- or 16-bit binary PGM (values clipped)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())
