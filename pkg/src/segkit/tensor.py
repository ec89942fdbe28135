"""Dense (n, c, h, w) tensors on top of numpy, plus the ``.t4`` file container.

A Tensor4 is a C-contiguous numpy array with four dimensions, each >= 1,
dtype float32 or float64. Element (i, j, y, x) lives at flat offset
((i*c + j)*h + y)*w + x, which is numpy's row-major layout.
"""
import struct

import numpy as np

from segkit.errors import ContractError, T4FormatError

DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32

T4_MAGIC = b"T4v1"
_T4_HEADER = struct.Struct("<4sB4I")
_T4_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class Prng:
    """Seedable generator; PCG64 from numpy, stable across platforms.

    ``fork(key)`` derives an independent child stream from the original seed,
    so components can own their own stream without disturbing each other.
    """

    algorithm = "PCG64"

    def __init__(self, seed=0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def fork(self, key):
        child = Prng.__new__(Prng)
        child.seed = self.seed
        child._seq = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        child.gen = np.random.Generator(np.random.PCG64(child._seq))
        return child

    def uniform(self, lo, hi, size=None):
        return self.gen.uniform(lo, hi, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, lo, hi=None, size=None):
        return self.gen.integers(lo, hi, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ContractError(f"Tensor4 shape needs 4 dims, got {shape}")
    if any(s < 1 for s in shape):
        raise ContractError(f"all dims must be >= 1, got {shape}")
    return shape


def check_tensor4(x, name="x"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ContractError(f"{name} must be a 4-D array, got {getattr(x, 'shape', type(x))}")
    return x


def zeros(shape, dtype=DEFAULT_DTYPE):
    shape = _check_shape(shape)
    try:
        return np.zeros(shape, dtype=dtype)
    except (ValueError, MemoryError) as exc:
        raise MemoryError(f"cannot allocate tensor of shape {shape}") from exc


def rand_uniform(rng, shape, lo, hi, dtype=DEFAULT_DTYPE):
    """I.i.d. samples in [lo, hi), also after rounding to ``dtype``."""
    if not lo < hi:
        raise ValueError(f"rand_uniform needs lo < hi, got lo={lo}, hi={hi}")
    shape = _check_shape(shape) if len(shape) == 4 else tuple(shape)
    out = rng.uniform(lo, hi, shape).astype(dtype)
    top = np.nextafter(np.asarray(hi, dtype=dtype), np.asarray(lo, dtype=dtype))
    np.minimum(out, top, out=out)
    np.maximum(out, np.asarray(lo, dtype=dtype), out=out)
    return out


def pad2d(x, top, bottom, left, right, value=0.0):
    check_tensor4(x)
    if min(top, bottom, left, right) < 0:
        raise ContractError("paddings must be >= 0")
    n, c, h, w = x.shape
    out = np.full((n, c, h + top + bottom, w + left + right), value, dtype=x.dtype)
    out[:, :, top:top + h, left:left + w] = x
    return out


def crop2d(x, top, bottom, left, right):
    check_tensor4(x)
    h, w = x.shape[2:]
    if top + bottom >= h or left + right >= w:
        raise ContractError("crop removes the whole image")
    return np.ascontiguousarray(x[:, :, top:h - bottom, left:w - right])


def _half_pixel_taps(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling with half-pixel centers, edges clamped.

    Interpolation is written as ``a + f*(b - a)`` so constant images come
    back exactly.
    """
    check_tensor4(x)
    if out_h < 1 or out_w < 1:
        raise ContractError("output size must be >= 1")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _half_pixel_taps(h, out_h)
    x0, x1, fx = _half_pixel_taps(w, out_w)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)
    top = x[:, :, y0, :]
    rows = top + fy * (x[:, :, y1, :] - top)
    left = rows[:, :, :, x0]
    return np.ascontiguousarray(left + fx * (rows[:, :, :, x1] - left))


def to_bytes(x):
    """Serialize a Tensor4 into the ``.t4`` container."""
    check_tensor4(x)
    if x.dtype == np.float32:
        code = 0
    elif x.dtype == np.float64:
        code = 1
    else:
        raise ContractError(f".t4 stores float32/float64 only, got {x.dtype}")
    header = _T4_HEADER.pack(T4_MAGIC, code, *x.shape)
    return header + np.ascontiguousarray(x, dtype=_T4_CODES[code]).tobytes()


def from_bytes(buf):
    if len(buf) < _T4_HEADER.size:
        raise T4FormatError(f"truncated .t4 header ({len(buf)} bytes)")
    magic, code, n, c, h, w = _T4_HEADER.unpack_from(buf)
    if magic != T4_MAGIC:
        raise T4FormatError(f"bad .t4 magic {magic!r}")
    if code not in _T4_CODES:
        raise T4FormatError(f"unknown .t4 dtype code {code}")
    if min(n, c, h, w) < 1:
        raise T4FormatError(f"invalid .t4 dims {(n, c, h, w)}")
    dt = _T4_CODES[code]
    expected = _T4_HEADER.size + n * c * h * w * dt.itemsize
    if len(buf) != expected:
        raise T4FormatError(f".t4 payload is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype=dt, offset=_T4_HEADER.size)
    return data.reshape(n, c, h, w).astype(dt.newbyteorder("="), copy=True)


def save_t4(path, x):
    with open(path, "wb") as fh:
        fh.write(to_bytes(x))


def load_t4(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
