"""Backend selection for the convolution hot loops.

The compiled extension is preferred; set ``SEGKIT_BACKEND=python`` to force
the numpy fallback. ``BACKEND`` names the backend actually in use.
"""
import os

import numpy as np

from segkit import _fallback

try:
    from segkit import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_requested = os.environ.get("SEGKIT_BACKEND", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(f"SEGKIT_BACKEND must be auto, compiled or python, got {_requested!r}")
if _requested == "compiled" and _ckernels is None:
    raise ImportError("SEGKIT_BACKEND=compiled but segkit._ckernels is not built")

if _ckernels is not None and _requested != "python":
    BACKEND = "compiled"
    _impl = _ckernels
else:
    BACKEND = "python"
    _impl = _fallback


def available_backends():
    return ("compiled", "python") if _ckernels is not None else ("python",)


def get_backend(name):
    """Return the kernel module for ``name`` ('compiled' or 'python')."""
    if name == "python":
        return _fallback
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def im2col(x, k, stride, dilation, pad_top, pad_left, oh, ow):
    x = np.ascontiguousarray(x)
    return _impl.im2col(x, k, stride, dilation, pad_top, pad_left, oh, ow)


def col2im(cols, c, h, w, k, stride, dilation, pad_top, pad_left, oh, ow):
    cols = np.ascontiguousarray(cols)
    return _impl.col2im(cols, c, h, w, k, stride, dilation, pad_top, pad_left, oh, ow)


def set_backend(name):
    """Switch the active backend for this process."""
    global BACKEND, _impl
    _impl = get_backend(name)
    BACKEND = name
