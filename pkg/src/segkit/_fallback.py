"""Pure-numpy im2col / col2im, used when the compiled extension is missing.

Same contract and pixel-major column layout as ``_ckernels``. col2im walks
the taps with ky descending and kx ascending, the order in which the
compiled loop reaches any given input element, so both agree bitwise.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def _span(out_len, k, stride, dilation):
    return (out_len - 1) * stride + (k - 1) * dilation + 1


def im2col(x, k, stride, dilation, pad_top, pad_left, oh, ow):
    n, c, h, w = x.shape
    hp = max(_span(oh, k, stride, dilation), pad_top + h)
    wp = max(_span(ow, k, stride, dilation), pad_left + w)
    xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    xp[:, :, pad_top:pad_top + h, pad_left:pad_left + w] = x
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, oh, ow, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh * dilation, sw * dilation),
        writeable=False,
    )
    return windows.reshape(n, oh * ow, c * k * k)


def col2im(cols, c, h, w, k, stride, dilation, pad_top, pad_left, oh, ow):
    n = cols.shape[0]
    hp = max(_span(oh, k, stride, dilation), pad_top + h)
    wp = max(_span(ow, k, stride, dilation), pad_left + w)
    buf = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    ystop = (oh - 1) * stride + 1
    xstop = (ow - 1) * stride + 1
    for ky in reversed(range(k)):
        y0 = ky * dilation
        for kx in range(k):
            x0 = kx * dilation
            buf[:, :, y0:y0 + ystop:stride, x0:x0 + xstop:stride] += cols6[:, :, ky, kx]
    return np.ascontiguousarray(buf[:, :, pad_top:pad_top + h, pad_left:pad_left + w])
