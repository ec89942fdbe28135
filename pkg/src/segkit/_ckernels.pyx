# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for strided, dilated 2-D convolution.

Columns are pixel-major: shape (n, oh*ow, c*k*k), column index
(ci*k + ky)*k + kx. Out-of-bounds taps read as zero (im2col) or are dropped
(col2im). col2im adds the taps of each input element in (ky descending,
kx ascending) order, matching the numpy fallback bit for bit.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o*stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t offset, Py_ssize_t stride,
                                  Py_ssize_t size, Py_ssize_t out) nogil:
    # one past the largest o < out with o*stride + offset < size
    cdef Py_ssize_t top = size - 1 - offset
    if top < 0:
        return 0
    top = top // stride + 1
    return top if top < out else out


def im2col(const floating[:, :, :, ::1] x, int k, int stride, int dilation,
           int pad_top, int pad_left, int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t K = c * k * k
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, oh * ow, K), dtype=dtype)
    if n == 0 or K == 0 or oh == 0 or ow == 0:
        return out_arr
    cdef floating[:, :, ::1] out = out_arr
    cdef const floating* src
    cdef floating* dst
    cdef Py_ssize_t b, ci, ky, kx, oy, ox, row, iy, xoff, lo, hi
    with nogil:
        for b in range(n):
            for oy in range(oh):
                dst = &out[b, oy * ow, 0]
                for ky in range(k):
                    iy = oy * stride + ky * dilation - pad_top
                    if iy < 0 or iy >= h:
                        continue
                    for ci in range(c):
                        src = &x[b, ci, iy, 0]
                        for kx in range(k):
                            row = (ci * k + ky) * k + kx
                            xoff = kx * dilation - pad_left
                            lo = _first_valid(xoff, stride)
                            hi = _end_valid(xoff, stride, w, ow)
                            for ox in range(lo, hi):
                                dst[ox * K + row] = src[ox * stride + xoff]
    return out_arr


def col2im(const floating[:, :, ::1] cols, int c, int h, int w, int k, int stride,
           int dilation, int pad_top, int pad_left, int oh, int ow):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t K = c * k * k
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    if n == 0 or K == 0 or oh == 0 or ow == 0:
        return out_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef const floating* src
    cdef floating* dst
    cdef Py_ssize_t b, ci, ky, kx, oy, ox, row, iy, xoff, lo, hi
    with nogil:
        for b in range(n):
            for oy in range(oh):
                src = &cols[b, oy * ow, 0]
                for ky in range(k):
                    iy = oy * stride + ky * dilation - pad_top
                    if iy < 0 or iy >= h:
                        continue
                    for ci in range(c):
                        dst = &out[b, ci, iy, 0]
                        for kx in range(k):
                            row = (ci * k + ky) * k + kx
                            xoff = kx * dilation - pad_left
                            lo = _first_valid(xoff, stride)
                            hi = _end_valid(xoff, stride, w, ow)
                            for ox in range(lo, hi):
                                dst[ox * stride + xoff] += src[ox * K + row]
    return out_arr
