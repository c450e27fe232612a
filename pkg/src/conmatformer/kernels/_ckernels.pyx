# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv lowering kernels (fast backend).

Same contracts as _pykernels; flat typed loops instead of strided numpy
copies, GIL released inside the hot loops.
"""

import numpy as np

cimport cython
from libc.string cimport memcpy

BACKEND = "cython"

ctypedef fused real:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _im2col_loop(real[:, :, :, ::1] xp, real[:, :, ::1] cols,
                       Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t b = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t n, ch, i, j, oy, ox, row, col
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    if stride == 1:
                        # unit stride: each output row is a contiguous slab
                        for oy in range(ho):
                            memcpy(&cols[n, row, oy * wo], &xp[n, ch, oy + i, j],
                                   wo * sizeof(real))
                    else:
                        for oy in range(ho):
                            col = oy * wo
                            for ox in range(wo):
                                cols[n, row, col + ox] = xp[n, ch, oy * stride + i, ox * stride + j]


@cython.boundscheck(False)
@cython.wraparound(False)
cdef void _col2im_loop(real[:, :, ::1] cols, real[:, :, :, ::1] out,
                       Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t hp = out.shape[2], wp = out.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t n, ch, i, j, oy, ox, row, col
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        col = oy * wo
                        for ox in range(wo):
                            out[n, ch, oy * stride + i, ox * stride + j] += cols[n, row, col + ox]


def im2col(xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    xp = np.ascontiguousarray(xp)
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((b, c * kh * kw, ho * wo), dtype=xp.dtype)
    if xp.dtype == np.float32:
        _im2col_loop[float](xp, cols, kh, kw, stride)
    elif xp.dtype == np.float64:
        _im2col_loop[double](xp, cols, kh, kw, stride)
    else:
        raise TypeError(f"unsupported dtype {xp.dtype}")
    return cols


def col2im(cols, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cols = np.ascontiguousarray(cols)
    b = cols.shape[0]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im_loop[float](cols, out, kh, kw, stride)
    elif cols.dtype == np.float64:
        _col2im_loop[double](cols, out, kh, kw, stride)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
