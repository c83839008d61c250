# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython warp kernels: the hot inner loop of registration.

Arithmetic mirrors _warp_np expression-for-expression so both backends
return bit-identical arrays (the extension is compiled with
-ffp-contract=off for that reason).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef inline double _clip(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def warp_bilinear(const double[:, ::1] src, const double[:, ::1] dx, const double[:, ::1] dy):
    """See _warp_np.warp_bilinear."""
    cdef Py_ssize_t h = src.shape[0]
    cdef Py_ssize_t w = src.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    mask_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] mask = mask_arr
    cdef Py_ssize_t x, y, x0, y0, x1, y1
    cdef double sx, sy, cx, cy, fx, fy, s00, s01, s10, s11, top, bot
    with nogil:
        for y in range(h):
            for x in range(w):
                sx = x + dx[y, x]
                sy = y + dy[y, x]
                if 0.0 <= sx <= w - 1.0 and 0.0 <= sy <= h - 1.0:
                    mask[y, x] = 1.0
                else:
                    mask[y, x] = 0.0
                cx = _clip(sx, 0.0, w - 1.0)
                cy = _clip(sy, 0.0, h - 1.0)
                x0 = <Py_ssize_t>cx
                y0 = <Py_ssize_t>cy
                if x0 > w - 1:
                    x0 = w - 1
                if y0 > h - 1:
                    y0 = h - 1
                x1 = x0 + 1
                if x1 > w - 1:
                    x1 = w - 1
                y1 = y0 + 1
                if y1 > h - 1:
                    y1 = h - 1
                fx = cx - x0
                fy = cy - y0
                s00 = src[y0, x0]
                s01 = src[y0, x1]
                s10 = src[y1, x0]
                s11 = src[y1, x1]
                top = s00 + fx * (s01 - s00)
                bot = s10 + fx * (s11 - s10)
                out[y, x] = top + fy * (bot - top)
    return out_arr, mask_arr


def warp_with_gradient(const double[:, ::1] src, const double[:, ::1] dx, const double[:, ::1] dy):
    """See _warp_np.warp_with_gradient."""
    cdef Py_ssize_t h = src.shape[0]
    cdef Py_ssize_t w = src.shape[1]
    out_arr = np.empty((h, w), dtype=np.float64)
    gx_arr = np.empty((h, w), dtype=np.float64)
    gy_arr = np.empty((h, w), dtype=np.float64)
    mask_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gy = gy_arr
    cdef double[:, ::1] mask = mask_arr
    cdef Py_ssize_t x, y, x0, y0, x1, y1
    cdef double sx, sy, cx, cy, fx, fy, s00, s01, s10, s11, top, bot
    with nogil:
        for y in range(h):
            for x in range(w):
                sx = x + dx[y, x]
                sy = y + dy[y, x]
                if 0.0 <= sx <= w - 1.0 and 0.0 <= sy <= h - 1.0:
                    mask[y, x] = 1.0
                else:
                    mask[y, x] = 0.0
                cx = _clip(sx, 0.0, w - 1.0)
                cy = _clip(sy, 0.0, h - 1.0)
                x0 = <Py_ssize_t>cx
                y0 = <Py_ssize_t>cy
                if x0 > w - 1:
                    x0 = w - 1
                if y0 > h - 1:
                    y0 = h - 1
                x1 = x0 + 1
                if x1 > w - 1:
                    x1 = w - 1
                y1 = y0 + 1
                if y1 > h - 1:
                    y1 = h - 1
                fx = cx - x0
                fy = cy - y0
                s00 = src[y0, x0]
                s01 = src[y0, x1]
                s10 = src[y1, x0]
                s11 = src[y1, x1]
                top = s00 + fx * (s01 - s00)
                bot = s10 + fx * (s11 - s10)
                out[y, x] = top + fy * (bot - top)
                if 0.0 < sx < w - 1.0:
                    gx[y, x] = (s01 - s00) + fy * ((s11 - s10) - (s01 - s00))
                else:
                    gx[y, x] = 0.0
                if 0.0 < sy < h - 1.0:
                    gy[y, x] = bot - top
                else:
                    gy[y, x] = 0.0
    return out_arr, gx_arr, gy_arr, mask_arr
