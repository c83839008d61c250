"""Pure-numpy fallback for the warp kernels.

Kept operation-for-operation identical to the Cython version so both
backends produce bit-identical results.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def _sample_coords(shape, dx, dy):
    h, w = shape
    ys, xs = np.meshgrid(
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        indexing="ij",
    )
    return xs + dx, ys + dy


def _stencil(src, sx, sy):
    h, w = src.shape
    cx = np.clip(sx, 0.0, w - 1.0)
    cy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    np.clip(x0, 0, w - 1, out=x0)
    np.clip(y0, 0, h - 1, out=y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    return x0, y0, x1, y1, fx, fy


def warp_bilinear(src, dx, dy):
    """Backward bilinear warp: out[y, x] = src[y + dy[y,x], x + dx[y,x]].

    Sample positions are clamped to the grid. Returns (out, mask) where
    mask[y, x] is 1.0 when the unclamped position lies inside the grid.
    """
    h, w = src.shape
    sx, sy = _sample_coords(src.shape, dx, dy)
    mask = (
        (sx >= 0.0) & (sx <= w - 1.0) & (sy >= 0.0) & (sy <= h - 1.0)
    ).astype(np.float64)
    x0, y0, x1, y1, fx, fy = _stencil(src, sx, sy)
    s00 = src[y0, x0]
    s01 = src[y0, x1]
    s10 = src[y1, x0]
    s11 = src[y1, x1]
    top = s00 + fx * (s01 - s00)
    bot = s10 + fx * (s11 - s10)
    out = top + fy * (bot - top)
    return out, mask


def warp_with_gradient(src, dx, dy):
    """Warp plus the derivative of each output sample w.r.t. its own
    displacement components.

    Returns (out, gx, gy, mask). gx[y, x] = d out[y, x] / d dx[y, x] and
    likewise gy; both are 0 where the sample position is clamped (moving
    the displacement there does not move the clamped coordinate).
    """
    h, w = src.shape
    sx, sy = _sample_coords(src.shape, dx, dy)
    mask = (
        (sx >= 0.0) & (sx <= w - 1.0) & (sy >= 0.0) & (sy <= h - 1.0)
    ).astype(np.float64)
    x0, y0, x1, y1, fx, fy = _stencil(src, sx, sy)
    s00 = src[y0, x0]
    s01 = src[y0, x1]
    s10 = src[y1, x0]
    s11 = src[y1, x1]
    top = s00 + fx * (s01 - s00)
    bot = s10 + fx * (s11 - s10)
    out = top + fy * (bot - top)
    in_x = (sx > 0.0) & (sx < w - 1.0)
    in_y = (sy > 0.0) & (sy < h - 1.0)
    gx = ((s01 - s00) + fy * ((s11 - s10) - (s01 - s00))) * in_x
    gy = (bot - top) * in_y
    return out, gx, gy, mask
