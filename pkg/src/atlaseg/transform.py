"""Displacement-field application (backward bilinear warping).

The field is a backward map: the output value at pixel p is the source
sampled at p + field[p], with sample positions clamped to the grid. This
keeps the output defined at every pixel and makes warped soft labels a
convex combination of source values, so they stay in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionMismatch
from .grid import DisplacementField, Image2D, LabelMap2D


@dataclass(frozen=True)
class WarpResult:
    warped: Image2D | LabelMap2D
    in_bounds_mask: LabelMap2D


def _check_dims(src, field: DisplacementField) -> None:
    if src.shape != field.shape:
        raise DimensionMismatch(f"source {src.shape} vs field {field.shape}")


def warp(src: Image2D | LabelMap2D, field: DisplacementField) -> WarpResult:
    """Warp an image or soft label by the field.

    The in_bounds_mask marks pixels whose unclamped sample position lies
    fully inside the source grid; it is diagnostic only and is not applied
    to the output.
    """
    _check_dims(src, field)
    out, mask = _kernels.warp_bilinear(src.data, field.dx, field.dy)
    if isinstance(src, LabelMap2D):
        warped = LabelMap2D(np.clip(out, 0.0, 1.0))
    else:
        warped = Image2D(out)
    return WarpResult(warped=warped, in_bounds_mask=LabelMap2D(mask))


def sample_gradient(
    src: Image2D | LabelMap2D, field: DisplacementField
) -> tuple[np.ndarray, np.ndarray]:
    """Derivative of each warped sample w.r.t. its own displacement.

    Returns (gx, gy): gx[p] = d warp(src, field)[p] / d dx[p], and gy the
    dy counterpart, straight from the bilinear stencil. Zero where the
    sample position is clamped at the grid edge.
    """
    _check_dims(src, field)
    _, gx, gy, _ = _kernels.warp_with_gradient(src.data, field.dx, field.dy)
    return gx, gy
