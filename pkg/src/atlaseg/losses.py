"""Composite registration loss and its gradient w.r.t. the field.

Three terms, combined as total = alpha*sim + beta*dice + gamma*smooth:

* sim: negative global normalized cross-correlation between the warped
  atlas image and the target image, one scalar over all pixels; in [-1, 1].
* dice: negative soft Dice between the warped atlas label and the target
  label, -2*sum(w*t) / (sum(w) + sum(t) + eps); in [-1, 0].
* smooth: mean over pixels of the squared forward differences of both
  field components (four partials per pixel, one-sided zero extension at
  the far boundary), so the weight for it is resolution independent.

The gradient chains each term through the bilinear warp; the warped value
at a pixel depends only on the field at that pixel, so the Jacobian of
the warp is diagonal and the chain rule is a per-pixel product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConstantImage, DimensionMismatch, InvalidParams
from .grid import DisplacementField, Image2D, LabelMap2D

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise InvalidParams("loss weights must be nonnegative")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise InvalidParams("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    sim: float
    dice: float
    smooth: float
    total: float


def _check_same_shape(a, b) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")


def _ncc_terms(w: np.ndarray, t: np.ndarray):
    u = w - w.mean()
    v = t - t.mean()
    b = np.sum(u * u)
    c = np.sum(v * v)
    if b == 0.0 or c == 0.0:
        raise ConstantImage("NCC undefined for a constant image")
    a = np.sum(u * v)
    return u, v, a, b, c


def ncc_loss(warped: Image2D, target: Image2D) -> float:
    """Negative global normalized cross-correlation; -1 means identical
    up to a positive affine intensity map."""
    _check_same_shape(warped, target)
    _, _, a, b, c = _ncc_terms(warped.data, target.data)
    return float(-a / np.sqrt(b * c))


def _ncc_loss_and_grad(w: np.ndarray, t: np.ndarray):
    """Loss plus d(loss)/d(warped) as an array."""
    u, v, a, b, c = _ncc_terms(w, t)
    root = np.sqrt(b * c)
    grad = (a / b * u - v) / root
    return float(-a / root), grad


def dice_loss(warped_label: LabelMap2D, target_label: LabelMap2D) -> float:
    """Negative soft Dice overlap in [-1, 0]; epsilon guards empty labels."""
    _check_same_shape(warped_label, target_label)
    loss, _ = _dice_loss_and_grad(warped_label.data, target_label.data)
    return loss


def _dice_loss_and_grad(w: np.ndarray, t: np.ndarray):
    s = np.sum(w * t)
    d = np.sum(w) + np.sum(t) + DICE_EPS
    grad = (-2.0 * t + 2.0 * s / d) / d
    return float(-2.0 * s / d), grad


def _forward_diffs(comp: np.ndarray):
    """Forward differences with zero extension past the far boundary."""
    gx = np.zeros_like(comp)
    gy = np.zeros_like(comp)
    gx[:, :-1] = comp[:, 1:] - comp[:, :-1]
    gy[:-1, :] = comp[1:, :] - comp[:-1, :]
    return gx, gy


def smoothness_loss(field: DisplacementField) -> float:
    """Mean squared forward-difference gradient of the field; 0 iff constant."""
    if field.width < 2 or field.height < 2:
        raise InvalidParams("smoothness needs a field of at least 2x2")
    loss, _, _ = _smoothness_loss_and_grad(field.dx, field.dy)
    return loss


def _smoothness_loss_and_grad(dx: np.ndarray, dy: np.ndarray):
    n = dx.size
    total = 0.0
    grads = []
    for comp in (dx, dy):
        gx, gy = _forward_diffs(comp)
        total += np.sum(gx * gx) + np.sum(gy * gy)
        g = np.zeros_like(comp)
        g[:, :-1] -= gx[:, :-1]
        g[:, 1:] += gx[:, :-1]
        g[:-1, :] -= gy[:-1, :]
        g[1:, :] += gy[:-1, :]
        grads.append(g * (2.0 / n))
    return float(total / n), grads[0], grads[1]


def _resolve_labels(atlas_lbl, tgt_lbl, beta: float):
    """The dice term only applies when both labels are present."""
    if atlas_lbl is None or tgt_lbl is None:
        return None, None, 0.0
    return atlas_lbl, tgt_lbl, beta


def total_loss(
    atlas_img: Image2D,
    atlas_lbl: LabelMap2D | None,
    tgt_img: Image2D,
    tgt_lbl: LabelMap2D | None,
    field: DisplacementField,
    w: LossWeights,
) -> LossBreakdown:
    """Weighted composite loss of one atlas-target pair under a field."""
    _validate_pair_dims(atlas_img, atlas_lbl, tgt_img, tgt_lbl, field)
    atlas_lbl, tgt_lbl, beta = _resolve_labels(atlas_lbl, tgt_lbl, w.beta)

    warped_img, _ = _kernels.warp_bilinear(atlas_img.data, field.dx, field.dy)
    sim, _ = _ncc_loss_and_grad(warped_img, tgt_img.data)

    if atlas_lbl is not None:
        warped_lbl, _ = _kernels.warp_bilinear(atlas_lbl.data, field.dx, field.dy)
        dice, _ = _dice_loss_and_grad(np.clip(warped_lbl, 0.0, 1.0), tgt_lbl.data)
    else:
        dice = 0.0

    smooth, _, _ = _smoothness_loss_and_grad(field.dx, field.dy)
    total = w.alpha * sim + beta * dice + w.gamma * smooth
    return LossBreakdown(sim=sim, dice=dice, smooth=smooth, total=float(total))


def total_loss_gradient(
    atlas_img: Image2D,
    atlas_lbl: LabelMap2D | None,
    tgt_img: Image2D,
    tgt_lbl: LabelMap2D | None,
    field: DisplacementField,
    w: LossWeights,
) -> DisplacementField:
    """d(total)/d(field), shaped like the field."""
    _, gdx, gdy = _total_loss_and_gradient(
        atlas_img, atlas_lbl, tgt_img, tgt_lbl, field, w
    )
    return DisplacementField(gdx, gdy)


def _validate_pair_dims(atlas_img, atlas_lbl, tgt_img, tgt_lbl, field) -> None:
    for other in (atlas_lbl, tgt_img, tgt_lbl, field):
        if other is not None and other.shape != atlas_img.shape:
            raise DimensionMismatch(
                f"all inputs must share dims, got {other.shape} vs {atlas_img.shape}"
            )


def _total_loss_and_gradient(atlas_img, atlas_lbl, tgt_img, tgt_lbl, field, w):
    """One fused pass used by the optimizer: (breakdown, d/d dx, d/d dy)."""
    _validate_pair_dims(atlas_img, atlas_lbl, tgt_img, tgt_lbl, field)
    atlas_lbl, tgt_lbl, beta = _resolve_labels(atlas_lbl, tgt_lbl, w.beta)
    dx, dy = field.dx, field.dy

    warped_img, img_gx, img_gy, _ = _kernels.warp_with_gradient(atlas_img.data, dx, dy)
    sim, sim_dw = _ncc_loss_and_grad(warped_img, tgt_img.data)
    gdx = (w.alpha * sim_dw) * img_gx
    gdy = (w.alpha * sim_dw) * img_gy

    dice = 0.0
    if atlas_lbl is not None:
        warped_lbl, lbl_gx, lbl_gy, _ = _kernels.warp_with_gradient(
            atlas_lbl.data, dx, dy
        )
        dice, dice_dw = _dice_loss_and_grad(
            np.clip(warped_lbl, 0.0, 1.0), tgt_lbl.data
        )
        if beta > 0.0:
            gdx += (beta * dice_dw) * lbl_gx
            gdy += (beta * dice_dw) * lbl_gy

    smooth, sm_gdx, sm_gdy = _smoothness_loss_and_grad(dx, dy)
    gdx += w.gamma * sm_gdx
    gdy += w.gamma * sm_gdy

    total = w.alpha * sim + beta * dice + w.gamma * smooth
    breakdown = LossBreakdown(sim=sim, dice=dice, smooth=smooth, total=float(total))
    return breakdown, gdx, gdy
