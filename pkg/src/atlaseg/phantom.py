"""Synthetic cohort generator with known ground truth.

Every cohort shares one analytic template per slice: a rotated ellipse
organ with a smooth intensity edge plus a few low-contrast background
blobs. A case is the template pulled back through a case-specific smooth
random displacement field (white noise, Gaussian blur, amplitude cap),
with smoothed texture noise added afterwards and each slice standardized.

Because the case image is defined as template(p + field(p)), the returned
per-slice fields replay the case exactly under the package's backward
warp convention, and the case label is the analytically warped ellipse
interior, so labels are exactly binary.

The background blobs are what makes whole-image similarity genuinely
different from label-focused weighting: they dominate the image area, so
similarity between images says little about how well organs overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .atlas import AtlasEntry, AtlasSet
from .errors import InvalidParams
from .grid import Image2D, LabelMap2D, DisplacementField, Volume, normalize

SPACING_MM = (1.0, 3.0)
# generated ground-truth fields stay well under this mean-squared-gradient
# bound at the default amplitude and smoothing radius
GT_FIELD_SMOOTHNESS_BOUND = 0.02
EDGE_WIDTH_PX = 1.5
ORGAN_AMPLITUDE = 0.85
CENTER_JITTER_PX = 3.0
NOISE_SMOOTH_PX = 1.2
MIN_MARGIN_PX = 8.0


@dataclass(frozen=True)
class PhantomParams:
    width: int = 96
    height: int = 96
    slices: int = 12
    organ_a_px: tuple = (6.0, 9.5)
    organ_b_px: tuple = (5.0, 8.0)
    texture: float = 0.12
    deform_max_px: float = 4.0
    deform_smooth_px: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise InvalidParams("phantom grid must be at least 16x16")
        if self.slices < 1:
            raise InvalidParams("slices must be at least 1")
        for rng_ in (self.organ_a_px, self.organ_b_px):
            if len(rng_) != 2 or rng_[0] <= 0 or rng_[1] < rng_[0]:
                raise InvalidParams(f"bad semi-axis range {rng_}")
        if self.texture < 0:
            raise InvalidParams("texture amplitude must be nonnegative")
        if self.deform_max_px < 0:
            raise InvalidParams("deform_max_px must be nonnegative")
        if not self.deform_max_px < self.deform_smooth_px:
            raise InvalidParams("deform max must stay below the smoothing radius")
        reach = (
            max(self.organ_a_px[1], self.organ_b_px[1])
            + CENTER_JITTER_PX
            + self.deform_max_px
            + MIN_MARGIN_PX
        )
        if reach > min(self.width, self.height) / 2:
            raise InvalidParams(
                f"organ (reach {reach:.1f}px) does not fit the grid with an "
                f"{MIN_MARGIN_PX:.0f}px margin"
            )


@dataclass(frozen=True)
class _Template:
    """Analytic per-cohort scene, evaluable at arbitrary coordinates."""

    center: tuple
    semi_axes: tuple
    angle: float
    slice_scales: tuple
    blobs: tuple  # (x, y, sigma, amplitude) per blob

    def organ_radius(self, x, y, slice_idx):
        """Elliptical radius: 1.0 on the organ boundary of this slice."""
        cx, cy = self.center
        a, b = self.semi_axes
        s = self.slice_scales[slice_idx]
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        xr = ca * (x - cx) + sa * (y - cy)
        yr = -sa * (x - cx) + ca * (y - cy)
        return np.sqrt((xr / (a * s)) ** 2 + (yr / (b * s)) ** 2)

    def intensity(self, x, y, slice_idx):
        e = self.organ_radius(x, y, slice_idx)
        a, b = self.semi_axes
        d = (1.0 - e) * min(a, b) * self.slice_scales[slice_idx]
        u = np.clip(d / (2.0 * EDGE_WIDTH_PX) + 0.5, 0.0, 1.0)
        img = ORGAN_AMPLITUDE * u * u * (3.0 - 2.0 * u)
        for bx, by, sigma, amp in self.blobs:
            img = img + amp * np.exp(
                -((x - bx) ** 2 + (y - by) ** 2) / (2.0 * sigma**2)
            )
        return img

    def label(self, x, y, slice_idx):
        return (self.organ_radius(x, y, slice_idx) <= 1.0).astype(np.float64)

    def soft_label(self, x, y, slice_idx):
        """Anti-aliased organ interior: a 1px linear edge whose 0.5 level
        set is the exact organ boundary, so threshold(warp(soft), 0.5)
        tracks the analytic boundary with sub-pixel accuracy."""
        e = self.organ_radius(x, y, slice_idx)
        a, b = self.semi_axes
        d = (1.0 - e) * min(a, b) * self.slice_scales[slice_idx]
        return np.clip(d / 2.0 + 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class PhantomCase:
    image: Volume
    label: Volume
    fields: tuple  # one DisplacementField per slice, case = warp(template)
    deform_amplitude_px: float


@dataclass(frozen=True)
class Cohort:
    params: PhantomParams
    atlases: tuple  # (id, PhantomCase), ids unique and sorted
    tests: tuple  # (id, PhantomCase)

    def atlas_set(self, slice_idx: int) -> AtlasSet:
        return AtlasSet(
            tuple(
                AtlasEntry.build(
                    aid, case.image.slices[slice_idx], case.label.slices[slice_idx]
                )
                for aid, case in self.atlases
            )
        )


def _slice_scales(slices: int) -> tuple:
    if slices == 1:
        return (1.0,)
    scales = []
    half = (slices - 1) / 2.0
    for s in range(slices):
        rel = (s - half) / (half + 1.0)
        scales.append(math.sqrt(1.0 - 0.35 * rel * rel))
    return tuple(scales)


def _build_template(params: PhantomParams) -> _Template:
    rng = np.random.default_rng([params.seed, 0xA71A5])
    cx = params.width / 2.0 + rng.uniform(-CENTER_JITTER_PX, CENTER_JITTER_PX)
    cy = params.height / 2.0 + rng.uniform(-CENTER_JITTER_PX, CENTER_JITTER_PX)
    a = rng.uniform(*params.organ_a_px)
    b = rng.uniform(*params.organ_b_px)
    angle = rng.uniform(0.0, math.pi)
    n_blobs = int(rng.integers(3, 7))
    blobs = []
    keepout = max(a, b) + 3.0
    while len(blobs) < n_blobs:
        bx = rng.uniform(6.0, params.width - 6.0)
        by = rng.uniform(6.0, params.height - 6.0)
        if math.hypot(bx - cx, by - cy) <= keepout:
            continue
        sigma = rng.uniform(5.0, 14.0)
        amp = rng.uniform(0.3, 0.6) * (1.0 if rng.random() < 0.5 else -1.0)
        blobs.append((bx, by, sigma, amp))
    return _Template(
        center=(cx, cy),
        semi_axes=(a, b),
        angle=angle,
        slice_scales=_slice_scales(params.slices),
        blobs=tuple(blobs),
    )


def _smooth_unit_field(rng, shape, sigma):
    """Zero-mean smooth noise scaled to unit max absolute value."""
    raw = gaussian_filter(rng.standard_normal(shape), sigma=sigma)
    peak = np.max(np.abs(raw))
    if peak == 0.0:
        return raw
    return raw / peak


def _case_fields(params: PhantomParams, rng, amplitude: float, organ_center):
    """Per-slice smooth fields: a displacement bump aimed at the organ
    (so the amplitude is realized where the label lives) plus global
    smooth noise, capped at the requested amplitude."""
    shape = (params.height, params.width)
    sigma = params.deform_smooth_px
    ys, xs = np.mgrid[0 : params.height, 0 : params.width].astype(np.float64)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    bcx = organ_center[0] + rng.uniform(-6.0, 6.0)
    bcy = organ_center[1] + rng.uniform(-6.0, 6.0)
    bsig = rng.uniform(14.0, 20.0)
    bump = np.exp(-((xs - bcx) ** 2 + (ys - bcy) ** 2) / (2.0 * bsig**2))
    base = [_smooth_unit_field(rng, shape, sigma) for _ in range(2)]
    fields = []
    for _ in range(params.slices):
        wobble = [_smooth_unit_field(rng, shape, sigma) for _ in range(2)]
        mod = 1.0 + rng.uniform(-0.15, 0.15)
        dx = 0.90 * amplitude * mod * math.cos(theta) * bump
        dy = 0.90 * amplitude * mod * math.sin(theta) * bump
        dx = dx + 0.20 * amplitude * (0.7 * base[0] + 0.3 * wobble[0])
        dy = dy + 0.20 * amplitude * (0.7 * base[1] + 0.3 * wobble[1])
        peak = max(np.max(np.abs(dx)), np.max(np.abs(dy)))
        if peak > amplitude > 0.0:
            dx = dx * (amplitude / peak)
            dy = dy * (amplitude / peak)
        fields.append((dx, dy))
    return fields


def template_volume(params: PhantomParams) -> tuple[Volume, Volume]:
    """The cohort template as a zero-deformation, zero-noise case."""
    tpl = _build_template(params)
    ys, xs = np.mgrid[0 : params.height, 0 : params.width].astype(np.float64)
    imgs, lbls = [], []
    for s in range(params.slices):
        imgs.append(normalize(Image2D(tpl.intensity(xs, ys, s))))
        lbls.append(LabelMap2D(tpl.label(xs, ys, s)))
    return Volume(tuple(imgs), SPACING_MM), Volume(tuple(lbls), SPACING_MM)


def template_soft_labels(params: PhantomParams) -> Volume:
    """Anti-aliased template labels; warping these by a case's fields and
    thresholding at 0.5 reproduces that case's binary labels."""
    tpl = _build_template(params)
    ys, xs = np.mgrid[0 : params.height, 0 : params.width].astype(np.float64)
    return Volume(
        tuple(
            LabelMap2D(tpl.soft_label(xs, ys, s)) for s in range(params.slices)
        ),
        SPACING_MM,
    )


def _case_blobs(params: PhantomParams, rng, tpl: _Template):
    """Background structure unique to one case. Shared template content can
    always be aligned by a smooth field; these blobs cannot, so image
    similarity stops being a proxy for organ overlap."""
    cx, cy = tpl.center
    keepout = max(tpl.semi_axes) + params.deform_max_px + 2.0
    n = int(rng.integers(3, 7))
    blobs = []
    while len(blobs) < n:
        bx = rng.uniform(5.0, params.width - 5.0)
        by = rng.uniform(5.0, params.height - 5.0)
        if math.hypot(bx - cx, by - cy) <= keepout:
            continue
        sigma = rng.uniform(4.0, 10.0)
        amp = rng.uniform(0.35, 0.7) * (1.0 if rng.random() < 0.5 else -1.0)
        blobs.append((bx, by, sigma, amp))
    return blobs


def generate_case(params: PhantomParams, case_seed: int) -> PhantomCase:
    """One synthetic case: warped template image, exact binary label, and
    the per-slice ground-truth fields that replay it."""
    tpl = _build_template(params)
    rng = np.random.default_rng([params.seed, 0xCA5E, case_seed])
    amplitude = (
        params.deform_max_px * rng.uniform(0.6, 1.0)
        if params.deform_max_px > 0
        else 0.0
    )
    noise_amp = params.texture * rng.uniform(0.6, 1.4) if params.texture > 0 else 0.0
    # organ contrast varies per case so the image term's pull on the organ
    # differs across the cohort
    organ_gain = rng.uniform(0.75, 1.15) if params.texture > 0 else 1.0
    blobs = _case_blobs(params, rng, tpl) if params.texture > 0 else []
    fields = _case_fields(params, rng, amplitude, tpl.center)
    ys, xs = np.mgrid[0 : params.height, 0 : params.width].astype(np.float64)
    clutter = np.zeros((params.height, params.width))
    for bx, by, sigma, amp in blobs:
        clutter += amp * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2.0 * sigma**2))
    imgs, lbls, out_fields = [], [], []
    for s, (dx, dy) in enumerate(fields):
        wx = xs + dx
        wy = ys + dy
        img = organ_gain * tpl.intensity(wx, wy, s) + clutter
        if noise_amp > 0:
            img = img + noise_amp * gaussian_filter(
                rng.standard_normal(img.shape), sigma=NOISE_SMOOTH_PX
            )
        imgs.append(normalize(Image2D(img)))
        lbls.append(LabelMap2D(tpl.label(wx, wy, s)))
        out_fields.append(DisplacementField(dx, dy))
    return PhantomCase(
        image=Volume(tuple(imgs), SPACING_MM),
        label=Volume(tuple(lbls), SPACING_MM),
        fields=tuple(out_fields),
        deform_amplitude_px=float(amplitude),
    )


def generate_registration_pair(params: PhantomParams, pair_seed: int):
    """An atlas and a target made from the same case content, related by a
    fresh smooth deformation at the full configured amplitude.

    The target image is the atlas pulled back through the deformation plus
    a small fresh noise draw, and the target label follows the composed
    analytic boundary, so the pair is registrable to near-perfect image
    agreement. Returns (atlas_img, atlas_lbl, target_img, target_lbl).
    """
    from . import _kernels

    case = generate_case(params, 3000 + pair_seed)
    tpl = _build_template(params)
    rng = np.random.default_rng([params.seed, 0x9A12, pair_seed])
    g = _case_fields(params, rng, params.deform_max_px, tpl.center)[0]
    ys, xs = np.mgrid[0 : params.height, 0 : params.width].astype(np.float64)
    atlas_img = case.image.slices[0]
    atlas_lbl = case.label.slices[0]
    warped, _ = _kernels.warp_bilinear(atlas_img.data, g[0], g[1])
    if params.texture > 0:
        warped = warped + 0.3 * params.texture * gaussian_filter(
            rng.standard_normal(warped.shape), sigma=NOISE_SMOOTH_PX
        )
    target_img = normalize(Image2D(warped))
    # compose: the target's organ boundary is the atlas field sampled at the
    # deformed positions, on top of the deformation itself
    fa = case.fields[0]
    fax, _ = _kernels.warp_bilinear(fa.dx, g[0], g[1])
    fay, _ = _kernels.warp_bilinear(fa.dy, g[0], g[1])
    target_lbl = LabelMap2D(
        tpl.label(xs + g[0] + fax, ys + g[1] + fay, 0)
    )
    return atlas_img, atlas_lbl, target_img, target_lbl


def generate_cohort(params: PhantomParams, n_atlases: int, n_tests: int) -> Cohort:
    """Dimension-consistent cohort of atlas and test cases.

    Test ground-truth labels live on the returned cases; the segmentation
    pipeline only ever sees test images, the evaluator reads the labels.
    """
    if n_atlases < 2:
        raise InvalidParams("a cohort needs at least 2 atlases")
    if n_tests < 1:
        raise InvalidParams("a cohort needs at least 1 test case")
    atlases = tuple(
        (f"atlas_{i:02d}", generate_case(params, 1000 + i)) for i in range(n_atlases)
    )
    tests = tuple(
        (f"test_{i:02d}", generate_case(params, 2000 + i)) for i in range(n_tests)
    )
    return Cohort(params=params, atlases=atlases, tests=tests)
