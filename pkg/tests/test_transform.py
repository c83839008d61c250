import numpy as np
import pytest

from atlaseg.errors import DimensionMismatch
from atlaseg.grid import DisplacementField, Image2D, LabelMap2D
from atlaseg.transform import sample_gradient, warp


def const_field(shape, dx=0.0, dy=0.0):
    return DisplacementField(np.full(shape, dx), np.full(shape, dy))


def test_zero_field_identity():
    img = Image2D(np.random.default_rng(0).normal(size=(6, 6)))
    res = warp(img, const_field((6, 6)))
    np.testing.assert_array_equal(res.warped.data, img.data)
    assert res.in_bounds_mask.data.min() == 1.0


def test_unit_shift_moves_bright_pixel_toward_negative_x():
    # backward sampling: out[y, x] = src[y, x + 1], so a bright pixel at
    # column 3 shows up at column 2
    data = np.zeros((5, 5))
    data[2, 3] = 1.0
    res = warp(Image2D(data), const_field((5, 5), dx=1.0))
    expected = np.zeros((5, 5))
    expected[2, 2] = 1.0
    np.testing.assert_array_equal(res.warped.data, expected)


def test_constant_source_invariant():
    img = Image2D(np.full((7, 7), 4.5))
    field = DisplacementField(
        np.random.default_rng(1).uniform(-3, 3, (7, 7)),
        np.random.default_rng(2).uniform(-3, 3, (7, 7)),
    )
    res = warp(img, field)
    np.testing.assert_array_equal(res.warped.data, img.data)


def test_dimension_mismatch():
    img = Image2D(np.zeros((4, 4)))
    with pytest.raises(DimensionMismatch):
        warp(img, const_field((5, 4)))
    with pytest.raises(DimensionMismatch):
        sample_gradient(img, const_field((4, 5)))


def test_label_warp_stays_in_unit_interval_and_is_soft():
    lbl = LabelMap2D((np.random.default_rng(3).uniform(size=(8, 8)) > 0.5).astype(float))
    field = DisplacementField(
        np.random.default_rng(4).uniform(-2, 2, (8, 8)) + 0.5,
        np.random.default_rng(5).uniform(-2, 2, (8, 8)) + 0.5,
    )
    res = warp(lbl, field)
    assert isinstance(res.warped, LabelMap2D)
    assert res.warped.data.min() >= 0.0 and res.warped.data.max() <= 1.0


def test_warp_linear_in_source():
    rng = np.random.default_rng(6)
    s1 = rng.normal(size=(6, 6))
    s2 = rng.normal(size=(6, 6))
    field = DisplacementField(rng.uniform(-2, 2, (6, 6)), rng.uniform(-2, 2, (6, 6)))
    a, b = 2.5, -1.25
    combined = warp(Image2D(a * s1 + b * s2), field).warped.data
    separate = a * warp(Image2D(s1), field).warped.data + b * warp(Image2D(s2), field).warped.data
    np.testing.assert_allclose(combined, separate, atol=1e-12)


def test_sub_pixel_shift_conserves_label_mass_except_boundary_ring():
    data = np.zeros((16, 16))
    data[5:11, 5:11] = 1.0
    lbl = LabelMap2D(data)
    res = warp(lbl, const_field((16, 16), dx=0.4, dy=-0.3))
    # boundary ring of the 6x6 square is 20 px; mass change stays below it
    assert abs(res.warped.data.sum() - data.sum()) <= 20.0


def test_gradient_constant_source_is_zero():
    img = Image2D(np.full((5, 5), 2.0))
    gx, gy = sample_gradient(img, const_field((5, 5), dx=0.7, dy=-0.4))
    np.testing.assert_array_equal(gx, np.zeros((5, 5)))
    np.testing.assert_array_equal(gy, np.zeros((5, 5)))


def test_gradient_linear_ramp():
    h = w = 6
    ramp = np.tile(np.arange(float(w)), (h, 1))
    gx, gy = sample_gradient(Image2D(ramp), const_field((h, w)))
    # exact for bilinear at interior pixels
    np.testing.assert_allclose(gx[1:-1, 1:-1], 1.0)
    np.testing.assert_allclose(gy[1:-1, 1:-1], 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    src = Image2D(rng.normal(size=(8, 8)))
    dx = rng.uniform(-1.5, 1.5, (8, 8)) + 0.21
    dy = rng.uniform(-1.5, 1.5, (8, 8)) - 0.13
    field = DisplacementField(dx, dy)
    gx, gy = sample_gradient(src, field)
    eps = 1e-6
    for comp, grad in (("x", gx), ("y", gy)):
        up = warp(src, DisplacementField(dx + (eps if comp == "x" else 0), dy + (eps if comp == "y" else 0))).warped.data
        dn = warp(src, DisplacementField(dx - (eps if comp == "x" else 0), dy - (eps if comp == "y" else 0))).warped.data
        fd = (up - dn) / (2 * eps)
        sx = np.arange(8)[None, :] + dx
        sy = np.arange(8)[:, None] + dy
        frac = (sx if comp == "x" else sy) % 1.0
        away = np.minimum(frac, 1.0 - frac) > 1e-3
        rel = np.abs(grad[away] - fd[away]) / np.maximum(np.abs(fd[away]), 1e-8)
        assert rel.max() < 1e-4
