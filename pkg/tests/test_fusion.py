import numpy as np
import pytest

from atlaseg.atlas import AtlasEntry, AtlasSet
from atlaseg.errors import AllZeroOverlap, DimensionMismatch, InvalidParams
from atlaseg.fusion import (
    FusionWeights,
    LOAMatrix,
    RegistrationCache,
    Strategy,
    atlas_weights_from_loa,
    compute_loa_matrix,
    fuse_labels,
    fwal_weights,
    fwow_weights,
    hard_dice,
    segment_detailed,
    soft_dice,
)
from atlaseg.fusion import test_time_weights as consensus_weights
from atlaseg.grid import Image2D, LabelMap2D, threshold
from atlaseg.losses import LossWeights, ncc_loss
from atlaseg.phantom import PhantomParams, generate_case, generate_cohort
from atlaseg.registration import RegistrationConfig


def disk_label(shape, cx, cy, r):
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
    return LabelMap2D(((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r).astype(float))


def blob_image(shape, cx, cy, seed=0, sigma=4.0):
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    img = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    img += 0.02 * np.random.default_rng(seed).normal(size=shape)
    return Image2D(img)


@pytest.fixture(scope="module")
def small_cfg():
    return RegistrationConfig(max_iters=120, pyramid_levels=2)


# ----------------------------------------------------------------- weights

def test_fusion_weights_validation():
    FusionWeights(("a", "b"), np.array([0.25, 0.75]))
    with pytest.raises(InvalidParams):
        FusionWeights(("a", "b"), np.array([0.5, 0.6]))
    with pytest.raises(InvalidParams):
        FusionWeights(("a", "b"), np.array([-0.1, 1.1]))


def test_loa_matrix_validation_and_csv_round_trip():
    ids = ("a", "b", "c")
    o = np.array([[1.0, 0.8, 0.3], [0.7, 1.0, 0.4], [0.6, 0.5, 1.0]])
    loa = LOAMatrix(ids, o)
    back = LOAMatrix.from_csv(loa.to_csv())
    assert back.ids == ids
    np.testing.assert_allclose(back.o, o, atol=1e-9)
    with pytest.raises(InvalidParams):
        LOAMatrix(ids, np.full((3, 3), 1.5))
    with pytest.raises(InvalidParams):
        LOAMatrix(ids, np.zeros((2, 2)))


def test_loa_weights_uniform_when_entries_equal():
    o = np.full((4, 4), 0.6)
    np.fill_diagonal(o, 1.0)
    w = atlas_weights_from_loa(LOAMatrix(("a", "b", "c", "d"), o))
    np.testing.assert_allclose(w.w, 0.25)


def test_loa_weights_normalization_arithmetic():
    # column means (diagonal excluded) 0.9, 0.6, 0.3 normalize to 1/2, 1/3, 1/6
    o = np.array(
        [
            [1.0, 0.6, 0.3],
            [0.9, 1.0, 0.3],
            [0.9, 0.6, 1.0],
        ]
    )
    w = atlas_weights_from_loa(LOAMatrix(("a", "b", "c"), o))
    np.testing.assert_allclose(w.w, [0.5, 1.0 / 3.0, 1.0 / 6.0])


def test_loa_weights_preserve_column_mean_ranking():
    rng = np.random.default_rng(1)
    o = rng.uniform(0.1, 1.0, size=(5, 5))
    np.fill_diagonal(o, 1.0)
    loa = LOAMatrix(tuple("abcde"), o)
    w = atlas_weights_from_loa(loa)
    assert w.w.sum() == pytest.approx(1.0, abs=1e-12)
    col_means = (o.sum(axis=0) - 1.0) / 4.0
    assert list(np.argsort(-w.w)) == list(np.argsort(-col_means))


def test_loa_weights_all_zero_overlap():
    o = np.eye(3) * 1.0
    with pytest.raises(AllZeroOverlap):
        atlas_weights_from_loa(LOAMatrix(("a", "b", "c"), o))


def test_test_time_weights_identical_labels_keep_uniform_prior():
    lbl = disk_label((16, 16), 8, 8, 4)
    prior = FusionWeights(("a", "b", "c"), np.full(3, 1 / 3))
    w = consensus_weights([lbl, lbl, lbl], prior)
    np.testing.assert_allclose(w.w, 1 / 3)


def test_test_time_weights_downweight_outlier():
    inlier = disk_label((16, 16), 7, 7, 4)
    outlier = disk_label((16, 16), 13, 13, 2)
    labels = [inlier, inlier, inlier, inlier, outlier]
    prior = FusionWeights(tuple("abcde"), np.full(5, 0.2))
    w = consensus_weights(labels, prior)
    assert w.w[4] < w.w[0]
    assert all(w.w[4] < w.w[i] for i in range(4))


def test_test_time_weights_match_brute_force():
    rng = np.random.default_rng(2)
    labels = [LabelMap2D(rng.uniform(size=(8, 8))) for _ in range(6)]
    prior_raw = rng.uniform(0.5, 1.5, size=6)
    prior = FusionWeights(tuple("abcdef"), prior_raw / prior_raw.sum())
    w = consensus_weights(labels, prior)
    crosses = np.zeros(6)
    for k in range(6):
        vals = []
        for m in range(6):
            if m == k:
                continue
            a, b = labels[k].data, labels[m].data
            vals.append(2 * (a * b).sum() / (a.sum() + b.sum() + 1e-6))
        crosses[k] = np.mean(vals)
    expected = prior.w * crosses
    expected /= expected.sum()
    np.testing.assert_allclose(w.w, expected, atol=1e-12)


def test_fwow_identical_atlas_wins():
    test = blob_image((16, 16), 8, 8, seed=3)
    entries = [
        AtlasEntry.build("same", test, disk_label((16, 16), 8, 8, 4)),
        AtlasEntry.build("far", blob_image((16, 16), 3, 12, seed=4), disk_label((16, 16), 3, 12, 3)),
    ]
    w = fwow_weights(entries, test)
    assert w.as_dict()["same"] > w.as_dict()["far"]


def test_fwow_equal_ncc_gives_equal_weights():
    test = blob_image((16, 16), 8, 8, seed=5)
    img = blob_image((16, 16), 5, 5, seed=6)
    mirrored = Image2D(2.0 * img.data + 1.0)  # same NCC by affine invariance
    entries = [
        AtlasEntry.build("a", img, disk_label((16, 16), 5, 5, 3)),
        AtlasEntry.build("b", mirrored, disk_label((16, 16), 5, 5, 3)),
    ]
    w = fwow_weights(entries, test)
    np.testing.assert_allclose(w.w, 0.5, atol=1e-9)


def test_fwow_matches_hand_computed_remap():
    test = blob_image((16, 16), 8, 8, seed=7)
    imgs = [blob_image((16, 16), c, c, seed=8 + c) for c in (4, 8, 12)]
    entries = [
        AtlasEntry.build(f"a{i}", img, disk_label((16, 16), 5, 5, 3))
        for i, img in enumerate(imgs)
    ]
    w = fwow_weights(entries, test)
    raw = np.array([(1.0 - ncc_loss(img, test)) / 2.0 for img in imgs])
    np.testing.assert_allclose(w.w, raw / raw.sum(), atol=1e-12)


def test_fwal_matches_hand_computed_remap():
    test = blob_image((16, 16), 8, 8, seed=11)
    warped = [blob_image((16, 16), c, 8, seed=12 + c) for c in (6, 8, 10)]
    w = fwal_weights(["a", "b", "c"], warped, test)
    raw = np.array([(1.0 - ncc_loss(img, test)) / 2.0 for img in warped])
    np.testing.assert_allclose(w.w, raw / raw.sum(), atol=1e-12)
    best = int(np.argmax(raw))
    assert w.ids[best] == ["a", "b", "c"][best]


# ------------------------------------------------------------------ fusing

def test_fuse_identical_labels_any_weights():
    lbl = disk_label((12, 12), 6, 6, 3)
    w = FusionWeights(("a", "b"), np.array([0.9, 0.1]))
    fused = fuse_labels([lbl, lbl], w)
    np.testing.assert_allclose(fused.data, lbl.data, atol=1e-12)


def test_fuse_disjoint_half_weights():
    a = disk_label((16, 16), 4, 4, 2)
    b = disk_label((16, 16), 12, 12, 2)
    fused = fuse_labels([a, b], FusionWeights(("a", "b"), np.array([0.5, 0.5])))
    np.testing.assert_allclose(fused.data, 0.5 * a.data + 0.5 * b.data, atol=1e-12)


def test_fuse_uniform_weights_is_mean():
    rng = np.random.default_rng(13)
    labels = [LabelMap2D(rng.uniform(size=(6, 6))) for _ in range(4)]
    fused = fuse_labels(labels, FusionWeights(tuple("abcd"), np.full(4, 0.25)))
    np.testing.assert_allclose(
        fused.data, np.mean([l.data for l in labels], axis=0), atol=1e-12
    )
    stacked = np.stack([l.data for l in labels])
    assert np.all(fused.data >= stacked.min(axis=0) - 1e-12)
    assert np.all(fused.data <= stacked.max(axis=0) + 1e-12)


def test_weight_scaling_invariance():
    rng = np.random.default_rng(14)
    raw = rng.uniform(0.1, 1.0, size=5)
    w1 = raw / raw.sum()
    w2 = (raw * 37.5) / (raw * 37.5).sum()
    np.testing.assert_allclose(w1, w2, atol=1e-12)


@pytest.mark.parametrize("op", ["loa", "consensus", "fwow", "fwal"])
def test_weight_permutation_equivariance(op):
    rng = np.random.default_rng(15)
    n = 5
    ids = tuple(f"a{i}" for i in range(n))
    test = blob_image((16, 16), 8, 8, seed=16)
    labels = [LabelMap2D(rng.uniform(size=(16, 16))) for _ in range(n)]
    imgs = [blob_image((16, 16), 3 + 2 * i, 8, seed=17 + i) for i in range(n)]
    entries = [
        AtlasEntry.build(ids[i], imgs[i], threshold(labels[i], 0.5)) for i in range(n)
    ]
    o = rng.uniform(0.2, 1.0, size=(n, n))
    np.fill_diagonal(o, 1.0)
    prior_raw = rng.uniform(0.5, 1.5, size=n)
    prior = FusionWeights(ids, prior_raw / prior_raw.sum())

    def compute(order):
        if op == "loa":
            po = o[np.ix_(order, order)]
            return atlas_weights_from_loa(
                LOAMatrix(tuple(ids[i] for i in order), po)
            )
        if op == "consensus":
            p = FusionWeights(
                tuple(ids[i] for i in order),
                np.array([prior.w[i] for i in order]) / prior.w[order].sum(),
            )
            return consensus_weights([labels[i] for i in order], p)
        if op == "fwow":
            return fwow_weights([entries[i] for i in order], test)
        return fwal_weights(
            [ids[i] for i in order], [imgs[i] for i in order], test
        )

    base = compute(list(range(n)))
    for _ in range(10):
        order = list(rng.permutation(n))
        permuted = compute(order)
        for pos, idx in enumerate(order):
            assert permuted.ids[pos] == ids[idx]
            ref = dict(zip(base.ids, base.w))[ids[idx]]
            assert permuted.w[pos] == pytest.approx(ref, rel=1e-9, abs=1e-12)


# --------------------------------------------------------------------- loa

def test_loa_identical_atlases(small_cfg):
    params = PhantomParams(slices=1, seed=43, width=64, height=64)
    case = generate_case(params, 0)
    img, lbl = case.image.slices[0], case.label.slices[0]
    entries = (
        AtlasEntry.build("a", img, lbl),
        AtlasEntry.build("b", Image2D(img.data.copy()), LabelMap2D(lbl.data.copy())),
    )
    loa = compute_loa_matrix(AtlasSet(entries), small_cfg)
    assert loa.o[0, 1] == pytest.approx(1.0, abs=1e-6)
    assert loa.o[1, 0] == pytest.approx(1.0, abs=1e-6)
    assert loa.failures == ()


def test_loa_disjoint_labels_need_image_term(small_cfg):
    # disjoint label supports: with alpha=0 the dice gradient vanishes (the
    # warped label is flat zero wherever the target label lives) and the
    # field stays at zero, so overlap stays 0; with the image term active
    # the blobs are pulled into overlap and the constraint locks them
    shape = (64, 64)
    img_a = blob_image(shape, 24, 24, seed=18, sigma=6.0)
    img_b = blob_image(shape, 38, 36, seed=19, sigma=6.0)
    lbl_a = disk_label(shape, 24, 24, 6)
    lbl_b = disk_label(shape, 38, 36, 6)
    assert float((lbl_a.data * lbl_b.data).sum()) == 0.0
    entries = (
        AtlasEntry.build("a", img_a, lbl_a),
        AtlasEntry.build("b", img_b, lbl_b),
    )
    aset = AtlasSet(entries)
    cfg_no_img = RegistrationConfig(
        weights=LossWeights(0.0, 1.0, 0.01), max_iters=80, pyramid_levels=2
    )
    loa_no_img = compute_loa_matrix(aset, cfg_no_img)
    cfg_full = RegistrationConfig(max_iters=300, pyramid_levels=3)
    loa_full = compute_loa_matrix(aset, cfg_full)
    assert loa_no_img.o[0, 1] <= 0.05
    assert loa_full.o[0, 1] > loa_no_img.o[0, 1] + 0.3


def test_loa_matches_pairwise_recomputation(small_cfg):
    from atlaseg.registration import register_pair
    from atlaseg.transform import warp

    params = PhantomParams(slices=1, seed=47, width=64, height=64)
    entries = []
    for i in range(3):
        case = generate_case(params, i)
        entries.append(AtlasEntry.build(f"a{i}", case.image.slices[0], case.label.slices[0]))
    aset = AtlasSet(tuple(entries))
    loa = compute_loa_matrix(aset, small_cfg)
    for j in range(3):
        for k in range(3):
            if j == k:
                assert loa.o[j, k] == 1.0
                continue
            res = register_pair(
                entries[k].image, entries[k].label,
                entries[j].image, entries[j].label, small_cfg,
            )
            expected = hard_dice(
                threshold(warp(entries[k].label, res.field).warped, 0.5),
                entries[j].label,
            )
            assert loa.o[j, k] == pytest.approx(expected, abs=1e-12)


def test_loa_deterministic_with_cache(small_cfg):
    params = PhantomParams(slices=1, seed=53, width=64, height=64)
    entries = tuple(
        AtlasEntry.build(f"a{i}", *_case_slices(params, i)) for i in range(3)
    )
    aset = AtlasSet(entries)
    cache = RegistrationCache()
    loa1 = compute_loa_matrix(aset, small_cfg, cache)
    assert len(cache) == 6
    loa2 = compute_loa_matrix(aset, small_cfg, cache)
    np.testing.assert_array_equal(loa1.o, loa2.o)
    loa3 = compute_loa_matrix(aset, small_cfg)
    np.testing.assert_array_equal(loa1.o, loa3.o)


def _case_slices(params, seed):
    case = generate_case(params, seed)
    return case.image.slices[0], case.label.slices[0]


# ----------------------------------------------------------------- segment

@pytest.fixture(scope="module")
def small_cohort():
    params = PhantomParams(slices=1, seed=59, width=64, height=64)
    return generate_cohort(params, n_atlases=4, n_tests=1)


def test_segment_self_case(small_cohort, small_cfg):
    aset = small_cohort.atlas_set(0)
    target_entry = aset.entries[1]
    result = segment_detailed(
        target_entry.image, aset, small_cfg, Strategy.OASIS, n=3
    )
    assert hard_dice(result.label, target_entry.label) > 0.95
    assert result.selected_ids[0] == target_entry.id


def test_segment_two_identical_atlases_return_common_warped_label(small_cfg):
    params = PhantomParams(slices=1, seed=61, width=64, height=64)
    img, lbl = _case_slices(params, 0)
    test_img, _ = _case_slices(params, 1)
    entries = (
        AtlasEntry.build("a", img, lbl),
        AtlasEntry.build("b", Image2D(img.data.copy()), LabelMap2D(lbl.data.copy())),
    )
    result = segment_detailed(
        test_img, AtlasSet(entries), small_cfg, Strategy.OASIS, n=2
    )
    from atlaseg.registration import register_to_test
    from atlaseg.transform import warp

    res = register_to_test(img, test_img, small_cfg)
    expected = threshold(warp(lbl, res.field).warped, 0.5)
    np.testing.assert_array_equal(result.label.data, expected.data)


def test_segment_strategies_all_run(small_cohort, small_cfg):
    aset = small_cohort.atlas_set(0)
    tid, tcase = small_cohort.tests[0]
    cache = RegistrationCache()
    for strategy in Strategy:
        result = segment_detailed(
            tcase.image.slices[0], aset, small_cfg, strategy, n=3, cache=cache
        )
        assert result.label.is_binary()
        assert abs(result.weights.w.sum() - 1.0) < 1e-9
        d = hard_dice(result.label, tcase.label.slices[0])
        assert d > 0.5


def test_segment_needs_two_atlases(small_cohort, small_cfg):
    aset = small_cohort.atlas_set(0)
    with pytest.raises(InvalidParams):
        segment_detailed(aset.entries[0].image, aset, small_cfg, Strategy.FWOW, n=1)


def test_soft_and_hard_dice_helpers():
    a = disk_label((16, 16), 8, 8, 4)
    assert hard_dice(a, a) == 1.0
    assert soft_dice(a, a) == pytest.approx(1.0, abs=1e-6)
    empty = LabelMap2D(np.zeros((16, 16)))
    assert hard_dice(empty, empty) == 1.0
    with pytest.raises(DimensionMismatch):
        hard_dice(a, disk_label((15, 16), 8, 8, 4))
