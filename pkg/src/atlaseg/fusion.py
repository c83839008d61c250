"""Atlas weighting and weighted label fusion.

The main weighting route builds a label-overlap accuracy (LOA) matrix by
registering every atlas to every other atlas with the label constraint:
o[j][k] is the hard Dice between atlas k's label warped onto atlas j and
atlas j's own label. The column mean over targets j != k says how well
atlas k predicts the others, and those means, normalized, form the prior
fusion weights. At test time the prior is refined by consensus: each
warped atlas label is scored by its mean soft Dice against the other
warped labels on the test grid, the prior is multiplied in, and the
product is renormalized. Two baseline weightings (image similarity with
and without warping) are kept for ablations.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from .atlas import AtlasEntry, AtlasSet, extract_features, select_atlases
from .errors import AllZeroOverlap, DimensionMismatch, InvalidParams
from .grid import Image2D, LabelMap2D, threshold
from .losses import DICE_EPS, ncc_loss
from .registration import RegistrationConfig, RegistrationResult, register_pair, register_to_test
from .transform import warp

FUSION_THRESHOLD = 0.5
DEFAULT_N_ATLASES = 6
WEIGHT_SUM_TOL = 1e-9


class Strategy(str, Enum):
    OASIS = "oasis"
    FWAL = "fwal"
    FWOW = "fwow"


@dataclass(frozen=True)
class LOAMatrix:
    """Pairwise label overlap accuracies, o[j][k] in [0, 1].

    Row j is the target atlas, column k the warped atlas. The diagonal is
    fixed at 1 and never enters averages. failures lists (j, k, error)
    for pairs whose registration failed; their entries are 0.
    """

    ids: tuple
    o: np.ndarray
    failures: tuple = ()

    def __post_init__(self):
        ids = tuple(self.ids)
        o = np.array(self.o, dtype=np.float64)
        n = len(ids)
        if o.shape != (n, n):
            raise InvalidParams(f"LOA matrix shape {o.shape} does not match {n} ids")
        if np.any(o < 0.0) or np.any(o > 1.0) or not np.all(np.isfinite(o)):
            raise InvalidParams("LOA entries must lie in [0, 1]")
        o.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "failures", tuple(self.failures))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *self.ids])
        for j, row_id in enumerate(self.ids):
            writer.writerow([row_id, *(f"{v:.9f}" for v in self.o[j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LOAMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][:1] != ["id"]:
            raise InvalidParams("LOA csv must start with an 'id' header")
        ids = tuple(rows[0][1:])
        o = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(ids=ids, o=o)


@dataclass(frozen=True)
class FusionWeights:
    ids: tuple
    w: np.ndarray

    def __post_init__(self):
        ids = tuple(self.ids)
        w = np.array(self.w, dtype=np.float64)
        if w.shape != (len(ids),):
            raise InvalidParams("one weight per atlas id required")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise InvalidParams("weights must be nonnegative and finite")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidParams(f"weights must sum to 1, got {w.sum()!r}")
        w.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "w", w)

    def as_dict(self) -> dict:
        return {i: float(v) for i, v in zip(self.ids, self.w)}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"


def _normalized(ids, raw) -> FusionWeights:
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if total <= 0.0:
        raise AllZeroOverlap("all raw fusion weights are zero")
    return FusionWeights(ids=tuple(ids), w=raw / total)


def hard_dice(a: LabelMap2D, b: LabelMap2D) -> float:
    """Dice coefficient of two binary maps in [0, 1]; both empty gives 1."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    am = a.data > 0.0
    bm = b.data > 0.0
    denom = am.sum() + bm.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(am, bm).sum() / denom)


def soft_dice(a: LabelMap2D, b: LabelMap2D) -> float:
    """Soft Dice overlap in [0, 1] with the loss module's epsilon."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return float(
        2.0 * np.sum(a.data * b.data) / (a.data.sum() + b.data.sum() + DICE_EPS)
    )


class RegistrationCache:
    """Content-addressed memo for registration results.

    Keys hash the raw input grids and the config, so any orchestration
    (single segmentation, ablation sweep) can share pair registrations
    without coordinating identifiers.
    """

    def __init__(self):
        self._store: dict = {}

    @staticmethod
    def _digest(cfg: RegistrationConfig, *grids) -> bytes:
        h = hashlib.sha256()
        h.update(repr(sorted(cfg.to_json_dict().items(), key=str)).encode())
        for g in grids:
            if g is None:
                h.update(b"\x00none")
            else:
                arrays = (g.dx, g.dy) if hasattr(g, "dx") else (g.data,)
                for a in arrays:
                    h.update(a.tobytes())
        return h.digest()

    def register_pair(self, atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg):
        key = self._digest(cfg, atlas_img, atlas_lbl, tgt_img, tgt_lbl)
        if key not in self._store:
            self._store[key] = register_pair(atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg)
        return self._store[key]

    def register_to_test(self, atlas_img, tgt_img, cfg):
        key = self._digest(cfg, atlas_img, None, tgt_img, None)
        if key not in self._store:
            self._store[key] = register_to_test(atlas_img, tgt_img, cfg)
        return self._store[key]

    def put_pair(self, atlas_img, atlas_lbl, tgt_img, tgt_lbl, cfg, result) -> None:
        self._store[self._digest(cfg, atlas_img, atlas_lbl, tgt_img, tgt_lbl)] = result

    def put_test(self, atlas_img, tgt_img, cfg, result) -> None:
        self._store[self._digest(cfg, atlas_img, None, tgt_img, None)] = result

    def __len__(self) -> int:
        return len(self._store)


def compute_loa_matrix(
    atlas_set: AtlasSet,
    cfg: RegistrationConfig,
    cache: RegistrationCache | None = None,
) -> LOAMatrix:
    """Label-constrained pairwise registration of the whole set.

    For each ordered pair j != k, atlas k's image is registered onto atlas
    j's image (labels constrain the fit), k's label is warped and
    thresholded, and o[j][k] is its hard Dice against j's label. Failed
    registrations score 0 and are recorded in failures.
    """
    if len(atlas_set) < 2:
        raise InvalidParams("LOA needs at least 2 atlases")
    reg = cache.register_pair if cache is not None else register_pair
    entries = atlas_set.entries
    n = len(entries)
    o = np.eye(n)
    failures = []
    for j in range(n):
        for k in range(n):
            if j == k:
                continue
            try:
                result = reg(
                    entries[k].image, entries[k].label,
                    entries[j].image, entries[j].label, cfg,
                )
                warped = warp(entries[k].label, result.field).warped
                o[j, k] = hard_dice(
                    threshold(warped, FUSION_THRESHOLD), entries[j].label
                )
            except Exception as e:  # noqa: BLE001 - failed pairs score 0
                o[j, k] = 0.0
                failures.append((entries[j].id, entries[k].id, type(e).__name__))
    return LOAMatrix(
        ids=tuple(e.id for e in entries), o=o, failures=tuple(failures)
    )


def atlas_weights_from_loa(loa: LOAMatrix) -> FusionWeights:
    """Prior weights: column means over targets j != k, normalized."""
    n = len(loa.ids)
    if n < 2:
        raise InvalidParams("need at least 2 atlases")
    raw = (loa.o.sum(axis=0) - np.diag(loa.o)) / (n - 1)
    return _normalized(loa.ids, raw)


def test_time_weights(
    warped_labels: list[LabelMap2D], prior: FusionWeights
) -> FusionWeights:
    """Refine the prior by agreement among the warped labels.

    consensus[k] is the mean soft Dice of warped label k against every
    other warped label on the test grid; the final weight is the prior
    times the consensus, renormalized.
    """
    n = len(warped_labels)
    if n < 2:
        raise InvalidParams("need at least 2 warped labels")
    if n != len(prior.ids):
        raise DimensionMismatch("one warped label per prior id required")
    shape = warped_labels[0].shape
    for lbl in warped_labels[1:]:
        if lbl.shape != shape:
            raise DimensionMismatch("warped labels must share dims")
    consensus = np.zeros(n)
    for k in range(n):
        consensus[k] = np.mean(
            [soft_dice(warped_labels[k], warped_labels[m]) for m in range(n) if m != k]
        )
    return _normalized(prior.ids, prior.w * consensus)


def _similarity_weights(ids, images, test_img: Image2D) -> FusionWeights:
    # (1 - ncc_loss)/2 remaps the loss from [-1, 1] to [0, 1].
    raw = [(1.0 - ncc_loss(img, test_img)) / 2.0 for img in images]
    return _normalized(ids, raw)


def fwow_weights(entries: list[AtlasEntry], test_img: Image2D) -> FusionWeights:
    """Fusing-without-warping baseline: unwarped image similarity."""
    return _similarity_weights(
        [e.id for e in entries], [e.image for e in entries], test_img
    )


def fwal_weights(
    ids: list[str], warped_imgs: list[Image2D], test_img: Image2D
) -> FusionWeights:
    """Warped-atlas baseline: similarity of the warped images."""
    return _similarity_weights(ids, warped_imgs, test_img)


def fuse_labels(warped_labels: list[LabelMap2D], weights: FusionWeights) -> LabelMap2D:
    """Weighted soft fusion: sum_k w[k] * label_k."""
    if len(warped_labels) != len(weights.ids):
        raise DimensionMismatch("one label per weight required")
    shape = warped_labels[0].shape
    acc = np.zeros(shape)
    for lbl, wk in zip(warped_labels, weights.w):
        if lbl.shape != shape:
            raise DimensionMismatch("labels must share dims")
        acc = acc + wk * lbl.data
    return LabelMap2D(np.clip(acc, 0.0, 1.0))


@dataclass(frozen=True)
class SegmentResult:
    label: LabelMap2D  # binary
    soft: LabelMap2D
    weights: FusionWeights
    selected_ids: tuple
    loa: LOAMatrix | None = None
    registrations: tuple = dc_field(repr=False, default=())


def segment(
    test_img: Image2D,
    atlas_set: AtlasSet,
    cfg: RegistrationConfig,
    strategy: Strategy | str = Strategy.OASIS,
    n: int = DEFAULT_N_ATLASES,
    cache: RegistrationCache | None = None,
) -> LabelMap2D:
    """Segment one image against an atlas set; returns the binary label."""
    return segment_detailed(test_img, atlas_set, cfg, strategy, n, cache).label


def segment_detailed(
    test_img: Image2D,
    atlas_set: AtlasSet,
    cfg: RegistrationConfig,
    strategy: Strategy | str = Strategy.OASIS,
    n: int = DEFAULT_N_ATLASES,
    cache: RegistrationCache | None = None,
) -> SegmentResult:
    """Full pipeline: select n atlases, register (per strategy), weight,
    fuse, threshold."""
    strategy = Strategy(strategy)
    if n < 2:
        raise InvalidParams("fusion needs at least 2 atlases")
    selected_ids = select_atlases(extract_features(test_img), atlas_set, n)
    selected = [atlas_set.by_id(i) for i in selected_ids]

    registrations: tuple = ()
    loa = None
    if strategy is Strategy.FWOW:
        weights = fwow_weights(selected, test_img)
        labels = [e.label for e in selected]
    else:
        reg = cache.register_to_test if cache is not None else register_to_test
        results: list[RegistrationResult] = [
            reg(e.image, test_img, cfg) for e in selected
        ]
        warped_imgs = [warp(e.image, r.field).warped for e, r in zip(selected, results)]
        labels = [warp(e.label, r.field).warped for e, r in zip(selected, results)]
        registrations = tuple(
            (e.id, r.loss_trace[0].total, r.loss_trace[-1].total)
            for e, r in zip(selected, results)
        )
        if strategy is Strategy.FWAL:
            weights = fwal_weights(selected_ids, warped_imgs, test_img)
        else:
            subset = atlas_set.subset(selected_ids)
            loa = compute_loa_matrix(subset, cfg, cache)
            weights = test_time_weights(labels, atlas_weights_from_loa(loa))

    soft = fuse_labels(labels, weights)
    return SegmentResult(
        label=threshold(soft, FUSION_THRESHOLD),
        soft=soft,
        weights=weights,
        selected_ids=tuple(selected_ids),
        loa=loa,
        registrations=registrations,
    )
