"""3D evaluation metrics over stacked binary slices.

DSC and aRVD come from voxel counts; the Hausdorff distance is computed
exactly on 6-connectivity boundary voxels (a voxel is boundary when any
face neighbor, including outside the volume, is background) with physical
distances from the voxel spacing. Masks at evaluation scale are small
enough that the exact all-pairs computation is affordable.

Region conventions follow the axial-thirds split: the first ceil(S/3)
slices are the apex, the last floor(S/3) the base. Records carry notes
instead of numbers where a metric is undefined (empty masks).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyMask,
    EmptyReference,
    InvalidParams,
    TooFewSlices,
)
from .grid import Volume

REGIONS = ("apex", "base", "whole")


@dataclass(frozen=True)
class MetricRecord:
    region: str
    dsc_percent: float
    arvd_percent: float | None
    hd_mm: float | None
    notes: tuple = ()


def _as_bool_stack(vol: Volume) -> np.ndarray:
    stack = vol.stack()
    if not np.all((stack == 0.0) | (stack == 1.0)):
        raise InvalidParams("metric volumes must be binary")
    return stack > 0.0


def _check_pair(pred: Volume, gt: Volume):
    if pred.n_slices != gt.n_slices or pred.shape != gt.shape:
        raise DimensionMismatch(
            f"pred {pred.n_slices}x{pred.shape} vs gt {gt.n_slices}x{gt.shape}"
        )
    return _as_bool_stack(pred), _as_bool_stack(gt)


def dsc3d(pred: Volume, gt: Volume) -> float:
    """Dice similarity coefficient in percent; 100 when both are empty."""
    p, g = _check_pair(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return float(100.0 * 2.0 * np.logical_and(p, g).sum() / denom)


def arvd(pred: Volume, gt: Volume) -> float:
    """Absolute relative volume difference in percent of the reference."""
    p, g = _check_pair(pred, gt)
    voxel_mm3 = pred.spacing[0] ** 2 * pred.spacing[1]
    v_gt = g.sum() * voxel_mm3
    if v_gt == 0:
        raise EmptyReference("aRVD undefined for an empty reference mask")
    v_pred = p.sum() * voxel_mm3
    return float(100.0 * abs(v_pred - v_gt) / v_gt)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """(m, 3) integer coordinates (z, y, x) of 6-connectivity boundary voxels."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (1, -1):
            sl = [slice(1, -1)] * 3
            sl[axis] = slice(2, None) if shift == 1 else slice(None, -2)
            interior = np.logical_and(interior, padded[tuple(sl)])
    return np.argwhere(np.logical_and(mask, np.logical_not(interior)))


def _directed_max_min(a_mm: np.ndarray, b_mm: np.ndarray) -> float:
    # max over a of min over b; chunked to bound the pairwise matrix size
    worst = 0.0
    for start in range(0, len(a_mm), 512):
        chunk = a_mm[start : start + 512]
        diff = chunk[:, None, :] - b_mm[None, :, :]
        d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        worst = max(worst, float(np.sqrt(d2.min(axis=1)).max()))
    return worst


def hausdorff(pred: Volume, gt: Volume, spacing) -> float:
    """Symmetric Hausdorff distance between boundary voxel sets, in mm.

    spacing is (sx, sy, sz) mm per voxel along x, y, and the slice axis.
    """
    p, g = _check_pair(pred, gt)
    sx, sy, sz = (float(v) for v in spacing)
    if min(sx, sy, sz) <= 0:
        raise InvalidParams("spacing components must be positive")
    if not p.any() or not g.any():
        raise EmptyMask("Hausdorff distance needs two non-empty masks")
    scale = np.array([sz, sy, sx])  # boundary coords are (z, y, x)
    bp = boundary_voxels(p) * scale
    bg = boundary_voxels(g) * scale
    return max(_directed_max_min(bp, bg), _directed_max_min(bg, bp))


def partition_regions(vol: Volume) -> tuple[Volume, Volume, Volume]:
    """Split slices into (apex, mid, base) thirds that reassemble the volume."""
    s = vol.n_slices
    if s < 3:
        raise TooFewSlices(f"region partition needs >= 3 slices, got {s}")
    first = -(-s // 3)  # ceil
    last = s // 3
    apex = Volume(vol.slices[:first], vol.spacing)
    mid = Volume(vol.slices[first : s - last], vol.spacing)
    base = Volume(vol.slices[s - last :], vol.spacing)
    return apex, mid, base


def evaluate_case(pred: Volume, gt: Volume, spacing) -> list[MetricRecord]:
    """All three metrics on the apex, base, and whole volume.

    Undefined values are reported as None with a note naming the
    convention that fired (EmptyReference for aRVD, EmptyMask for HD).
    """
    _check_pair(pred, gt)
    pred_apex, _, pred_base = partition_regions(pred)
    gt_apex, _, gt_base = partition_regions(gt)
    records = []
    for region, p_vol, g_vol in (
        ("apex", pred_apex, gt_apex),
        ("base", pred_base, gt_base),
        ("whole", pred, gt),
    ):
        notes = []
        dsc = dsc3d(p_vol, g_vol)
        try:
            rvd = arvd(p_vol, g_vol)
        except EmptyReference:
            rvd = None
            notes.append("EmptyReference")
        try:
            hd = hausdorff(p_vol, g_vol, spacing)
        except EmptyMask:
            hd = None
            notes.append("EmptyMask")
        records.append(
            MetricRecord(
                region=region,
                dsc_percent=dsc,
                arvd_percent=rvd,
                hd_mm=hd,
                notes=tuple(notes),
            )
        )
    return records


METRICS_CSV_HEADER = ["case_id", "region", "dsc_percent", "arvd_percent", "hd_mm"]


def metrics_to_csv(per_case: dict[str, list[MetricRecord]]) -> str:
    """One row per case and region, cases in sorted id order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_CSV_HEADER)
    for case_id in sorted(per_case):
        for rec in per_case[case_id]:
            writer.writerow(
                [
                    case_id,
                    rec.region,
                    f"{rec.dsc_percent:.6f}",
                    "" if rec.arvd_percent is None else f"{rec.arvd_percent:.6f}",
                    "" if rec.hd_mm is None else f"{rec.hd_mm:.6f}",
                ]
            )
    return buf.getvalue()
