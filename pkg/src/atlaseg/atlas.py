"""Atlas storage, feature extraction, and similarity-based selection.

Feature vectors are hand crafted, 71 dimensions: a 64-bin min-max
intensity histogram normalized to unit mass, then seven scalar moments
(mean, variance, skew, kurtosis, centroid-x, centroid-y, radial second
moment). Centroids and the radial moment use intensities shifted to be
nonnegative as weights and are expressed in [0, 1] grid coordinates, so
they respond to where the bright content sits rather than to its scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConstantImage, DimensionMismatch, InvalidParams, LengthMismatch, NOutOfRange
from .grid import Image2D, LabelMap2D

HISTOGRAM_BINS = 64
FEATURE_LENGTH = HISTOGRAM_BINS + 7


def extract_features(img: Image2D) -> np.ndarray:
    """71-dim feature vector; raises ConstantImage on a flat image."""
    arr = img.data
    lo, hi = arr.min(), arr.max()
    if lo == hi:
        raise ConstantImage("features need intensity variation")
    hist, _ = np.histogram(arr, bins=HISTOGRAM_BINS, range=(lo, hi))
    hist = hist.astype(np.float64) / arr.size

    mean = arr.mean()
    var = arr.var()
    centered = arr - mean
    std = np.sqrt(var)
    skew = np.mean(centered**3) / std**3
    kurt = np.mean(centered**4) / var**2

    h, w = arr.shape
    weights = arr - lo
    total = weights.sum()
    xs = np.arange(w) / max(w - 1, 1)
    ys = np.arange(h) / max(h - 1, 1)
    cx = float(np.sum(weights.sum(axis=0) * xs) / total)
    cy = float(np.sum(weights.sum(axis=1) * ys) / total)
    r2 = float(
        np.sum(weights * ((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2)) / total
    )
    return np.concatenate([hist, [mean, var, skew, kurt, cx, cy, r2]])


@dataclass(frozen=True)
class AtlasEntry:
    id: str
    image: Image2D
    label: LabelMap2D
    features: np.ndarray

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise DimensionMismatch(
                f"atlas {self.id}: image {self.image.shape} vs label {self.label.shape}"
            )
        if not self.label.is_binary():
            raise InvalidParams(f"atlas {self.id}: label must be binary")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1 or not np.all(np.isfinite(feats)):
            raise InvalidParams(f"atlas {self.id}: features must be a finite vector")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @classmethod
    def build(cls, id: str, image: Image2D, label: LabelMap2D) -> "AtlasEntry":
        return cls(id=id, image=image, label=label, features=extract_features(image))


@dataclass(frozen=True)
class AtlasSet:
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if len(entries) < 2:
            raise InvalidParams("an atlas set needs at least 2 entries")
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise InvalidParams("atlas ids must be unique")
        shape = entries[0].image.shape
        flen = entries[0].features.shape[0]
        for e in entries[1:]:
            if e.image.shape != shape:
                raise DimensionMismatch(f"atlas {e.id}: dims differ from the set")
            if e.features.shape[0] != flen:
                raise LengthMismatch(f"atlas {e.id}: feature length differs")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def by_id(self, id: str) -> AtlasEntry:
        for e in self.entries:
            if e.id == id:
                return e
        raise KeyError(id)

    def subset(self, ids) -> "AtlasSet":
        return AtlasSet(tuple(self.by_id(i) for i in ids))


def feature_stats(atlas_set: AtlasSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population std over the set's features.

    Dimensions with zero spread get std 1 so they contribute plain
    differences instead of dividing by zero.
    """
    feats = np.stack([e.features for e in atlas_set.entries])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0.0] = 1.0
    return mean, std


def feature_distance(f1, f2, stats) -> float:
    """Euclidean distance between z-scored feature vectors.

    stats is the (mean, std) pair from feature_stats of the reference
    atlas set; z-scoring makes every dimension commensurate.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape:
        raise LengthMismatch(f"{f1.shape} vs {f2.shape}")
    _, std = stats
    if std.shape != f1.shape:
        raise LengthMismatch(f"stats length {std.shape} vs features {f1.shape}")
    z = (f1 - f2) / std
    return float(np.sqrt(np.sum(z * z)))


def select_atlases(target_features, atlas_set: AtlasSet, n: int) -> list[str]:
    """Ids of the n nearest atlases, ascending distance, ties by id."""
    if not 1 <= n <= len(atlas_set):
        raise NOutOfRange(f"n={n} outside [1, {len(atlas_set)}]")
    stats = feature_stats(atlas_set)
    ranked = sorted(
        atlas_set.entries,
        key=lambda e: (feature_distance(target_features, e.features, stats), e.id),
    )
    return [e.id for e in ranked[:n]]


def load_manifest(path) -> list[dict]:
    """Parse an atlas manifest: [{"id", "image": path, "label": path}, ...].

    Paths are resolved relative to the manifest file. Grid loading is left
    to the caller, which knows whether entries are single slices or volumes.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise InvalidParams(f"cannot parse manifest {path}: {e}") from e
    if not isinstance(doc, list) or not doc:
        raise InvalidParams(f"manifest {path} must be a non-empty list")
    out = []
    for item in doc:
        try:
            out.append(
                {
                    "id": str(item["id"]),
                    "image": path.parent / item["image"],
                    "label": path.parent / item["label"],
                }
            )
        except (KeyError, TypeError) as e:
            raise InvalidParams(f"manifest {path}: bad entry {item!r}") from e
    return out
