"""Core raster types and intensity preprocessing.

Conventions used throughout the package:

* arrays are float64, row-major, shape (height, width), indexed [y, x]
* pixel centers sit at integer coordinates
* all values are immutable after construction (arrays are write-locked)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstantImage, DegenerateTarget, DimensionMismatch, InvalidParams


def _as_grid_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise InvalidParams(f"grid data must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidParams(f"grid must be at least 1x1, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image2D:
    """Scalar intensity grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_grid_array(self.data)
        if not np.all(np.isfinite(arr)):
            raise InvalidParams("image intensities must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap2D:
    """Soft label grid with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_grid_array(self.data)
        if not np.all(np.isfinite(arr)):
            raise InvalidParams("label values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidParams("label values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def is_binary(self) -> bool:
        """True iff every value is exactly 0 or 1."""
        d = self.data
        return bool(np.all((d == 0.0) | (d == 1.0)))


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement in pixel units.

    dx moves samples along x (columns), dy along y (rows); the transform
    module applies them by backward sampling.
    """

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = _as_grid_array(self.dx)
        dy = _as_grid_array(self.dy)
        if dx.shape != dy.shape:
            raise DimensionMismatch(f"dx {dx.shape} vs dy {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise InvalidParams("displacements must be finite")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zero(cls, width: int, height: int) -> "DisplacementField":
        z = np.zeros((height, width))
        return cls(z, z.copy())

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


@dataclass(frozen=True)
class Volume:
    """Ordered slice stack with physical spacing (in-plane mm/px, slice mm)."""

    slices: tuple
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        slices = tuple(self.slices)
        if len(slices) < 1:
            raise InvalidParams("a volume needs at least one slice")
        shape = slices[0].shape
        for s in slices[1:]:
            if s.shape != shape:
                raise DimensionMismatch(
                    f"slice shapes differ: {shape} vs {s.shape}"
                )
        spacing = tuple(float(v) for v in self.spacing)
        if len(spacing) != 2 or any(v <= 0.0 for v in spacing):
            raise InvalidParams("spacing must be two positive values")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "spacing", spacing)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices[0].shape

    def stack(self) -> np.ndarray:
        """(n_slices, height, width) array of the slice data."""
        return np.stack([s.data for s in self.slices])

    def spacing_triple(self) -> tuple[float, float, float]:
        """(sx, sy, sz) in mm; in-plane spacing is isotropic."""
        return (self.spacing[0], self.spacing[0], self.spacing[1])


def normalize(img: Image2D) -> Image2D:
    """Standardize to zero mean and unit variance (population estimator)."""
    arr = img.data
    if arr.min() == arr.max():
        raise ConstantImage("cannot normalize a constant image")
    mean = arr.mean()
    std = arr.std()
    return Image2D((arr - mean) / std)


def _resize_array(arr: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resample with pixel centers aligned at the grid corners."""
    src_h, src_w = arr.shape
    sx = np.linspace(0.0, src_w - 1.0, w)
    sy = np.linspace(0.0, src_h - 1.0, h)
    x0 = np.minimum(np.floor(sx).astype(np.intp), src_w - 2) if src_w > 1 else np.zeros(w, np.intp)
    y0 = np.minimum(np.floor(sy).astype(np.intp), src_h - 2) if src_h > 1 else np.zeros(h, np.intp)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = (sx - x0)[None, :]
    fy = (sy - y0)[:, None]
    s00 = arr[np.ix_(y0, x0)]
    s01 = arr[np.ix_(y0, x1)]
    s10 = arr[np.ix_(y1, x0)]
    s11 = arr[np.ix_(y1, x1)]
    top = s00 + fx * (s01 - s00)
    bot = s10 + fx * (s11 - s10)
    return top + fy * (bot - top)


def resize(img: Image2D, w: int, h: int) -> Image2D:
    """Bilinear resample to (w, h). Output values stay within the input range."""
    if w < 2 or h < 2:
        raise DegenerateTarget(f"resize target must be at least 2x2, got {w}x{h}")
    if (img.width, img.height) == (w, h):
        return img
    return Image2D(_resize_array(img.data, w, h))


def resize_label(label: LabelMap2D, w: int, h: int) -> LabelMap2D:
    """Bilinear resample of a soft label map; output clipped to [0, 1]."""
    if w < 2 or h < 2:
        raise DegenerateTarget(f"resize target must be at least 2x2, got {w}x{h}")
    if (label.width, label.height) == (w, h):
        return label
    return LabelMap2D(np.clip(_resize_array(label.data, w, h), 0.0, 1.0))


def threshold(label: LabelMap2D, t: float) -> LabelMap2D:
    """Hard segmentation: 1 where value >= t, else 0. Requires t in (0, 1)."""
    if not 0.0 < t < 1.0:
        raise InvalidParams(f"threshold must lie in (0, 1), got {t}")
    return LabelMap2D((label.data >= t).astype(np.float64))
