"""Warp kernel backend selection.

The compiled Cython extension is preferred; the numpy implementation is
the fallback. Set ATLASEG_PURE_PYTHON=1 to force the fallback (used by
the benchmark and the backend-equivalence tests).
"""

import os

if os.environ.get("ATLASEG_PURE_PYTHON", "") not in ("", "0"):
    from . import _warp_np as _impl
else:
    try:
        from . import _warp_cy as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _warp_np as _impl

BACKEND = _impl.BACKEND
warp_bilinear = _impl.warp_bilinear
warp_with_gradient = _impl.warp_with_gradient

__all__ = ["BACKEND", "warp_bilinear", "warp_with_gradient"]
