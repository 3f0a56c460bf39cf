"""Backend selection for the pixel kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``PHENOFACTOR_PURE_PYTHON=1`` to force the fallback.
"""
import os
from types import ModuleType

from phenofactor import _pykernels

_compiled: ModuleType | None = None
if os.environ.get("PHENOFACTOR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from phenofactor import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"


def backends() -> dict[str, ModuleType]:
    """All importable backends, keyed by name."""
    found = {"python": _pykernels}
    if _compiled is not None:
        found["cython"] = _compiled
    return found


masked_color_sums = _impl.masked_color_sums
fill_convex_polygon = _impl.fill_convex_polygon
fill_ellipse = _impl.fill_ellipse
warp_affine_bilinear = _impl.warp_affine_bilinear
