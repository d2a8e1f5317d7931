"""Hot loops: gradient-sharing stencil, Jacobi inpainting, farthest-point coreset.

The Cython extension is used when it was built; otherwise (or with
``F2PAD_PURE_PYTHON=1``) the numpy reference is selected.  ``IMPLEMENTATION``
names the active one.
"""
import os

from . import _reference as reference

compiled = None
if os.environ.get("F2PAD_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _compiled as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else reference
IMPLEMENTATION = "compiled" if compiled is not None else "reference"

sharing_weights = _impl.sharing_weights
share = _impl.share
jacobi_inpaint = _impl.jacobi_inpaint
farthest_point = _impl.farthest_point

__all__ = [
    "IMPLEMENTATION",
    "compiled",
    "reference",
    "sharing_weights",
    "share",
    "jacobi_inpaint",
    "farthest_point",
]
