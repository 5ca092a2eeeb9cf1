"""Pick the compiled RHS kernel when it is importable, numpy otherwise.

``FMOHEOM_BACKEND=python`` forces the fallback; ``=cython`` makes a missing
extension an import error instead of a silent fallback.
"""

import os

from . import _rhs_py

_requested = os.environ.get("FMOHEOM_BACKEND", "").strip().lower()

try:
    from . import _rhs_cy
except ImportError:
    if _requested == "cython":
        raise
    _rhs_cy = None

KERNELS = {"python": _rhs_py.heom_rhs}
if _rhs_cy is not None:
    KERNELS["cython"] = _rhs_cy.heom_rhs

if _requested == "python" or _rhs_cy is None:
    DEFAULT_BACKEND = "python"
else:
    DEFAULT_BACKEND = "cython"


def get_kernel(name=None):
    name = name or DEFAULT_BACKEND
    try:
        return KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable HEOM backend {name!r}; "
                         f"available: {sorted(KERNELS)}") from None
