"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``CAUSALGCL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("CAUSALGCL_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

spmm_csr = _impl.spmm_csr
kmeans_assign = _impl.kmeans_assign


def available_backends():
    """Name -> module for every backend importable in this environment."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
