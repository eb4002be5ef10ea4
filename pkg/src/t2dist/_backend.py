"""Select the compiled kernels when available, else the numpy fallback.

Set ``T2DIST_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

_force_py = os.environ.get("T2DIST_PURE_PYTHON", "").strip() not in ("", "0")

if _force_py:
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"

epg_cpmg = kernels.epg_cpmg
nnls = kernels.nnls
