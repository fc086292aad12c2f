"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``CIVAE_PURE_PYTHON=1`` to force the numpy path.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("CIVAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def alpha_grid_values(e0, e1, le_e, lp_e, le_p, lp_p, alphas, backend=None):
    """ELBO(alpha) on a grid for a batch of rows; arrays shaped (rows, draws)."""
    impl = {"python": _kernels_py, None: _impl}.get(backend, _impl)
    if backend == "cython" and BACKEND != "cython":
        raise RuntimeError("compiled kernels are not available")
    args = [_c(v) for v in (e0, e1, le_e, lp_e, le_p, lp_p, alphas)]
    return impl.alpha_grid_values(*args)
