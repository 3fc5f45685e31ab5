"""Optional numba acceleration.

Set ``OCPOLICY_DISABLE_NUMBA=1`` to run every kernel as plain numpy code.
Jitted kernels keep the original function on ``.py_func`` so both paths
can be compared in one process.
"""
import os

_DISABLED = os.environ.get("OCPOLICY_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    USE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    USE_NUMBA = False


def kernel(fn):
    if USE_NUMBA:
        return _njit(cache=True, nogil=True)(fn)
    return fn


def py(fn):
    """Return the pure-numpy version of a kernel."""
    return getattr(fn, "py_func", fn)
