"""Numba switch.

Set ``FASURV_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
fallback. The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("FASURV_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when enabled, otherwise ``fn`` untouched."""
    if not USE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
