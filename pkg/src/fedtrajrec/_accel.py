"""Numba switch.

Set ``FEDTRAJREC_NUMBA=0`` before import to force the pure-numpy/python
kernels. Numba is also skipped automatically when it is not importable.
"""
import os

_flag = os.environ.get("FEDTRAJREC_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def njit(func):
    """Compile ``func`` with numba when enabled, else return it unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
