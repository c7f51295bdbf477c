"""Optional numba acceleration.

Set ``TGPOLAB_NUMBA=0`` to force the pure-numpy kernels even when numba is
importable. The flag is read once at import time.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TGPOLAB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is installed, else identity."""
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn
