"""Numba switch for the hot kernels.

Every accelerated kernel has a pure-numpy twin. Set ``XVIEWGEO_NUMBA=0`` to
force the numpy path (useful for debugging or when numba is unavailable).
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("XVIEWGEO_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
