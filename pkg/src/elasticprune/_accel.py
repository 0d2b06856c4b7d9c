"""Numba switch.

Kernels are written once for numba's nopython mode and also run as plain
numpy when numba is missing or disabled with ``ELASTICPRUNE_NUMBA=0``.
"""

import os

_FLAG = os.environ.get("ELASTICPRUNE_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(fn=None, **options):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if fn is None:
        return lambda f: njit(f, **options)
    if _numba is None:
        return fn
    return _numba.njit(cache=True, **options)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
