"""Backend switch for the compiled kernels.

Set ``SPARSE2DENSE_NUMBA=0`` in the environment to force the pure-numpy
fallback paths, e.g. when numba is unavailable or while debugging.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAS_NUMBA = numba is not None
USE_NUMBA = HAS_NUMBA and os.environ.get("SPARSE2DENSE_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, else the function itself."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True)(func)
