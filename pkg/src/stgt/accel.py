"""Numba switch.

Hot kernels in :mod:`stgt.kernels` come in pairs: a loop version compiled with
``numba.njit`` and a vectorised numpy version. Set ``STGT_PURE_NUMPY=1`` to
force the numpy path (also used when numba cannot be imported).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("STGT_PURE_NUMPY", "0").lower() in ("", "0", "false", "no")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
