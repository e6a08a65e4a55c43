"""JIT switch for the hot pixel loops.

Kernels are written once in the numba-compatible subset and wrapped with
:func:`njit`.  Setting ``RNNPROP_DISABLE_NUMBA=1`` (or running without numba
installed) leaves them as plain Python over numpy arrays; both paths produce
identical results.
"""

import os

_DISABLED = os.environ.get("RNNPROP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _numba_njit

    HAS_NUMBA = True
except ImportError:
    _numba_njit = None
    HAS_NUMBA = False


def njit(func):
    if HAS_NUMBA:
        return _numba_njit(cache=True, nogil=True)(func)
    return func


def python_impl(kernel):
    """Return the uncompiled Python function behind ``kernel``."""
    return getattr(kernel, "py_func", kernel)
