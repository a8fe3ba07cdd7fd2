"""Numba acceleration switch.

Hot numeric kernels in this package are compiled with numba when it is
installed and not disabled.  Setting the environment variable
``NLOSLOC_NUMBA=0`` (before import) selects the pure-numpy fallback path:
the same functions run uncompiled.  ``benchmarks/bench_kernels.py``
compares the two paths.
"""

import os

try:
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("NLOSLOC_NUMBA", "1") not in ("0", "false", "no")


def maybe_njit(*args, **kwargs):
    """Apply numba.njit unless the fallback path is selected."""

    def decorate(fn):
        if USE_NUMBA:
            return _njit(*args, **kwargs)(fn)
        return fn

    return decorate


def python_impl(fn):
    """Return the uncompiled implementation of a (possibly) jitted function."""
    return getattr(fn, "py_func", fn)
