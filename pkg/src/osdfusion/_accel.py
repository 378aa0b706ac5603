"""Numba acceleration switch.

Hot kernels (assignment solver, Gaussian log-density evaluation) are written
as plain loops and compiled with numba when available. Setting the
environment variable ``OSDFUSION_DISABLE_NUMBA`` to any non-empty value
selects the pure-numpy fallback path instead; results are identical up to
floating-point rounding. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and not os.environ.get("OSDFUSION_DISABLE_NUMBA")


def maybe_njit(func=None, **kwargs):
    """Apply ``numba.njit`` when acceleration is enabled, else return the
    function unchanged (it then runs as interpreted numpy code)."""

    def wrap(f):
        if NUMBA_ENABLED:
            kwargs.setdefault("cache", True)
            return _njit(**kwargs)(f)
        return f

    if func is not None:
        return wrap(func)
    return wrap
