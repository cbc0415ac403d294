"""Optional numba acceleration.

Kernels are written once in a numba-compatible numpy subset.  When numba is
missing, or ``FASTSLOW_DISABLE_NUMBA`` is set to a truthy value before import,
``njit`` returns the plain Python function and the same code runs on numpy.
"""

import os

_FLAG = os.environ.get("FASTSLOW_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by FASTSLOW_DISABLE_NUMBA")
    import numba

    NUMBA_ENABLED = True
except ImportError:
    numba = None
    NUMBA_ENABLED = False


def njit(func=None, **kwargs):
    """``numba.njit(cache=True, ...)`` or identity, depending on availability."""
    opts = {"cache": True}
    opts.update(kwargs)

    def wrap(f):
        if NUMBA_ENABLED:
            return numba.njit(**opts)(f)
        return f

    if func is None:
        return wrap
    return wrap(func)


def backend():
    return "numba" if NUMBA_ENABLED else "numpy"
