"""Optional numba acceleration.

Set ``MULTIRATE_DISABLE_NUMBA=1`` before import to run every kernel as plain
numpy (useful for debugging and for the benchmark comparison).
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_disabled = os.environ.get("MULTIRATE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

NUMBA_ENABLED = numba is not None and not _disabled


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when enabled, identity otherwise."""
    def wrap(f):
        if NUMBA_ENABLED:
            return numba.njit(cache=True, **kwargs)(f)
        return f

    if func is None:
        return wrap
    return wrap(func)


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"
