"""Optional numba acceleration.

Set ``GEOSERVO_DISABLE_NUMBA=1`` to run every kernel as plain numpy/Python.
The flag is read once at import time.
"""

import os

_disabled = os.environ.get("GEOSERVO_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _disabled:
        raise ImportError
    import numba

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or a no-op decorator when numba is off."""
    if NUMBA_ENABLED:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
