"""Optional numba acceleration.

Set ``MERGEPROBE_DISABLE_NUMBA=1`` to force the pure-numpy paths (also used
automatically when numba is not importable).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
NUMBA_ENABLED = HAVE_NUMBA and os.environ.get("MERGEPROBE_DISABLE_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)


def njit(fn):
    """Compile ``fn`` with numba if available, else return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)
