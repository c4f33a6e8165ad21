"""Optional numba acceleration.

Kernels in :mod:`scaleloss.kernels` come in two flavours: a numba ``@njit``
loop version and a vectorised numpy version. The numba path is used when
numba imports and ``SCALELOSS_PURE_NUMPY`` is not set to a truthy value.
"""

import os

PURE_NUMPY_ENV = "SCALELOSS_PURE_NUMPY"


def _noop_jit(*args, **kwargs):
    """Stand-in for ``numba.njit`` that returns the function untouched."""
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


def _env_disabled():
    return os.environ.get(PURE_NUMPY_ENV, "").strip().lower() in ("1", "true", "yes", "on")


# True if importing numba succeeded
HAVE_NUMBA = _have_numba()

# True if the numba kernels are the ones dispatched to
USE_NUMBA = HAVE_NUMBA and not _env_disabled()

if HAVE_NUMBA:
    from numba import njit as _numba_njit

    def njit(f):
        return _numba_njit(cache=True, nogil=True)(f)

else:
    njit = _noop_jit
