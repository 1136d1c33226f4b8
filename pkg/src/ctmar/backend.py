"""Kernel backend selection.

Hot numeric kernels (the fan-beam projector family) exist twice: a numba
@njit implementation and a pure-numpy fallback. Selection order:

  1. ``CTMAR_NO_NUMBA=1`` in the environment forces the numpy path.
  2. Otherwise numba is used when importable.

``bench/bench_kernels.py`` compares the two paths on identical inputs.
"""

import os

NUMBA_AVAILABLE = False
_FORCED_OFF = os.environ.get("CTMAR_NO_NUMBA", "").strip() in ("1", "true", "yes")

try:  # pragma: no cover - exercised implicitly on import
    if not _FORCED_OFF:
        from numba import njit, prange, set_num_threads  # noqa: F401

        NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False

if not NUMBA_AVAILABLE:
    # Dummy decorators so kernel modules import unchanged.
    def njit(*args, **kwargs):  # noqa: D103
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(func):
            return func

        return wrapper

    def prange(*args):  # noqa: D103
        return range(*args)

    def set_num_threads(n):  # noqa: D103
        pass


def use_numba():
    """True when the njit kernel path is active."""
    return NUMBA_AVAILABLE


def single_thread():
    """Pin kernels to one thread (bit-reproducibility mode)."""
    if NUMBA_AVAILABLE:
        set_num_threads(1)


def backend_name():
    return "numba" if NUMBA_AVAILABLE else "numpy"
