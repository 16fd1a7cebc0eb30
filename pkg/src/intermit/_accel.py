"""Optional numba acceleration for the hot filtering kernels.

The square-root information filter spends its time in tight per-step loops
over small dense systems, which CPython executes slowly.  When numba is
importable (and not disabled), kernels in :mod:`intermit.kernels` are
compiled with ``@njit``; otherwise the same functions run as plain
numpy/Python.  Set ``INTERMIT_NO_NUMBA=1`` to force the pure-numpy path,
e.g. for debugging or benchmarking (see ``benchmarks/bench_filter.py``).
"""

import os

ENV_FLAG = "INTERMIT_NO_NUMBA"

_disabled = os.environ.get(ENV_FLAG, "").strip().lower() in ("1", "true", "yes")

if not _disabled:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - exercised via env flag instead
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

if not NUMBA_ENABLED:

    def njit(*args, **kwargs):
        """No-op stand-in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
