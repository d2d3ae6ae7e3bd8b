"""Process-level runtime knobs.

BLAS libraries read their thread-count environment variables at import
time, so :func:`apply_thread_cap` only has full effect when called before
numpy is first imported (the CLI entry point does exactly that).  Calling
it later still caps libraries that re-read the variables lazily.
"""

import os

THREAD_ENV = "MCSAGAN_THREADS"

# Every knob the common BLAS/OpenMP builds consult.
_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def thread_cap(default: int = 1) -> int:
    """Worker/BLAS thread cap from the environment (>= 1)."""
    raw = os.environ.get(THREAD_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)


def apply_thread_cap(n: int | None = None) -> int:
    """Pin BLAS/OpenMP pools to ``n`` threads (env default: 1).

    Returns the cap actually applied.  Deterministic reruns require a
    fixed cap; the training loop assumes it has been applied.
    """
    if n is None:
        n = thread_cap()
    for var in _BLAS_VARS:
        os.environ[var] = str(n)
    return n
