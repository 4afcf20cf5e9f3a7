"""Process-level performance tuning.

Batch scoring allocates many short-lived ~1 MB numpy temporaries.  With
glibc's default thresholds each one is backed by a fresh mmap (or trimmed
back to the kernel on free), so every batch pays page-fault costs that can
dominate the arithmetic on hardened kernels.  Raising the mmap and trim
thresholds keeps those buffers on the heap for reuse.

BLAS thread pools are similarly counterproductive here: the model math is
thousands of small matrix products, and waking worker threads costs more
than the arithmetic.  The scoring pipeline is deterministic single-threaded,
which is also what the reproducibility contract assumes.
"""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_applied = False


def tune_allocator() -> bool:
    """Keep large freed buffers reusable instead of returning them per call.

    Safe to call repeatedly; returns True when the tuning took effect.  Only
    glibc exposes mallopt, so this is a silent no-op elsewhere.
    """
    global _applied
    if _applied:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        ok = (
            libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
            and libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
            and libc.mallopt(_M_TOP_PAD, 1 << 26)
        )
    except (OSError, AttributeError, TypeError):
        return False
    _applied = bool(ok)
    return _applied


def set_thread_budget(n: int = 1) -> None:
    """Cap BLAS worker threads (default: single-threaded, deterministic)."""
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=max(1, int(n)))


def tune(threads: int = 1) -> None:
    """Apply both the allocator and the thread-budget tuning."""
    tune_allocator()
    set_thread_budget(threads)
