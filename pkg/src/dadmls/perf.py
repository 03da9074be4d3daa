"""Process-level allocator tuning.

The training loop allocates many short-lived arrays of a few hundred KB.
glibc serves those with fresh ``mmap`` calls by default, and the resulting
page faults can cost more than the arithmetic.  Raising the mmap and trim
thresholds keeps them on the heap.  Opt-in, since it changes process state.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_applied = False


def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 128 << 20) -> bool:
    """Return True when the thresholds were set (glibc only; a no-op elsewhere)."""
    global _applied
    if _applied:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = bool(mallopt(_M_MMAP_THRESHOLD, mmap_threshold)) and bool(mallopt(_M_TRIM_THRESHOLD, trim_threshold))
    _applied = ok
    return ok
