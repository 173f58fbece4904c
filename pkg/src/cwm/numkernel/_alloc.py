"""Keep glibc from returning large activation buffers to the OS after every op.

Each freed multi-megabyte array otherwise goes back through munmap and the
next allocation page-faults it in again, which roughly doubles the cost of
elementwise kernels at training batch sizes.
"""

import ctypes
import ctypes.util
import os

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_malloc() -> bool:
    if os.environ.get("CWM_NO_MALLOPT"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1
    ok &= mallopt(_M_TRIM_THRESHOLD, 1 << 31) == 1
    return bool(ok)


TUNED = tune_malloc()
