"""Thermal breast image segmentation laboratory."""

import ctypes as _ctypes

__version__ = "0.1.0"


def _tune_allocator():
    # Keep big numpy temporaries on the heap instead of mmap/munmap churn;
    # the conv layers allocate and free multi-MB patch matrices every step.
    try:
        libc = _ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_allocator()
