"""
Wall-clock measurement helpers for latency calibration and timed evaluation.
"""

import statistics
import time
from typing import Callable, Iterable, List


def timed() -> Callable[[], float]:
    """
    Return a function that yields elapsed milliseconds when called.

    Usage:
        timer = timed()
        ... do work ...
        elapsed_ms = timer()
    """
    start = time.perf_counter()

    def end() -> float:
        return (time.perf_counter() - start) * 1000.0

    return end


def timer_resolution_ms() -> float:
    """Resolution of the perf_counter clock in milliseconds"""
    return time.get_clock_info("perf_counter").resolution * 1000.0


def median_ms(samples: Iterable[float]) -> float:
    values: List[float] = list(samples)
    if not values:
        raise ValueError("median of an empty sample set")
    return float(statistics.median(values))
