"""
pipmm profiling helpers.

Counters for matmul FLOPs (grouped by named scope), live float accounting
for peak-memory measurement, wall-clock medians and resident memory. All
counters are thread-local so concurrent evaluation workers do not interfere.
"""

import threading
import time
import weakref
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List

import numpy as np
import psutil

_local = threading.local()


@dataclass
class FlopCounter:
    """Matmul FLOPs (2*m*k*n per product) accumulated per scope."""
    by_scope: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    calls: int = 0

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def get(self, scope: str) -> int:
        return self.by_scope.get(scope, 0)


class FloatMeter:
    """Tracks the number of live float64 values held by tensors."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self._lock = threading.Lock()

    def add(self, count: int) -> None:
        with self._lock:
            self.live += count
            if self.live > self.peak:
                self.peak = self.live

    def release(self, count: int) -> None:
        with self._lock:
            self.live -= count


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    previous = getattr(_local, 'flops', None)
    counter = FlopCounter()
    _local.flops = counter
    try:
        yield counter
    finally:
        _local.flops = previous


@contextmanager
def flop_scope(name: str) -> Iterator[None]:
    previous = getattr(_local, 'scope', 'other')
    _local.scope = name
    try:
        yield
    finally:
        _local.scope = previous


def record_matmul(m: int, k: int, n: int) -> None:
    counter = getattr(_local, 'flops', None)
    if counter is not None:
        counter.by_scope[getattr(_local, 'scope', 'other')] += 2 * m * k * n
        counter.calls += 1


@contextmanager
def measure_live_floats() -> Iterator[FloatMeter]:
    previous = getattr(_local, 'meter', None)
    meter = FloatMeter()
    _local.meter = meter
    try:
        yield meter
    finally:
        _local.meter = previous


def track_tensor(tensor: Any) -> None:
    meter = getattr(_local, 'meter', None)
    if meter is None:
        return
    size = int(tensor.data.size)
    meter.add(size)
    weakref.finalize(tensor, meter.release, size)


def median_wall_ms(fn: Callable[[], Any], runs: int = 5, warmup: int = 1) -> float:
    """Median wall-clock milliseconds of ``fn`` over ``runs`` after ``warmup``."""
    for _ in range(warmup):
        fn()
    samples: List[float] = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(samples))


def resident_memory_mb() -> float:
    """Resident set size of this process in MB."""
    try:
        return psutil.Process().memory_info().rss / 1024 / 1024
    except psutil.Error:
        return 0.0
