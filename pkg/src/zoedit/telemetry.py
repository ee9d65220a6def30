"""Global instrumentation: pass counters, matmul FLOPs, tracked memory.

Everything the acceptance checks lean on funnels through here: the engine
bumps `forward_calls` and `matmul_flops`, the reference trainer bumps
`backward_calls`, and the editor asserts the backward counter never moves
while it runs. Counters are process-global and not thread-safe; the engine
itself never spawns threads.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass


@dataclass
class Counters:
    forward_calls: int = 0
    backward_calls: int = 0
    matmul_flops: int = 0

    def copy(self) -> "Counters":
        return Counters(self.forward_calls, self.backward_calls, self.matmul_flops)


COUNTERS = Counters()


def reset_counters() -> None:
    COUNTERS.forward_calls = 0
    COUNTERS.backward_calls = 0
    COUNTERS.matmul_flops = 0


def add_matmul_flops(m: int, k: int, n: int) -> None:
    """Record one (m,k) @ (k,n) product: 2*m*k*n flops."""
    COUNTERS.matmul_flops += 2 * m * k * n


class CounterDelta:
    """Context manager capturing counter deltas over a region.

    >>> with CounterDelta() as d:
    ...     run_something()
    >>> d.forward_calls
    """

    def __enter__(self) -> "CounterDelta":
        self._start = COUNTERS.copy()
        return self

    def __exit__(self, *exc) -> None:
        self.forward_calls = COUNTERS.forward_calls - self._start.forward_calls
        self.backward_calls = COUNTERS.backward_calls - self._start.backward_calls
        self.matmul_flops = COUNTERS.matmul_flops - self._start.matmul_flops


class MemoryTracker:
    """Peak traced allocation (bytes) over a region, via tracemalloc.

    numpy registers its buffers with tracemalloc, so array temporaries are
    included. Peak is relative to the allocation level at region entry.
    """

    def __enter__(self) -> "MemoryTracker":
        self._started_here = not tracemalloc.is_tracing()
        if self._started_here:
            tracemalloc.start()
        tracemalloc.reset_peak()
        self._base = tracemalloc.get_traced_memory()[0]
        return self

    def __exit__(self, *exc) -> None:
        _, peak = tracemalloc.get_traced_memory()
        self.peak_bytes = max(0, peak - self._base)
        if self._started_here:
            tracemalloc.stop()


class Timer:
    def __enter__(self) -> "Timer":
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed_s = time.perf_counter() - self._t0
