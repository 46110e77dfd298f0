"""Small shared utilities: ordered parallel map and RSS sampling."""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor

# Instrumentation: counts pool-backed map calls so tests can verify that
# threads=1 runs use no worker parallelism at all.
PARALLEL_INVOCATIONS = 0


def parallel_map(fn, items, threads: int = 1) -> list:
    """Apply fn over items preserving order; a thread pool only when threads > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    global PARALLEL_INVOCATIONS
    PARALLEL_INVOCATIONS += 1
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class PeakRssSampler:
    """Samples resident set size on a 50 ms cadence while running."""

    def __init__(self, interval_s: float = 0.05):
        import psutil

        self._proc = psutil.Process()
        self._interval = interval_s
        self._stop = threading.Event()
        self._thread = None
        self.peak_bytes = 0

    def __enter__(self):
        self.peak_bytes = self._proc.memory_info().rss
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            rss = self._proc.memory_info().rss
            if rss > self.peak_bytes:
                self.peak_bytes = rss
            time.sleep(self._interval)

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        rss = self._proc.memory_info().rss
        if rss > self.peak_bytes:
            self.peak_bytes = rss
        return False
