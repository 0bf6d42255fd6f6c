"""Latency histograms and loop counters for the processing pipeline."""
from __future__ import annotations

import threading
from collections import defaultdict

import numpy as np

STAGES = ("decode", "bow", "matching", "prefilter", "ransac", "covariance", "pgo", "loop_total")
# log-spaced histogram edges in seconds, 0.1 ms .. 100 s
BIN_EDGES = np.logspace(-4, 2, 31)


class LatencyHistogram:
    def __init__(self):
        self.counts = np.zeros(len(BIN_EDGES) + 1, dtype=np.int64)
        self.samples: list[float] = []

    def add(self, seconds: float):
        self.counts[np.searchsorted(BIN_EDGES, seconds)] += 1
        self.samples.append(float(seconds))

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def summary(self) -> dict:
        if not self.samples:
            return {"count": 0, "mean_ms": 0.0, "std_ms": 0.0, "median_ms": 0.0, "max_ms": 0.0}
        s = np.array(self.samples) * 1e3
        return {"count": len(s), "mean_ms": float(s.mean()), "std_ms": float(s.std()),
                "median_ms": float(np.median(s)), "max_ms": float(s.max())}


class PipelineStats:
    """Thread-safe per-stage latencies plus loop counters.

    ``detected`` counts candidates that went through verification, so
    ``accepted + rejected == detected`` always holds.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.latency = defaultdict(LatencyHistogram)
        self.loops_detected = 0
        self.loops_accepted = 0
        self.loops_rejected = 0
        self.rate_limited = 0
        self.fusions = 0
        self.keyframes_processed = 0
        self.keyframes_dropped = 0

    def record(self, stage: str, seconds: float):
        with self._lock:
            self.latency[stage].add(seconds)

    def count(self, name: str, k: int = 1):
        with self._lock:
            setattr(self, name, getattr(self, name) + k)

    def loop_result(self, accepted: bool):
        with self._lock:
            self.loops_detected += 1
            if accepted:
                self.loops_accepted += 1
            else:
                self.loops_rejected += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "loops_detected": self.loops_detected, "loops_accepted": self.loops_accepted,
                "loops_rejected": self.loops_rejected, "loops_rate_limited": self.rate_limited,
                "fusions": self.fusions, "keyframes_processed": self.keyframes_processed,
                "keyframes_dropped": self.keyframes_dropped,
                "latency": {k: v.summary() for k, v in sorted(self.latency.items())},
            }
