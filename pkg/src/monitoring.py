"""
In-process run metrics for FedCPC.

The federation server times each round, counts the clients it aggregated and
the update bytes it received, and every client times its local epochs. The
pipeline empties the collector when a run starts and folds the per-name
summary into run_info.json next to a psutil snapshot of the host. Nothing here influences any checkpoint byte.
"""

import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import psutil

from .datetime_utils import utc_now_iso
from .logging_config import get_logger

logger = get_logger(__name__)


class MetricType(Enum):
    COUNTER = "counter"
    GAUGE = "gauge"
    TIMER = "timer"


@dataclass(frozen=True)
class Metric:
    name: str
    value: float
    metric_type: MetricType
    timestamp: str
    tags: dict[str, str] = field(default_factory=dict)


class MetricsCollector:
    """
    Thread-safe, bounded buffer of metric points.

    Client threads of an in-process federation record into the same
    collector as the server, so every write takes the lock. Once
    ``max_metrics`` points are held the oldest are dropped.
    """

    def __init__(self, max_metrics: int = 10000) -> None:
        self._points: deque[Metric] = deque(maxlen=max_metrics)
        self._lock = threading.Lock()
        self._started = time.monotonic()

    def counter(self, name: str, value: float = 1, **tags: Any) -> None:
        self.record(name, value, MetricType.COUNTER, tags)

    def gauge(self, name: str, value: float, **tags: Any) -> None:
        self.record(name, value, MetricType.GAUGE, tags)

    def timer(self, name: str, **tags: Any) -> "TimerContext":
        """``with metrics.timer("federated_round", round=3):`` records seconds."""
        return TimerContext(self, name, tags)

    def record(self, name: str, value: float, metric_type: MetricType, tags: dict[str, Any]) -> None:
        point = Metric(name, value, metric_type, utc_now_iso(), {k: str(v) for k, v in tags.items()})
        with self._lock:
            self._points.append(point)
        logger.debug("metric_recorded", metric=name, value=value, kind=metric_type.value, **point.tags)

    def get_metrics(self, name_filter: str | None = None) -> list[Metric]:
        with self._lock:
            points = list(self._points)
        return [p for p in points if name_filter in p.name] if name_filter else points

    def get_metric_summary(self) -> dict[str, Any]:
        points = self.get_metrics()
        grouped: dict[str, list[float]] = {}
        for point in points:
            grouped.setdefault(point.name, []).append(point.value)
        return {
            "total_metrics": len(points),
            "uptime_seconds": time.monotonic() - self._started,
            "metric_stats": {
                name: {
                    "count": len(values),
                    "latest": values[-1],
                    "min": min(values),
                    "max": max(values),
                    "mean": sum(values) / len(values),
                    "total": sum(values),
                }
                for name, values in grouped.items()
            },
        }

    def reset(self) -> None:
        with self._lock:
            self._points.clear()
            self._started = time.monotonic()


class TimerContext:
    def __init__(self, collector: MetricsCollector, name: str, tags: dict[str, Any]) -> None:
        self.collector = collector
        self.name = name
        self.tags = tags
        self.elapsed: float | None = None
        self._start = 0.0

    def __enter__(self) -> "TimerContext":
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self.elapsed = time.perf_counter() - self._start
        self.collector.record(self.name, self.elapsed, MetricType.TIMER, self.tags)


metrics = MetricsCollector()


def get_system_metrics() -> dict[str, Any]:
    """Host snapshot for run_info.json: CPUs, memory and this process's RSS."""
    memory = psutil.virtual_memory()
    process = psutil.Process(os.getpid())
    mib = 1024 * 1024
    return {
        "timestamp": utc_now_iso(),
        "system": {
            "cpu_count": psutil.cpu_count(logical=True),
            "memory_total_mb": memory.total // mib,
            "memory_available_mb": memory.available // mib,
            "memory_percent": memory.percent,
        },
        "application": {
            "memory_rss_mb": process.memory_info().rss // mib,
            "threads": process.num_threads(),
        },
    }
