"""
Tracing service: in-process counters plus optional Langfuse traces.

Counts and latencies per named operation are always kept locally; they
check how many network predictions a nested inference makes, feed the
per-command summaries and time benchmark epochs. When Langfuse keys are
configured every traced call and span is also sent as a Langfuse trace and
every event as a score.
"""

import logging
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import wraps
from typing import Any, Callable, Iterator, Optional

from langfuse import Langfuse

from src.config import Settings, settings

logger = logging.getLogger(__name__)


def build_client(config: Settings = settings) -> Optional[Langfuse]:
    """Langfuse client for ``config``, or ``None`` when its keys are not set."""
    if not (config.langfuse_public_key and config.langfuse_secret_key):
        logger.debug("Langfuse keys not set, tracing stays local")
        return None
    return Langfuse(
        public_key=config.langfuse_public_key,
        secret_key=config.langfuse_secret_key,
        host=config.langfuse_host,
    )


@dataclass
class TraceStats:
    """Accumulated statistics of one traced operation."""

    calls: int = 0
    errors: int = 0
    total_seconds: float = 0.0
    events: list[dict] = field(default_factory=list)

    @property
    def mean_ms(self) -> float:
        return 0.0 if self.calls == 0 else 1000.0 * self.total_seconds / self.calls


class TracingService:
    """Thread-safe registry of traced operations, mirrored to Langfuse when a client is set."""

    def __init__(self, client: Optional[Langfuse] = None):
        self.client = client
        self._lock = threading.Lock()
        self._stats: dict[str, TraceStats] = defaultdict(TraceStats)

    def _record(self, name: str, seconds: float, failed: bool) -> None:
        with self._lock:
            stats = self._stats[name]
            stats.calls += 1
            stats.total_seconds += seconds
            if failed:
                stats.errors += 1

    def _open(self, name: str, metadata: Optional[dict]) -> Any:
        if self.client is None:
            return None
        try:
            return self.client.trace(name=name, metadata=metadata or {})
        except Exception as e:
            logger.error(f"Failed to open trace {name}: {e}")
            return None

    def _close(self, trace: Any, name: str, metadata: Optional[dict], seconds: float,
               error: Optional[Exception] = None) -> None:
        if trace is None:
            return
        update = {**(metadata or {}), "latency_ms": round(seconds * 1000, 2),
                  "status": "error" if error else "success"}
        if error:
            update["error"] = str(error)
        try:
            trace.update(metadata=update)
        except Exception as e:
            logger.error(f"Failed to update trace {name}: {e}")

    def trace_function(self, name: str, metadata: Optional[dict] = None):
        """
        Decorator to count and time function execution.

        Args:
            name: Name of the operation to trace
            metadata: Additional metadata sent with the trace

        Usage:
            @tracing_service.trace_function("operator.predict")
            def predict(branch_in, times):
                ...
        """

        def decorator(func: Callable) -> Callable:
            @wraps(func)
            def wrapper(*args, **kwargs):
                trace = self._open(name, metadata)
                start_time = time.perf_counter()
                try:
                    result = func(*args, **kwargs)
                except Exception as e:
                    latency = time.perf_counter() - start_time
                    self._record(name, latency, failed=True)
                    self._close(trace, name, metadata, latency, e)
                    logger.error(f"Traced {name} failed: {e}")
                    raise
                latency = time.perf_counter() - start_time
                self._record(name, latency, failed=False)
                self._close(trace, name, metadata, latency)
                logger.debug(f"Traced {name}: {latency:.3f}s")
                return result

            return wrapper

        return decorator

    @contextmanager
    def span(self, name: str, metadata: Optional[dict] = None) -> Iterator[None]:
        """Time a block under ``name``."""
        trace = self._open(name, metadata)
        start_time = time.perf_counter()
        error = None
        try:
            yield
        except Exception as e:
            error = e
            raise
        finally:
            latency = time.perf_counter() - start_time
            self._record(name, latency, error is not None)
            self._close(trace, name, metadata, latency, error)

    def log_event(self, name: str, level: str = "INFO", metadata: Optional[dict] = None,
                  trace_id: Optional[str] = None) -> None:
        """
        Record a named event, mirror it to the log and score it in Langfuse.

        Args:
            name: Event name
            level: Log level (INFO, WARNING, ERROR)
            metadata: Additional metadata
            trace_id: Optional trace ID to associate with
        """
        with self._lock:
            self._stats[name].events.append({"level": level, **(metadata or {})})
        logger.log(getattr(logging, level, logging.INFO), f"{name}: {metadata or {}}")
        if self.client is None:
            return
        try:
            self.client.score(
                name=name,
                value=1 if level == "INFO" else 0,
                data_type="NUMERIC",
                comment=f"{level}: {name}",
                trace_id=trace_id,
            )
        except Exception as e:
            logger.error(f"Failed to log event {name}: {e}")

    def flush(self) -> None:
        """Send pending Langfuse traces."""
        if self.client is None:
            return
        try:
            self.client.flush()
        except Exception as e:
            logger.error(f"Failed to flush traces: {e}")

    def count(self, name: str) -> int:
        with self._lock:
            return self._stats[name].calls if name in self._stats else 0

    def seconds(self, name: str) -> float:
        with self._lock:
            return self._stats[name].total_seconds if name in self._stats else 0.0

    def stats(self, name: str) -> TraceStats:
        with self._lock:
            return self._stats.get(name, TraceStats())

    def reset(self, prefix: str = "") -> None:
        """Forget every operation whose name starts with ``prefix``."""
        with self._lock:
            for name in [n for n in self._stats if n.startswith(prefix)]:
                del self._stats[name]


# Global tracing service instance
tracing_service = TracingService(build_client())
