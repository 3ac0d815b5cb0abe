# performance_monitor.py
import logging
import statistics
import threading
import time
from functools import wraps
from typing import Any, Callable


class PerformanceMonitor:
    """
    Request, conversion and cache metrics for the gateway.

    Conversion counts are per converter id; they are how operators (and the
    tests) see that N identical requests ran the converter once.
    """

    def __init__(self, slow_threshold: float = 0.5):
        self.metrics = {
            'request_times': [],
            'requests': 0,
            'responses': {},
            'cache_hits': 0,
            'cache_misses': 0,
            'conversions': {},
            'function_calls': {}
        }
        self.slow_threshold = slow_threshold
        self._lock = threading.Lock()
        self.logger = logging.getLogger(__name__)

    @staticmethod
    def _new_timing() -> dict:
        return {
            'count': 0,
            'failures': 0,
            'total_time': 0.0,
            'avg_time': 0.0,
            'min_time': float('inf'),
            'max_time': 0.0
        }

    @staticmethod
    def _add_timing(stats: dict, duration: float):
        stats['count'] += 1
        stats['total_time'] += duration
        stats['avg_time'] = stats['total_time'] / stats['count']
        stats['min_time'] = min(stats['min_time'], duration)
        stats['max_time'] = max(stats['max_time'], duration)

    def track_request(self, status: int, duration: float):
        """Track one served request."""
        with self._lock:
            self.metrics['requests'] += 1
            key = str(status)
            self.metrics['responses'][key] = self.metrics['responses'].get(key, 0) + 1
            self.metrics['request_times'].append(duration)
            if len(self.metrics['request_times']) > 100:
                self.metrics['request_times'].pop(0)

    def track_conversion(self, converter_id: str, duration: float, ok: bool = True):
        """Track one converter invocation."""
        with self._lock:
            stats = self.metrics['conversions'].setdefault(converter_id, self._new_timing())
            self._add_timing(stats, duration)
            if not ok:
                stats['failures'] += 1
        if duration > self.slow_threshold:
            self.logger.warning(f"Conversion with {converter_id} took {duration:.3f}s")

    def track_cache(self, hit: bool):
        with self._lock:
            self.metrics['cache_hits' if hit else 'cache_misses'] += 1

    def track_function_call(self, func_name: str, duration: float):
        """Track individual function execution times."""
        with self._lock:
            stats = self.metrics['function_calls'].setdefault(func_name, self._new_timing())
            self._add_timing(stats, duration)

    def conversion_count(self, converter_id: str) -> int:
        with self._lock:
            return self.metrics['conversions'].get(converter_id, {}).get('count', 0)

    def get_metrics(self) -> dict:
        """Get a copy of the current metrics."""
        with self._lock:
            metrics = {
                'requests': self.metrics['requests'],
                'responses': dict(self.metrics['responses']),
                'cache_hits': self.metrics['cache_hits'],
                'cache_misses': self.metrics['cache_misses'],
                'conversions': {k: dict(v) for k, v in self.metrics['conversions'].items()},
                'function_calls': {k: dict(v) for k, v in self.metrics['function_calls'].items()}
            }
            times = list(self.metrics['request_times'])

        if times:
            metrics['request_stats'] = {
                'avg': statistics.mean(times),
                'min': min(times),
                'max': max(times),
                'median': statistics.median(times)
            }
        # inf does not survive JSON
        for group in ('conversions', 'function_calls'):
            for stats in metrics[group].values():
                if stats['count'] == 0:
                    stats['min_time'] = 0.0
        return metrics

    def profile_function(self, func: Callable) -> Callable:
        """Decorator to time individual functions."""
        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                duration = time.perf_counter() - start_time
                self.track_function_call(func.__name__, duration)
                if duration > self.slow_threshold:
                    self.logger.warning(f"{func.__name__} took {duration:.3f}s")
        return wrapper

    def log_performance_summary(self):
        """Log a summary of performance metrics."""
        metrics = self.get_metrics()

        self.logger.info("=== Performance Summary ===")
        self.logger.info(f"Requests: {metrics['requests']} {metrics['responses']}")
        self.logger.info(f"Cache: {metrics['cache_hits']} hits, {metrics['cache_misses']} misses")

        if 'request_stats' in metrics:
            stats = metrics['request_stats']
            self.logger.info(f"Request time - Avg: {stats['avg']*1000:.1f}ms, "
                             f"Min: {stats['min']*1000:.1f}ms, Max: {stats['max']*1000:.1f}ms")

        for converter_id, stats in sorted(metrics['conversions'].items()):
            self.logger.info(
                f"  {converter_id}: {stats['count']} runs ({stats['failures']} failed), "
                f"avg {stats['avg_time']*1000:.1f}ms"
            )
