"""
LRU cache of converted bodies, bounded by total bytes, with single-flight
so concurrent first requests for one conversion run the converter once.
"""

import collections
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional, Tuple

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY_BYTES = 256 * 1024 * 1024


class CacheKey(NamedTuple):
    digest: str
    target: str
    converter_id: str
    converter_version: str


@dataclass(frozen=True)
class CacheEntry:
    key: CacheKey
    body: bytes = field(repr=False)
    created_at: float
    notes: Tuple[str, ...] = ()


class _Flight:
    def __init__(self):
        self.event = threading.Event()
        self.entry: Optional[CacheEntry] = None
        self.error: Optional[BaseException] = None


class ConversionCache:
    def __init__(self, capacity_bytes: int = DEFAULT_CAPACITY_BYTES, monitor=None):
        if capacity_bytes < 0:
            raise ValueError(f"cache capacity must be >= 0, got {capacity_bytes}")
        self.capacity_bytes = capacity_bytes
        self.monitor = monitor
        self._entries: 'collections.OrderedDict[CacheKey, CacheEntry]' = collections.OrderedDict()
        self._total = 0
        self._lock = threading.RLock()
        self._flights: Dict[CacheKey, _Flight] = {}
        self._flights_lock = threading.Lock()

    @property
    def total_bytes(self) -> int:
        return self._total

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        # membership does not count as a use
        with self._lock:
            return key in self._entries

    def keys(self):
        """Keys from least to most recently used."""
        with self._lock:
            return list(self._entries)

    def _get(self, key: CacheKey) -> Optional[CacheEntry]:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                self._entries.move_to_end(key)
            return entry

    def lookup(self, key: CacheKey) -> Optional[CacheEntry]:
        """Return the cached entry and mark it most recently used, or None."""
        entry = self._get(key)
        if self.monitor is not None:
            self.monitor.track_cache(entry is not None)
        return entry

    def put(self, key: CacheKey, body: bytes, notes: Tuple[str, ...] = ()) -> CacheEntry:
        """Cache body under key, evicting least recently used entries to stay within capacity."""
        entry = CacheEntry(key, body, time.time(), tuple(notes))
        size = len(body)
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self._total -= len(old.body)
            if size > self.capacity_bytes:
                logger.debug(f"Not caching {key.converter_id} output of {size} bytes (capacity {self.capacity_bytes})")
                return entry
            while self._entries and self._total + size > self.capacity_bytes:
                evicted_key, evicted = self._entries.popitem(last=False)
                self._total -= len(evicted.body)
                logger.debug(f"Evicted {evicted_key.digest[:12]} -> {evicted_key.target}")
            self._entries[key] = entry
            self._total += size
        return entry

    def get_or_convert(self, key: CacheKey, convert: Callable) -> Tuple[CacheEntry, bool]:
        """
        Return (entry, hit). On a miss exactly one caller runs convert(),
        which must return an object with ``body`` and ``notes``; concurrent
        callers for the same key wait for it and share its result or error.
        """
        entry = self._get(key)
        if entry is not None:
            if self.monitor is not None:
                self.monitor.track_cache(True)
            return entry, True

        with self._flights_lock:
            flight = self._flights.get(key)
            leader = flight is None
            if leader:
                flight = _Flight()
                self._flights[key] = flight

        if not leader:
            flight.event.wait()
            if flight.error is not None:
                raise flight.error
            if self.monitor is not None:
                self.monitor.track_cache(True)
            return flight.entry, True

        try:
            # a previous leader may have finished between our miss and taking the flight
            entry = self._get(key)
            hit = entry is not None
            if not hit:
                result = convert()
                entry = self.put(key, result.body, result.notes)
            flight.entry = entry
            if self.monitor is not None:
                self.monitor.track_cache(hit)
            return entry, hit
        except BaseException as e:
            flight.error = e
            raise
        finally:
            with self._flights_lock:
                self._flights.pop(key, None)
            flight.event.set()
