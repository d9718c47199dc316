"""
Snapshot cache for the map service.
Serves the marginal map computed at the most recent quiescent point; entries are
keyed by graph version and message count, so any insertion or solver step misses.
"""

import time
import logging
from typing import Dict, Any, Optional, Tuple

logger = logging.getLogger(__name__)

SnapshotKey = Tuple[int, int]


class SnapshotCache:
    def __init__(self, max_entries: int = 8, default_ttl: int = 300):
        """
        Initialize snapshot cache

        Args:
            max_entries: Maximum number of cached snapshots
            default_ttl: Default time-to-live in seconds
        """
        self.max_entries = max_entries
        self.default_ttl = default_ttl
        self.cache: Dict[SnapshotKey, Dict[str, Any]] = {}  # key -> {value, timestamp, ttl}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key_for(version: int, messages_sent: int) -> SnapshotKey:
        return (int(version), int(messages_sent))

    def _cleanup_expired(self):
        """Remove expired entries"""
        current_time = time.time()
        expired_keys = [k for k, e in self.cache.items() if current_time - e['timestamp'] > e['ttl']]
        for key in expired_keys:
            del self.cache[key]
        logger.debug(f"Cleaned up {len(expired_keys)} expired snapshots")

    def _enforce_size_limit(self):
        """Drop the oldest snapshots beyond max_entries"""
        if len(self.cache) <= self.max_entries:
            return
        sorted_items = sorted(self.cache.items(), key=lambda x: x[1]['timestamp'])
        entries_to_remove = len(self.cache) - self.max_entries
        for key, _ in sorted_items[:entries_to_remove]:
            del self.cache[key]
        logger.debug(f"Removed {entries_to_remove} old snapshots to enforce size limit")

    def put(self, key: SnapshotKey, snapshot: Dict[str, Any], ttl: Optional[int] = None):
        self.cache[key] = {
            'value': snapshot,
            'timestamp': time.time(),
            'ttl': ttl or self.default_ttl,
        }
        self._cleanup_expired()
        self._enforce_size_limit()
        logger.debug(f"Cached map snapshot for version {key}")

    def get(self, key: SnapshotKey) -> Optional[Dict[str, Any]]:
        entry = self.cache.get(key)
        if entry is None:
            self.misses += 1
            return None
        if time.time() - entry['timestamp'] > entry['ttl']:
            del self.cache[key]
            self.misses += 1
            return None
        self.hits += 1
        return entry['value']

    def latest(self) -> Optional[Dict[str, Any]]:
        """Newest cached snapshot regardless of version (the last quiescent map)."""
        if not self.cache:
            return None
        key = max(self.cache, key=lambda k: self.cache[k]['timestamp'])
        return self.cache[key]['value']

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics"""
        current_time = time.time()
        expired_count = sum(1 for e in self.cache.values() if current_time - e['timestamp'] > e['ttl'])
        return {
            'total_entries': len(self.cache),
            'expired_entries': expired_count,
            'active_entries': len(self.cache) - expired_count,
            'max_entries': self.max_entries,
            'default_ttl': self.default_ttl,
            'hits': self.hits,
            'misses': self.misses,
        }

    def clear(self):
        """Clear all cache entries"""
        self.cache.clear()
        logger.info("Snapshot cache cleared")


# Global cache instance
cache_instance = SnapshotCache()
