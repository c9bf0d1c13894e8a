"""
Sharded in-memory message cache.

Each shard (``CacheNode``) is a byte-bounded LRU map. Keys are routed to
shards by a consistent-hash ring with virtual points, so adding or removing
a shard only remaps the keys that shard gains or loses.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import json
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable, Optional
from urllib.parse import quote

DEFAULT_VIRTUAL_POINTS = 128
HASHES = ("blake2b64",)


class CacheConfigError(ValueError):
    pass


class PayloadTooLarge(ValueError):
    """The payload exceeds the capacity of the shard that owns its key."""


@dataclass(frozen=True)
class CacheKey:
    account: str
    mailbox: str
    uid: int
    section: str = "BODY[]"

    def __post_init__(self):
        if self.uid < 1:
            raise ValueError(f"uid must be positive, got {self.uid}")

    def canonical(self) -> str:
        # '/' never survives quote(safe=""), so the join is injective
        parts = (self.account, self.mailbox, str(self.uid), self.section)
        return "/".join(quote(p, safe="") for p in parts)

    def prefix(self) -> tuple:
        return (self.account, self.mailbox)


def stable_hash(text: str, algorithm: str = "blake2b64") -> int:
    """A 64-bit hash that is identical across processes and restarts."""
    if algorithm != "blake2b64":
        raise CacheConfigError(f"unsupported hash {algorithm!r}; choose from {HASHES}")
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class CacheNode:
    """One LRU shard bounded by total payload bytes."""

    def __init__(self, node_id: str, capacity_bytes: int):
        if capacity_bytes <= 0:
            raise CacheConfigError(f"node {node_id!r}: capacity must be positive")
        self.node_id = node_id
        self.capacity_bytes = int(capacity_bytes)
        self.used_bytes = 0
        self.entries: OrderedDict[CacheKey, bytes] = OrderedDict()
        self.lock = threading.RLock()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def get(self, key: CacheKey) -> Optional[bytes]:
        with self.lock:
            payload = self.entries.get(key)
            if payload is not None:
                self.entries.move_to_end(key)
            return payload

    def set(self, key: CacheKey, payload: bytes) -> list:
        """
        Store ``payload`` and return the keys evicted to make room. A
        payload larger than the whole shard is refused and nothing changes.
        """
        size = len(payload)
        if size > self.capacity_bytes:
            raise PayloadTooLarge(f"{size} bytes exceeds node {self.node_id!r} capacity {self.capacity_bytes}")
        evicted = []
        with self.lock:
            old = self.entries.pop(key, None)
            if old is not None:
                self.used_bytes -= len(old)
            self.entries[key] = payload
            self.used_bytes += size
            while self.used_bytes > self.capacity_bytes:
                victim, data = self.entries.popitem(last=False)
                self.used_bytes -= len(data)
                evicted.append(victim)
        return evicted

    def delete(self, key: CacheKey) -> bool:
        with self.lock:
            data = self.entries.pop(key, None)
            if data is None:
                return False
            self.used_bytes -= len(data)
            return True

    def keys(self) -> list:
        """Keys from least to most recently used."""
        with self.lock:
            return list(self.entries)


class HashRing:
    """Consistent-hash ring; each node owns ``virtual_points`` positions."""

    def __init__(self, nodes: Iterable[str] = (), virtual_points: int = DEFAULT_VIRTUAL_POINTS,
                 hash_name: str = "blake2b64"):
        if virtual_points < 1:
            raise CacheConfigError("virtual_points must be positive")
        stable_hash("", hash_name)
        self.virtual_points = virtual_points
        self.hash_name = hash_name
        self._points: list = []
        self._owners: list = []
        self._owner_of: dict = {}
        self._nodes: set = set()
        for node in nodes:
            self.add(node)

    @property
    def nodes(self) -> set:
        return set(self._nodes)

    def __len__(self):
        return len(self._nodes)

    def points_of(self, node_id: str) -> list:
        return [p for p, n in zip(self._points, self._owners) if n == node_id]

    def _node_points(self, node_id: str) -> set:
        # skip positions another node already holds, keeping exactly virtual_points
        points, i = set(), 0
        while len(points) < self.virtual_points:
            p = stable_hash(f"{node_id}#{i}", self.hash_name)
            if p not in self._owner_of:
                points.add(p)
            i += 1
        return points

    def add(self, node_id: str) -> None:
        if node_id in self._nodes:
            raise CacheConfigError(f"node {node_id!r} already on the ring")
        for p in self._node_points(node_id):
            i = bisect.bisect_left(self._points, p)
            self._points.insert(i, p)
            self._owners.insert(i, node_id)
            self._owner_of[p] = node_id
        self._nodes.add(node_id)

    def remove(self, node_id: str) -> None:
        if node_id not in self._nodes:
            raise CacheConfigError(f"node {node_id!r} is not on the ring")
        if len(self._nodes) == 1:
            raise CacheConfigError("cannot remove the last node from the ring")
        keep = [(p, n) for p, n in zip(self._points, self._owners) if n != node_id]
        self._points = [p for p, _ in keep]
        self._owners = [n for _, n in keep]
        for p in [p for p, n in self._owner_of.items() if n == node_id]:
            del self._owner_of[p]
        self._nodes.discard(node_id)

    def locate(self, key) -> str:
        """Owner of the first ring point at or after the key's hash."""
        if not self._points:
            raise CacheConfigError("hash ring is empty")
        text = key.canonical() if isinstance(key, CacheKey) else str(key)
        h = stable_hash(text, self.hash_name)
        i = bisect.bisect_left(self._points, h)
        return self._owners[i % len(self._points)]


def ring_locate(ring: HashRing, key) -> str:
    return ring.locate(key)


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    get_bytes: int = 0
    set_bytes: int = 0
    evictions: int = 0

    def as_row(self, timestamp: float) -> dict:
        return {"timestamp": timestamp, **asdict(self)}


STATS_COLUMNS = ("timestamp", "hits", "misses", "get_bytes", "set_bytes", "evictions")


@dataclass
class RemapReport:
    sample_size: int
    moved: int

    @property
    def moved_fraction(self) -> float:
        return self.moved / self.sample_size if self.sample_size else 0.0


class ShardedCache:
    """
    The cache tier: a ring of LRU shards plus a shared stats ledger.

    Shard operations lock only that shard; the stats lock is held only to
    bump counters; ring changes take the ring lock exclusively.
    """

    def __init__(self, nodes: dict, virtual_points: int = DEFAULT_VIRTUAL_POINTS,
                 hash_name: str = "blake2b64"):
        if not nodes:
            raise CacheConfigError("at least one cache node is required")
        self.nodes = {nid: CacheNode(nid, cap) for nid, cap in nodes.items()}
        self.ring = HashRing(self.nodes, virtual_points, hash_name)
        self.stats = CacheStats()
        self._stats_lock = threading.Lock()
        self._ring_lock = threading.RLock()
        self.history: list = []

    @classmethod
    def single(cls, capacity_bytes: int, node_id: str = "node0") -> ShardedCache:
        return cls({node_id: capacity_bytes})

    @property
    def capacity_bytes(self) -> int:
        return sum(n.capacity_bytes for n in self.nodes.values())

    @property
    def used_bytes(self) -> int:
        return sum(n.used_bytes for n in self.nodes.values())

    def node_for(self, key: CacheKey) -> CacheNode:
        with self._ring_lock:
            return self.nodes[self.ring.locate(key)]

    def get(self, key: CacheKey) -> Optional[bytes]:
        payload = self.node_for(key).get(key)
        with self._stats_lock:
            if payload is None:
                self.stats.misses += 1
            else:
                self.stats.hits += 1
                self.stats.get_bytes += len(payload)
        return payload

    def peek(self, key: CacheKey) -> Optional[bytes]:
        """Look up without touching recency or stats."""
        node = self.node_for(key)
        with node.lock:
            return node.entries.get(key)

    def set(self, key: CacheKey, payload: bytes) -> list:
        """Store a payload and return the evicted keys; raises PayloadTooLarge."""
        evicted = self.node_for(key).set(key, payload)
        with self._stats_lock:
            self.stats.set_bytes += len(payload)
            self.stats.evictions += len(evicted)
        return evicted

    def invalidate(self, account: str, mailbox: str) -> int:
        """Drop every entry for one mailbox; returns how many were removed."""
        removed = 0
        for node in self.nodes.values():
            with node.lock:
                for key in [k for k in node.entries if k.prefix() == (account, mailbox)]:
                    node.delete(key)
                    removed += 1
        return removed

    def add_node(self, node_id: str, capacity_bytes: int, sample: Iterable = ()) -> RemapReport:
        with self._ring_lock:
            if node_id in self.nodes:
                raise CacheConfigError(f"node {node_id!r} already exists")
            node = CacheNode(node_id, capacity_bytes)
            report = rebalance(self.ring, add=node_id, sample=sample)
            self.nodes[node_id] = node
        return report

    def remove_node(self, node_id: str, sample: Iterable = ()) -> RemapReport:
        with self._ring_lock:
            if node_id not in self.nodes:
                raise CacheConfigError(f"node {node_id!r} does not exist")
            report = rebalance(self.ring, remove=node_id, sample=sample)
            # stored values are not migrated; remapped keys miss once
            del self.nodes[node_id]
        return report

    def snapshot(self) -> dict:
        with self._stats_lock:
            s = asdict(self.stats)
        s["nodes"] = {
            nid: {"capacity_bytes": n.capacity_bytes, "used_bytes": n.used_bytes, "entries": len(n)}
            for nid, n in self.nodes.items()
        }
        return s

    def record(self, timestamp: Optional[float] = None) -> dict:
        """Append a stats row to the time series and return it."""
        with self._stats_lock:
            row = self.stats.as_row(time.time() if timestamp is None else timestamp)
        self.history.append(row)
        return row

    def write_snapshot(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.snapshot(), fh, indent=2)

    def write_history_csv(self, path) -> None:
        write_stats_csv(self.history, path)


def rebalance(ring: HashRing, add: Optional[str] = None, remove: Optional[str] = None,
              sample: Iterable = ()) -> RemapReport:
    """Add or remove one ring node and report how much of ``sample`` moved."""
    if (add is None) == (remove is None):
        raise ValueError("give exactly one of add= or remove=")
    sample = list(sample)
    before = [ring.locate(k) for k in sample]
    if add is not None:
        ring.add(add)
    else:
        ring.remove(remove)
    after = [ring.locate(k) for k in sample]
    return RemapReport(len(sample), sum(a != b for a, b in zip(before, after)))


def write_stats_csv(rows: Iterable[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STATS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in STATS_COLUMNS})
