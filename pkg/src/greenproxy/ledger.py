"""Traffic counters shared by proxy sessions."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

COUNTERS = (
    "bytes_to_upstream",
    "bytes_from_upstream",
    "bytes_to_client",
    "bytes_from_client",
    "requests_to_upstream",
    "internal_requests",
    "hits",
    "misses",
    "hit_bytes",
    "miss_bytes",
)


@dataclass
class TrafficLedger:
    """
    Byte and request counters for one session or for the whole proxy.

    ``requests_to_upstream`` counts client commands that had to reach the
    upstream server (cache misses and passthrough). Commands the proxy
    issues on its own, such as UID-to-sequence lookups, are counted in
    ``internal_requests``. A session ledger created with ``parent`` forwards
    every increment to the parent under the same lock, so the global ledger
    is always the exact sum of its sessions.
    """

    bytes_to_upstream: int = 0
    bytes_from_upstream: int = 0
    bytes_to_client: int = 0
    bytes_from_client: int = 0
    requests_to_upstream: int = 0
    internal_requests: int = 0
    hits: int = 0
    misses: int = 0
    hit_bytes: int = 0
    miss_bytes: int = 0
    parent: Optional[TrafficLedger] = field(default=None, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **deltas: int) -> None:
        for name, value in deltas.items():
            if name not in COUNTERS:
                raise KeyError(name)
            if value < 0:
                raise ValueError(f"{name}: counters only grow")
        with self._lock:
            for name, value in deltas.items():
                setattr(self, name, getattr(self, name) + value)
        if self.parent is not None:
            self.parent.add(**deltas)

    def child(self) -> TrafficLedger:
        return TrafficLedger(parent=self)

    @property
    def total_link_bytes(self) -> int:
        return self.bytes_to_upstream + self.bytes_from_upstream + self.bytes_to_client + self.bytes_from_client

    @property
    def upstream_link_bytes(self) -> int:
        return self.bytes_to_upstream + self.bytes_from_upstream

    @property
    def client_link_bytes(self) -> int:
        return self.bytes_to_client + self.bytes_from_client

    @property
    def hit_rate(self) -> float:
        n = self.hits + self.misses
        return self.hits / n if n else 0.0

    def to_dict(self) -> dict:
        with self._lock:
            return {name: getattr(self, name) for name in COUNTERS}

    @classmethod
    def from_dict(cls, data: dict) -> TrafficLedger:
        unknown = set(data) - set(COUNTERS)
        if unknown:
            raise KeyError(f"unknown ledger fields: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in data.items()})

    def __add__(self, other: TrafficLedger) -> TrafficLedger:
        a, b = self.to_dict(), other.to_dict()
        return TrafficLedger(**{k: a[k] + b[k] for k in COUNTERS})

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def read_json(cls, path) -> TrafficLedger:
        with open(path) as fh:
            data = json.load(fh)
        # accept a full proxy snapshot as well as a bare ledger
        return cls.from_dict(data.get("ledger", data))
