"""
Synthetic mail workloads and cache replay.

A trace is a time-ordered list of message reads: Poisson arrivals,
long-tail (Zipf) message popularity, and Gaussian message sizes. Replaying
a trace against caches of different capacities yields the miss-rate curve
``M(N)`` that the optimizer consumes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .cache import CacheKey, PayloadTooLarge, ShardedCache

KB = 1024
MB = 1024 * 1024
TRACE_COLUMNS = ("timestamp", "account", "mailbox", "uid", "op", "size")


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    """
    Parameters of a synthetic workload. Sizes are bytes, times seconds.

    ``devices_per_account`` models mail clients on several devices: every
    read by the primary device is followed by a poll of the same message
    from each extra device, ``poll_delay`` seconds apart.
    """

    num_messages: int = 10_000
    size_mean: float = 40 * KB
    size_stddev: float = 10 * KB
    size_floor: int = 1 * KB
    popularity: float = 1.0
    popularity_dist: str = "zipf"
    size_dist: str = "gaussian"
    arrival_rate: float = 10.0
    duration: float = 10_000.0
    accounts: int = 1
    devices_per_account: int = 1
    poll_delay: float = 1.0
    mailbox: str = "INBOX"
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.num_messages < 1:
            problems.append("num_messages must be >= 1")
        if self.size_mean <= 0 or self.size_stddev < 0:
            problems.append("size_mean must be > 0 and size_stddev >= 0")
        if self.size_floor <= 0:
            problems.append("size_floor must be > 0")
        if self.popularity <= 0:
            problems.append("popularity exponent must be > 0")
        if self.popularity_dist not in ("zipf", "uniform"):
            problems.append(f"unknown popularity_dist {self.popularity_dist!r}")
        if self.size_dist not in ("gaussian", "uniform"):
            problems.append(f"unknown size_dist {self.size_dist!r}")
        if self.arrival_rate <= 0 or self.duration <= 0:
            problems.append("arrival_rate and duration must be > 0")
        if self.accounts < 1 or self.devices_per_account < 1:
            problems.append("accounts and devices_per_account must be >= 1")
        if self.poll_delay < 0:
            problems.append("poll_delay must be >= 0")
        if problems:
            raise WorkloadError("; ".join(problems))

    def replace(self, **changes) -> WorkloadSpec:
        return WorkloadSpec(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, data: dict) -> WorkloadSpec:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise WorkloadError(f"unknown workload fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    account: str
    mailbox: str
    uid: int
    op: str  # "fetch" or "poll"
    size: int

    @property
    def key(self) -> CacheKey:
        return CacheKey(self.account, self.mailbox, self.uid)


def message_sizes(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-(account, uid) sizes; shape ``(accounts, num_messages)``."""
    shape = (spec.accounts, spec.num_messages)
    if spec.size_dist == "gaussian":
        raw = rng.normal(spec.size_mean, spec.size_stddev, shape)
    else:
        half = math.sqrt(3.0) * spec.size_stddev
        raw = rng.uniform(spec.size_mean - half, spec.size_mean + half, shape)
    return np.maximum(np.rint(raw), spec.size_floor).astype(np.int64)


def popularity_weights(spec: WorkloadSpec) -> np.ndarray:
    ranks = np.arange(1, spec.num_messages + 1, dtype=float)
    if spec.popularity_dist == "uniform":
        w = np.ones_like(ranks)
    else:
        w = ranks ** -spec.popularity
    return w / w.sum()


def _arrival_times(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    expected = spec.arrival_rate * spec.duration
    chunk = int(expected + 10 * math.sqrt(expected) + 10)
    gaps = rng.exponential(1.0 / spec.arrival_rate, chunk)
    times = np.cumsum(gaps)
    while times[-1] <= spec.duration:
        more = np.cumsum(rng.exponential(1.0 / spec.arrival_rate, chunk)) + times[-1]
        times = np.concatenate([times, more])
    return times[times <= spec.duration]


def generate_trace(spec: WorkloadSpec) -> list:
    """
    Build a deterministic trace from ``spec`` (same spec, same seed, same
    trace). The most popular message is the newest one (highest UID).
    """
    rng = np.random.default_rng(spec.seed)
    sizes = message_sizes(spec, rng)
    times = _arrival_times(spec, rng)
    n = len(times)
    ranks = rng.choice(spec.num_messages, size=n, p=popularity_weights(spec))
    uids = spec.num_messages - ranks
    accounts = rng.integers(spec.accounts, size=n)

    events = []
    for t, a, uid in zip(times.tolist(), accounts.tolist(), uids.tolist()):
        size = int(sizes[a, uid - 1])
        name = f"user{a}"
        events.append(TraceEvent(t, name, spec.mailbox, uid, "fetch", size))
        for d in range(1, spec.devices_per_account):
            events.append(TraceEvent(t + d * spec.poll_delay, name, spec.mailbox, uid, "poll", size))
    if spec.devices_per_account > 1:
        events.sort(key=lambda e: e.timestamp)
    return events


def write_trace_csv(trace: Sequence[TraceEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for e in trace:
            writer.writerow((repr(e.timestamp), e.account, e.mailbox, e.uid, e.op, e.size))


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise WorkloadError(f"{path}: expected columns {TRACE_COLUMNS}")
        return [
            TraceEvent(float(r["timestamp"]), r["account"], r["mailbox"], int(r["uid"]), r["op"], int(r["size"]))
            for r in reader
        ]


# --------------------------------------------------------------------------
# replay


class _Blob:
    """Stand-in payload that only knows its length, so replay stays light."""

    __slots__ = ("size",)

    def __init__(self, size: int):
        self.size = size

    def __len__(self):
        return self.size


INTERVAL_COLUMNS = ("t_start", "requests", "hits", "misses", "cold_misses", "get_bytes", "set_bytes")


@dataclass
class SimReport:
    capacity_bytes: int
    requests: int
    hits: int
    misses: int
    cold_misses: int
    get_bytes: int
    set_bytes: int
    footprint_bytes: int
    distinct_messages: int
    steady_state_miss_rate: float
    steady_state_capacity_miss_rate: float
    steady_window: tuple
    intervals: list = field(default_factory=list)

    @property
    def miss_rate(self) -> float:
        return self.misses / self.requests if self.requests else 0.0

    @property
    def steady_state_hit_rate(self) -> float:
        return 1.0 - self.steady_state_miss_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["miss_rate"] = self.miss_rate
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def write_intervals_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=INTERVAL_COLUMNS)
            writer.writeheader()
            writer.writerows(self.intervals)


def _make_cache(cache) -> ShardedCache:
    if isinstance(cache, ShardedCache):
        return cache
    if isinstance(cache, dict):
        return ShardedCache(cache)
    return ShardedCache.single(int(cache))


def replay(trace: Sequence[TraceEvent], cache: Union[int, dict, ShardedCache], n_intervals: int = 100,
           steady_fraction: float = 1 / 3) -> SimReport:
    """
    Drive a cache with ``trace`` the way the proxy would: look up, and on a
    miss store the message.

    ``cache`` is a byte capacity (one shard), a ``{node_id: capacity}``
    map, or a ready ``ShardedCache``. The steady-state window is the final
    ``steady_fraction`` of events.
    """
    if not trace:
        raise WorkloadError("cannot replay an empty trace")
    cache = _make_cache(cache)
    t0, t1 = trace[0].timestamp, trace[-1].timestamp
    width = (t1 - t0) / n_intervals or 1.0
    rows = [dict.fromkeys(INTERVAL_COLUMNS, 0) for _ in range(n_intervals)]
    for i, row in enumerate(rows):
        row["t_start"] = t0 + i * width

    n = len(trace)
    window_start = n - max(1, int(round(n * steady_fraction)))
    seen = {}
    win_req = win_miss = win_cold = 0
    hits = misses = cold = get_bytes = set_bytes = 0

    for i, e in enumerate(trace):
        row = rows[min(n_intervals - 1, int((e.timestamp - t0) / width))]
        row["requests"] += 1
        key = (e.account, e.mailbox, e.uid)
        ckey = CacheKey(*key)
        payload = cache.get(ckey)
        in_window = i >= window_start
        if in_window:
            win_req += 1
        if payload is not None:
            hits += 1
            get_bytes += len(payload)
            row["hits"] += 1
            row["get_bytes"] += len(payload)
            continue
        misses += 1
        row["misses"] += 1
        first = key not in seen
        if first:
            seen[key] = e.size
            cold += 1
            row["cold_misses"] += 1
        if in_window:
            win_miss += 1
            win_cold += first
        try:
            cache.set(ckey, _Blob(e.size))
        except PayloadTooLarge:
            continue
        set_bytes += e.size
        row["set_bytes"] += e.size

    warm = win_req - win_cold
    return SimReport(
        capacity_bytes=cache.capacity_bytes,
        requests=n,
        hits=hits,
        misses=misses,
        cold_misses=cold,
        get_bytes=get_bytes,
        set_bytes=set_bytes,
        footprint_bytes=sum(seen.values()),
        distinct_messages=len(seen),
        steady_state_miss_rate=win_miss / win_req if win_req else 0.0,
        steady_state_capacity_miss_rate=(win_miss - win_cold) / warm if warm else 0.0,
        steady_window=(window_start, n),
        intervals=rows,
    )


def working_set_footprint(trace: Sequence[TraceEvent]) -> int:
    """Total bytes of the distinct messages a trace touches."""
    sizes = {}
    for e in trace:
        sizes[(e.account, e.mailbox, e.uid)] = e.size
    return sum(sizes.values())


def miss_rate_curve(spec: WorkloadSpec, capacities: Sequence[int], exclude_cold: bool = False,
                    shard_capacity: Optional[int] = None, trace: Optional[list] = None) -> list:
    """
    Steady-state miss rate for each capacity, replaying one trace.

    Capacity is expressed as an instance count: ``N = capacity /
    shard_capacity`` (the smallest capacity by default), so the result can
    be passed straight to :func:`greenproxy.missrate.fit_miss_rate`.
    """
    if len(capacities) < 2:
        raise WorkloadError("a miss-rate curve needs at least 2 capacities")
    trace = generate_trace(spec) if trace is None else trace
    unit = shard_capacity or min(capacities)
    curve = []
    for cap in sorted(capacities):
        rep = replay(trace, int(cap))
        m = rep.steady_state_capacity_miss_rate if exclude_cold else rep.steady_state_miss_rate
        curve.append((cap / unit, m))
    return curve
