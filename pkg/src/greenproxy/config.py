"""
Configuration file schema.

One JSON document with sections ``proxy``, ``cache``, ``carbon``, ``cost``,
``workload``, ``simulate`` and an optional ``model``. Every section is
optional and unknown keys are rejected at load time. Units are given in
each field's description; ``greenproxy config-schema`` prints the JSON
schema.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .cache import HASHES, ShardedCache
from .carbon import EnergyIntensity, ServerProfile, load_region_table
from .costmodel import CostParams
from .missrate import model_from_dict
from .workload import WorkloadSpec

# the worked operating-cost example: 500 users, 50 mails/day, one year
_YEAR_REQUESTS = 500 * 50 * 365


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProxySection(_Section):
    listen_host: str = Field("127.0.0.1", description="Address the proxy listens on.")
    listen_port: int = Field(1143, ge=0, le=65535, description="TCP port the proxy listens on (0 picks a free port).")
    upstream: str = Field("127.0.0.1:143", description="Default upstream IMAP server, host:port.")
    upstreams_by_domain: dict[str, str] = Field(
        default_factory=dict, description="Upstream host:port per login domain (the part after '@').")
    connect_timeout: float = Field(10.0, gt=0, description="Upstream connect timeout, seconds.")
    snapshot_interval: float = Field(60.0, gt=0, description="Seconds between ledger snapshots.")

    @field_validator("upstream")
    @classmethod
    def _hostport(cls, v):
        host, sep, port = v.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"expected host:port, got {v!r}")
        return v


class NodeSection(_Section):
    node_id: str = Field(description="Shard name; also its position seed on the hash ring.")
    capacity_bytes: int = Field(gt=0, description="Shard capacity, bytes.")


class CacheSection(_Section):
    nodes: list[NodeSection] = Field(
        default_factory=lambda: [NodeSection(node_id="node0", capacity_bytes=64 * 1024 * 1024)],
        min_length=1, description="Cache shards.")
    virtual_points: int = Field(128, ge=1, description="Ring positions per shard.")
    hash: Literal[HASHES] = Field("blake2b64", description="Ring hash function.")

    def build(self) -> ShardedCache:
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("cache node ids must be unique")
        return ShardedCache({n.node_id: n.capacity_bytes for n in self.nodes}, self.virtual_points, self.hash)


class ServerProfileSection(_Section):
    users_served: int = Field(500, gt=0, description="Users one upstream server serves.")
    annual_energy_per_user: float = Field(28.4, gt=0, description="kWh per user per year.")
    annual_carbon_per_user: float = Field(16.7, gt=0, description="kg CO2 per user per year.")


class CarbonSection(_Section):
    kwh_per_gb: float = Field(24.3, gt=0, description="Internet energy intensity, kWh per decimal GB.")
    region_table: Optional[str] = Field(None, description="Path to a region -> kg CO2/MWh JSON table; bundled table if null.")
    ignore_link_energy: bool = Field(True, description="Leave link transmission energy out of the offset.")
    server_profile: ServerProfileSection = Field(default_factory=ServerProfileSection)
    requests_per_user_per_year: float = Field(50 * 365, gt=0, description="Upstream requests per user per year.")
    n_instances: int = Field(1, ge=1, description="Green instances credited against the offset.")

    def intensity(self) -> EnergyIntensity:
        return EnergyIntensity(self.kwh_per_gb)

    def profile(self) -> ServerProfile:
        return ServerProfile(**self.server_profile.model_dump())

    def regions(self):
        return load_region_table(self.region_table)


class CostSection(_Section):
    lambda_: float = Field(_YEAR_REQUESTS / 12, ge=0, description="Request arrival rate, requests per time unit.")
    T: float = Field(12.0, gt=0, description="Billing period, in time units (default: months).")
    beta: float = Field(1e6, gt=0, description="Requests one instance serves per time unit.")
    u: float = Field(0.0, ge=0, description="Client-proxy link energy, kWh per request.")
    G: float = Field(0.0, ge=0, description="Proxy-upstream link energy, kWh per request.")
    H: float = Field(28.4 / (50 * 365), ge=0, description="Upstream server energy, kWh per request.")
    c0: float = Field(0.02, ge=0, description="REC price, USD per kWh.")
    cv: float = Field(26.28, ge=0, description="Instance price, USD per instance per time unit.")
    Ev: float = Field(0.0, ge=0, description="Energy of one instance over the whole period, kWh.")
    r: float = Field(1.0, ge=0, description="Offset ratio of the green host (1.0 = 100%).")
    rT: float = Field(1.0, ge=0, description="Offset ratio the system commits to.")

    def params(self) -> CostParams:
        return CostParams(**self.model_dump())


class WorkloadSection(_Section):
    num_messages: int = Field(10_000, ge=1, description="Messages per account.")
    size_mean: float = Field(40 * 1024, gt=0, description="Mean message size, bytes.")
    size_stddev: float = Field(10 * 1024, ge=0, description="Message size standard deviation, bytes.")
    size_floor: int = Field(1024, gt=0, description="Smallest message size, bytes.")
    popularity: float = Field(1.0, gt=0, description="Zipf exponent.")
    popularity_dist: Literal["zipf", "uniform"] = "zipf"
    size_dist: Literal["gaussian", "uniform"] = "gaussian"
    arrival_rate: float = Field(10.0, gt=0, description="Mean requests per second (Poisson).")
    duration: float = Field(10_000.0, gt=0, description="Trace length, seconds.")
    accounts: int = Field(1, ge=1, description="Number of accounts.")
    devices_per_account: int = Field(1, ge=1, description="Devices reading each account.")
    poll_delay: float = Field(1.0, ge=0, description="Seconds between devices reading the same message.")
    mailbox: str = "INBOX"
    seed: int = Field(0, description="RNG seed.")

    def spec(self) -> WorkloadSpec:
        return WorkloadSpec(**self.model_dump())


class SimulateSection(_Section):
    capacities: list[float] = Field(
        default_factory=lambda: [4.0, 8.0, 16.0], min_length=1,
        description="Cache capacities to replay, in MB-analog units.")
    mb_analog_bytes: Optional[int] = Field(
        None, gt=0,
        description="Bytes per MB-analog unit. Null: one sixth of the trace's working-set footprint, "
                    "so 4 units under-provision and 8 and 16 hold everything.")
    steady_fraction: float = Field(1 / 3, gt=0, le=1, description="Final fraction of the trace used as steady state.")
    n_intervals: int = Field(100, ge=1, description="Buckets in the per-interval series.")
    exclude_cold: bool = Field(False, description="Leave first-access misses out of the curve.")
    variant: Literal["exponential", "powerlaw", "empirical"] = Field("exponential", description="Curve fit family.")


class Config(_Section):
    proxy: ProxySection = Field(default_factory=ProxySection)
    cache: CacheSection = Field(default_factory=CacheSection)
    carbon: CarbonSection = Field(default_factory=CarbonSection)
    cost: CostSection = Field(default_factory=CostSection)
    workload: WorkloadSection = Field(default_factory=WorkloadSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)
    model: Optional[dict] = Field(None, description="Miss-rate model, e.g. {\"variant\": \"exponential\", \"m0\": 0.9, \"k\": 0.5}.")

    @field_validator("model")
    @classmethod
    def _model(cls, v):
        if v is not None:
            model_from_dict(v)
        return v

    def miss_model(self):
        return None if self.model is None else model_from_dict(self.model)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    for item in overrides or ():
        path, sep, value = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        node = data
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {path}: {p} is not a section")
        node[parts[-1]] = _coerce(value)
    return data


def load_config(path=None, overrides=()) -> Config:
    """Read and validate a config file (defaults only when ``path`` is None)."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = apply_overrides(data, overrides)
    try:
        return Config.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_schema() -> dict:
    return Config.model_json_schema()
