"""
Energy and carbon spent outside the proxy.

Three sources are estimated: link transmission energy (bytes times an
average Internet energy intensity), upstream server energy per request
(from a published per-user server profile), and the carbon of a route
(energy split over the hops, each priced at its region's grid intensity).
"""

from __future__ import annotations

import csv
import json
import threading
import time
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .costmodel import CostParams, DomainError, EnergyAmount
from .ledger import TrafficLedger

BYTES_PER_GB = 10**9
DEFAULT_KWH_PER_GB = 24.3
ROUTE_COLUMNS = ("hop_index", "ip", "region")


class RouteFileError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyIntensity:
    kwh_per_gb: float = DEFAULT_KWH_PER_GB

    def __post_init__(self):
        if not self.kwh_per_gb > 0:
            raise DomainError("energy intensity must be positive")


@dataclass(frozen=True)
class ServerProfile:
    """Yearly energy and carbon of an email server, per user served."""

    users_served: int
    annual_energy_per_user: float  # kWh/user/year
    annual_carbon_per_user: float  # kg CO2/user/year

    def __post_init__(self):
        if min(self.users_served, self.annual_energy_per_user, self.annual_carbon_per_user) <= 0:
            raise DomainError("server profile fields must be positive")

    @property
    def annual_energy(self) -> float:
        return self.users_served * self.annual_energy_per_user

    @property
    def annual_carbon(self) -> float:
        return self.users_served * self.annual_carbon_per_user


# medium-scale deployment from Google's published efficiency data
MEDIUM_SERVER = ServerProfile(users_served=500, annual_energy_per_user=28.4, annual_carbon_per_user=16.7)


@dataclass(frozen=True)
class RouteHop:
    address: str
    region: str
    carbon_intensity: float  # kg CO2 / MWh
    unknown_region: bool = False

    def __post_init__(self):
        if self.carbon_intensity < 0:
            raise DomainError("carbon intensity must be non-negative")


def link_energy(bytes_transferred: int, intensity: EnergyIntensity = EnergyIntensity()) -> EnergyAmount:
    """Transmission energy of ``bytes_transferred`` (decimal GB)."""
    if bytes_transferred < 0:
        raise DomainError("byte count must be non-negative")
    return EnergyAmount(bytes_transferred / BYTES_PER_GB * intensity.kwh_per_gb)


def traffic_bytes(users: int, emails_per_user_per_day: float, email_size_bytes: float, days: float = 365) -> float:
    """Total mail traffic for a user population over ``days``."""
    return users * emails_per_user_per_day * email_size_bytes * days


def server_energy_per_request(profile: ServerProfile, requests_per_user_per_year: float) -> float:
    """Upstream server energy attributable to one request (kWh/req)."""
    if requests_per_user_per_year <= 0:
        raise DomainError("request rate must be positive")
    return profile.annual_energy_per_user / requests_per_user_per_year


def server_carbon_per_request(profile: ServerProfile, requests_per_user_per_year: float) -> float:
    if requests_per_user_per_year <= 0:
        raise DomainError("request rate must be positive")
    return profile.annual_carbon_per_user / requests_per_user_per_year


def route_carbon(route: Sequence[RouteHop], route_energy) -> float:
    """
    Carbon (kg) of moving ``route_energy`` along ``route``.

    Per-router load is unknown, so the energy is split evenly over the
    hops. An empty route emits nothing.
    """
    kwh = route_energy.kwh if isinstance(route_energy, EnergyAmount) else float(route_energy)
    if kwh < 0:
        raise DomainError("route energy must be non-negative")
    if not route:
        return 0.0
    share_mwh = kwh / 1000.0 / len(route)
    return sum(share_mwh * hop.carbon_intensity for hop in route)


# --------------------------------------------------------------------------
# region table and route files


@dataclass
class RegionTable:
    regions: dict
    default: float

    def lookup(self, region: str) -> tuple:
        """Return ``(intensity, known)``."""
        if region in self.regions:
            return float(self.regions[region]), True
        return float(self.default), False


def load_region_table(path=None) -> RegionTable:
    """Load a region -> kg/MWh table; the bundled one if ``path`` is None."""
    if path is None:
        text = resources.files("greenproxy").joinpath("data/region_intensity.json").read_text()
    else:
        text = Path(path).read_text()
    data = json.loads(text)
    if "default" not in data:
        raise RouteFileError("region table needs a 'default' intensity")
    regions = data.get("regions", {k: v for k, v in data.items() if isinstance(v, (int, float)) and k != "default"})
    return RegionTable({k: float(v) for k, v in regions.items()}, float(data["default"]))


def ingest_route_file(path, table: Optional[RegionTable] = None) -> list:
    """
    Read a traceroute CSV (``hop_index, ip, region``) into hops ordered by
    index. Regions missing from the table get its default intensity and
    are flagged.
    """
    table = table or load_region_table()
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not set(ROUTE_COLUMNS) <= set(reader.fieldnames):
                raise RouteFileError(f"{path}: expected columns {ROUTE_COLUMNS}, got {reader.fieldnames}")
            rows = list(reader)
    except csv.Error as exc:
        raise RouteFileError(f"{path}: {exc}") from exc

    by_index = {}
    for lineno, row in enumerate(rows, start=2):
        if None in row or any(row[c] is None for c in ROUTE_COLUMNS):
            raise RouteFileError(f"{path}:{lineno}: wrong number of fields")
        try:
            idx = int(row["hop_index"])
        except ValueError:
            raise RouteFileError(f"{path}:{lineno}: bad hop_index {row['hop_index']!r}") from None
        if idx in by_index:
            raise RouteFileError(f"{path}:{lineno}: duplicate hop_index {idx}")
        region = row["region"].strip()
        intensity, known = table.lookup(region)
        if not known:
            warnings.warn(f"region {region!r} not in table; using default {intensity} kg/MWh", stacklevel=2)
        by_index[idx] = RouteHop(row["ip"].strip(), region, intensity, unknown_region=not known)
    return [by_index[i] for i in sorted(by_index)]


def export_route_file(route: Sequence[RouteHop], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUTE_COLUMNS)
        for i, hop in enumerate(route, start=1):
            writer.writerow((i, hop.address, hop.region))


# --------------------------------------------------------------------------
# offsets


class EmissionLedger:
    """
    Running totals of energy and carbon attributed to upstream traffic.

    Totals only grow. The REC bill is the priced energy still uncovered
    after the host's surplus offset, never negative.
    """

    def __init__(self, c0: float = 0.0, offset_credit_kwh: float = 0.0):
        self.c0 = c0
        self.offset_credit_kwh = offset_credit_kwh
        self.link_energy_kwh = 0.0
        self.server_energy_kwh = 0.0
        self.total_carbon_kg = 0.0
        self.first_update: Optional[float] = None
        self.last_update: Optional[float] = None
        self._lock = threading.Lock()

    def accumulate(self, link_kwh: float = 0.0, server_kwh: float = 0.0, carbon_kg: float = 0.0,
                   timestamp: Optional[float] = None) -> None:
        if min(link_kwh, server_kwh, carbon_kg) < 0:
            raise DomainError("emission increments must be non-negative")
        ts = time.time() if timestamp is None else timestamp
        with self._lock:
            self.link_energy_kwh += link_kwh
            self.server_energy_kwh += server_kwh
            self.total_carbon_kg += carbon_kg
            if self.first_update is None:
                self.first_update = ts
            self.last_update = ts

    @property
    def energy_to_offset_kwh(self) -> float:
        return max(0.0, self.link_energy_kwh + self.server_energy_kwh - self.offset_credit_kwh)

    @property
    def rec_cost_usd(self) -> float:
        return self.c0 * self.energy_to_offset_kwh

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "link_energy_kwh": self.link_energy_kwh,
                "server_energy_kwh": self.server_energy_kwh,
                "offset_credit_kwh": self.offset_credit_kwh,
                "energy_to_offset_kwh": self.energy_to_offset_kwh,
                "total_carbon_kg": self.total_carbon_kg,
                "rec_cost_usd": self.rec_cost_usd,
                "first_update": self.first_update,
                "last_update": self.last_update,
            }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2)


def offset_requirement(
    traffic: TrafficLedger,
    profile: ServerProfile,
    intensity: EnergyIntensity,
    params: CostParams,
    requests_per_user_per_year: float,
    n_instances: int = 1,
    ignore_link_energy: bool = True,
    route: Optional[Sequence[RouteHop]] = None,
    default_carbon_intensity: Optional[float] = None,
) -> EmissionLedger:
    """
    Turn measured proxy traffic into the energy and REC spend to offset.

    Link energy covers all bytes the proxy moved in either direction;
    server energy is charged per cache miss. The green host's surplus for
    ``n_instances`` instances is credited against the total.
    """
    if n_instances < 1:
        raise DomainError("n_instances must be at least 1")
    link_kwh = 0.0 if ignore_link_energy else link_energy(traffic.total_link_bytes, intensity).kwh
    server_kwh = traffic.misses * server_energy_per_request(profile, requests_per_user_per_year)

    if route:
        link_kg = route_carbon(route, link_kwh)
    else:
        if default_carbon_intensity is None:
            default_carbon_intensity = load_region_table().default
        link_kg = link_kwh / 1000.0 * default_carbon_intensity
    server_kg = traffic.misses * server_carbon_per_request(profile, requests_per_user_per_year)

    ledger = EmissionLedger(c0=params.c0, offset_credit_kwh=n_instances * params.offset_credit_per_instance)
    ledger.accumulate(link_kwh, server_kwh, link_kg + server_kg)
    return ledger
