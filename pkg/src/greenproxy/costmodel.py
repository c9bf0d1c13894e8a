"""
Operating cost of a green caching proxy.

Two things cost money: renewable energy credits (RECs) bought to offset
the energy spent outside the proxy, and the green instances the proxy runs
on. All energies are in kWh; the time unit is the hour unless every rate
and price in a :class:`CostParams` is expressed in the same other unit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

JOULES_PER_KWH = 3.6e6
KWH_PER_MWH = 1000.0


class DomainError(ValueError):
    """An argument lies outside the domain of a cost-model function."""


@dataclass(frozen=True)
class EnergyAmount:
    """An amount of energy, stored in kWh."""

    value: float

    def __post_init__(self):
        if not self.value >= 0:
            raise DomainError(f"energy must be non-negative, got {self.value!r}")

    @classmethod
    def from_joules(cls, joules: float) -> EnergyAmount:
        return cls(joules / JOULES_PER_KWH)

    @classmethod
    def from_mwh(cls, mwh: float) -> EnergyAmount:
        return cls(mwh * KWH_PER_MWH)

    @property
    def kwh(self) -> float:
        return self.value

    @property
    def joules(self) -> float:
        return self.value * JOULES_PER_KWH

    @property
    def mwh(self) -> float:
        return self.value / KWH_PER_MWH

    def __add__(self, other: EnergyAmount) -> EnergyAmount:
        return EnergyAmount(self.value + other.value)


@dataclass(frozen=True)
class CostParams:
    """
    Inputs of the cost model.

    Attributes
    ----------
    lambda_ : float
        Request arrival rate (requests per time unit).
    T : float
        Length of the billing period (time units).
    beta : float
        Requests one instance can process per time unit.
    u : float
        Link energy per request between client and proxy (kWh/req).
    G : float
        Link energy per request between proxy and upstream server (kWh/req).
    H : float
        Upstream server energy per request (kWh/req).
    c0 : float
        REC price (USD/kWh).
    cv : float
        Instance price (USD per instance per time unit).
    Ev : float
        Energy one instance uses over the whole period ``T`` (kWh).
    r : float
        Offset ratio sold by the green host (1.0 means 100%).
    rT : float
        Offset ratio the proxy commits to for the whole system.
    """

    lambda_: float
    T: float
    beta: float
    u: float = 0.0
    G: float = 0.0
    H: float = 0.0
    c0: float = 0.0
    cv: float = 0.0
    Ev: float = 0.0
    r: float = 1.0
    rT: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or math.isnan(v) or v < 0:
                raise DomainError(f"{f.name} must be a non-negative number, got {v!r}")
        if self.beta <= 0:
            raise DomainError("beta must be positive")
        if self.T <= 0:
            raise DomainError("T must be positive")
        if self.r < self.rT:
            raise DomainError(f"offset ratio r={self.r} is below the target rT={self.rT}")

    @classmethod
    def from_totals(
        cls,
        total_requests: float,
        T: float,
        beta: float,
        client_link_kwh: float = 0.0,
        upstream_link_kwh: float = 0.0,
        upstream_server_kwh: float = 0.0,
        **kwargs,
    ) -> CostParams:
        """Build params from period totals instead of per-request rates."""
        if total_requests <= 0:
            raise DomainError("total_requests must be positive")
        return cls(
            lambda_=total_requests / T,
            T=T,
            beta=beta,
            u=client_link_kwh / total_requests,
            G=upstream_link_kwh / total_requests,
            H=upstream_server_kwh / total_requests,
            **kwargs,
        )

    @property
    def total_requests(self) -> float:
        return self.lambda_ * self.T

    @property
    def offset_credit_per_instance(self) -> float:
        """Surplus renewable energy one instance contributes over T (kWh)."""
        return self.Ev * (self.r - self.rT)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> CostParams:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise DomainError(f"unknown CostParams fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> CostParams:
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


@dataclass(frozen=True)
class AggregateLoad:
    """Per-period totals implied by a :class:`CostParams`."""

    total_requests: float
    client_link_energy: float
    upstream_link_energy: float
    upstream_server_energy: float

    @classmethod
    def from_params(cls, params: CostParams) -> AggregateLoad:
        n = params.total_requests
        return cls(n, n * params.u, n * params.G, n * params.H)


def _check_instances(N) -> None:
    if N < 1:
        raise DomainError(f"instance count must be at least 1, got {N}")


def _check_miss_rate(miss_rate: float) -> None:
    if not 0.0 <= miss_rate <= 1.0:
        raise DomainError(f"miss rate must lie in [0, 1], got {miss_rate}")


def rec_energy(params: CostParams, N, miss_rate: float) -> float:
    """Energy (kWh) that still needs REC offsets, before clamping at zero."""
    n = params.total_requests
    return (
        n * params.u
        + n * (params.G + params.H) * miss_rate
        - N * params.offset_credit_per_instance
    )


def rec_cost(params: CostParams, N, miss_rate: float) -> float:
    """
    REC spend (USD) for ``N`` instances at the given miss rate.

    Surplus offset from the green host reduces the spend but never below
    zero; surplus credits are not resold.
    """
    _check_instances(N)
    _check_miss_rate(miss_rate)
    return params.c0 * max(0.0, rec_energy(params, N, miss_rate))


def instance_cost(params: CostParams, N) -> float:
    """Rental (USD) of ``N`` instances over the period."""
    _check_instances(N)
    return N * params.cv * params.T


def total_cost(params: CostParams, N, miss_rate: float) -> float:
    return rec_cost(params, N, miss_rate) + instance_cost(params, N)


def sla_min_instances(params: CostParams) -> int:
    """Smallest instance count whose combined processing rate covers the load."""
    if params.beta <= 0:
        raise DomainError("beta must be positive")
    n = math.ceil(params.lambda_ / params.beta)
    # guard against ceil(10.000000000000002) style overshoot
    if n > 1 and params.beta * (n - 1) >= params.lambda_:
        n -= 1
    return max(1, n)
