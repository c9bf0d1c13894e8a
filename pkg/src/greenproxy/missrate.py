"""
Miss-rate models ``M(N)`` and the instance-count optimizer built on them.

A model maps the number of provisioned cache instances to the steady-state
fraction of requests that go upstream. The optimizer minimises

    c0 * [lambda*T*u + lambda*T*(G + H)*M(N) - N*Ev*(r - rT)]_+ + N*cv*T

subject to ``beta * N >= lambda`` over integer ``N``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.optimize import brentq, isotonic_regression

from .costmodel import (
    CostParams,
    DomainError,
    instance_cost,
    rec_cost,
    rec_energy,
    sla_min_instances,
    total_cost,
)

N_MAX = 10**6
ROOT_XTOL = 1e-9


class FitError(ValueError):
    pass


class ModelValidationError(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(f"miss-rate model failed validation: {report.failures()}")
        self.report = report


# --------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class Exponential:
    """``M(N) = m0 * exp(-k * N)``."""

    m0: float
    k: float

    def __call__(self, N):
        return self.m0 * np.exp(-self.k * N)

    def derivative(self, N):
        return -self.k * self.m0 * np.exp(-self.k * N)

    def second_derivative(self, N):
        return self.k**2 * self.m0 * np.exp(-self.k * N)


@dataclass(frozen=True)
class PowerLaw:
    """``M(N) = min(1, a * N**-b)``."""

    a: float
    b: float

    def __call__(self, N):
        return np.minimum(1.0, self.a * np.power(N, -self.b, dtype=float))

    def derivative(self, N):
        raw = self.a * np.power(N, -self.b, dtype=float)
        d = -self.a * self.b * np.power(N, -self.b - 1.0, dtype=float)
        return np.where(raw > 1.0, 0.0, d)

    def second_derivative(self, N):
        raw = self.a * np.power(N, -self.b, dtype=float)
        d2 = self.a * self.b * (self.b + 1.0) * np.power(N, -self.b - 2.0, dtype=float)
        return np.where(raw > 1.0, 0.0, d2)


@dataclass(frozen=True)
class Empirical:
    """
    Measured miss rates, linearly interpolated between points and held
    constant beyond either end.
    """

    points: tuple

    def __post_init__(self):
        pts = tuple(sorted((float(n), float(m)) for n, m in self.points))
        if not pts:
            raise DomainError("empirical model needs at least one point")
        ns = [n for n, _ in pts]
        if len(set(ns)) != len(ns):
            raise DomainError("empirical model has duplicate N values")
        if ns[0] <= 0:
            raise DomainError("empirical N values must be positive")
        object.__setattr__(self, "points", pts)

    @property
    def ns(self) -> np.ndarray:
        return np.array([n for n, _ in self.points])

    @property
    def misses(self) -> np.ndarray:
        return np.array([m for _, m in self.points])

    def __call__(self, N):
        return np.interp(N, self.ns, self.misses)

    def derivative(self, N):
        # central difference, unit step
        return (self(N + 1.0) - self(N - 1.0)) / 2.0


MissRateModel = Union[Exponential, PowerLaw, Empirical]

PARAMETRIC = (Exponential, PowerLaw)


def evaluate(model: MissRateModel, N) -> float:
    if np.any(np.asarray(N) < 1):
        raise DomainError(f"N must be >= 1, got {N}")
    out = model(N)
    return float(out) if np.ndim(out) == 0 else out


def model_to_dict(model: MissRateModel) -> dict:
    if isinstance(model, Empirical):
        return {"variant": "empirical", "points": [list(p) for p in model.points]}
    return {"variant": type(model).__name__.lower(), **asdict(model)}


def model_from_dict(data: dict) -> MissRateModel:
    data = dict(data)
    variant = data.pop("variant", None)
    cls = {"exponential": Exponential, "powerlaw": PowerLaw, "empirical": Empirical}.get(variant)
    if cls is None:
        raise DomainError(f"unknown miss-rate model variant {variant!r}")
    if cls is Empirical:
        return Empirical(tuple(tuple(p) for p in data["points"]))
    return cls(**data)


# --------------------------------------------------------------------------
# validation


@dataclass
class CheckResult:
    passed: bool
    violation: object = None  # first offending N, or an (N1, N2) pair


@dataclass
class ValidationReport:
    """Outcome of the three shape checks on a miss-rate model."""

    bounded: CheckResult
    monotone: CheckResult
    diminishing_returns: CheckResult

    @property
    def ok(self) -> bool:
        return self.bounded.passed and self.monotone.passed and self.diminishing_returns.passed

    def failures(self) -> dict:
        return {
            name: getattr(self, name).violation
            for name in ("bounded", "monotone", "diminishing_returns")
            if not getattr(self, name).passed
        }


_GRID = np.unique(np.concatenate([np.linspace(1.0, 1000.0, 20_000), np.geomspace(1.0, 1000.0, 2_000)]))


def _first(grid, bad):
    idx = np.flatnonzero(bad)
    return None if idx.size == 0 else float(grid[idx[0]])


def validate_model(model: MissRateModel) -> ValidationReport:
    """
    Check a model against the three assumptions the optimizer relies on:
    values in [0, 1] tending to zero, non-increasing in N, and a
    non-decreasing slope (diminishing returns).

    Parametric models are checked on a dense grid over [1, 1000] plus their
    analytic limit. Empirical tables are checked pairwise; their limit is
    not observable, so only the range is checked.
    """
    if isinstance(model, Empirical):
        ns, ms = model.ns, model.misses
        bad = (ms < 0) | (ms > 1)
        bounded = CheckResult(not bad.any(), _first(ns, bad))
        drops = np.diff(ms)
        idx = np.flatnonzero(drops > 0)
        monotone = CheckResult(idx.size == 0, None if idx.size == 0 else (ns[idx[0]], ns[idx[0] + 1]))
        if len(ns) < 3:
            dim = CheckResult(True)
        else:
            slopes = drops / np.diff(ns)
            idx = np.flatnonzero(np.diff(slopes) < -1e-12)
            dim = CheckResult(idx.size == 0, None if idx.size == 0 else float(ns[idx[0] + 1]))
        return ValidationReport(bounded, monotone, dim)

    grid = _GRID
    values = model(grid)
    bad = (values < 0) | (values > 1)
    if isinstance(model, Exponential):
        tends_to_zero = model.m0 == 0 or model.k > 0
    else:
        tends_to_zero = model.a == 0 or model.b > 0
    violation = _first(grid, bad)
    if violation is None and not tends_to_zero:
        violation = math.inf
    bounded = CheckResult(violation is None, violation)

    steps = np.diff(values)
    monotone = CheckResult(not (steps > 0).any(), _first(grid[1:], steps > 0))

    slopes = model.derivative(grid)
    scale = max(1e-300, float(np.max(np.abs(slopes))))
    worse = np.diff(slopes) < -1e-12 * scale
    dim = CheckResult(not worse.any(), _first(grid[1:], worse))
    return ValidationReport(bounded, monotone, dim)


# --------------------------------------------------------------------------
# fitting


def fit_miss_rate(observations: Sequence, variant: str = "exponential") -> MissRateModel:
    """
    Fit a model to ``(N, miss_rate)`` observations.

    Exponential and power-law fits are least squares in log space; points
    with a zero miss rate carry no information there and are dropped.
    The empirical variant averages repeated N, then pools non-monotone runs
    by isotonic regression.
    """
    obs = [(float(n), float(m)) for n, m in observations]
    if len(obs) < 3:
        raise FitError(f"need at least 3 observations, got {len(obs)}")
    for n, m in obs:
        if not 0.0 <= m <= 1.0:
            raise FitError(f"miss rate {m} at N={n} is outside [0, 1]")
        if n <= 0:
            raise FitError(f"N must be positive, got {n}")
    if len({n for n, _ in obs}) < 2:
        raise FitError("need at least 2 distinct N values")

    variant = variant.lower()
    if variant == "empirical":
        ns = sorted({n for n, _ in obs})
        means = np.array([np.mean([m for n2, m in obs if n2 == n]) for n in ns])
        counts = np.array([sum(1 for n2, _ in obs if n2 == n) for n in ns], dtype=float)
        pooled = isotonic_regression(means, weights=counts, increasing=False).x
        return Empirical(tuple(zip(ns, np.clip(pooled, 0.0, 1.0).tolist())))

    if variant not in ("exponential", "powerlaw"):
        raise FitError(f"unknown variant {variant!r}")
    positive = [(n, m) for n, m in obs if m > 0]
    if not positive:
        raise FitError("all miss rates are zero; log-space fit undefined")
    if len({n for n, _ in positive}) < 2:
        raise FitError("need at least 2 distinct N with non-zero miss rate")
    n = np.array([p[0] for p in positive])
    log_m = np.log([p[1] for p in positive])
    if variant == "exponential":
        slope, intercept = np.polyfit(n, log_m, 1)
        return Exponential(m0=float(np.exp(intercept)), k=_tidy(-slope))
    slope, intercept = np.polyfit(np.log(n), log_m, 1)
    return PowerLaw(a=float(np.exp(intercept)), b=_tidy(-slope))


def _tidy(x: float) -> float:
    # a flat fit should report exactly zero decay
    return 0.0 if abs(x) < 1e-12 else float(x)


# --------------------------------------------------------------------------
# optimisation


class Binding(str, enum.Enum):
    COST_MINIMUM = "CostMinimum"
    SLA_BOUND = "SlaBound"


@dataclass
class OptimizerResult:
    n_star: int
    binding_constraint: Binding
    c1: float
    c2: float
    cost_at_n_star: float
    rec_cost: float = 0.0
    instance_cost: float = 0.0
    miss_rate: float = 0.0
    continuous_optimum: float = math.nan
    at_search_boundary: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["binding_constraint"] = self.binding_constraint.value
        if math.isinf(d["continuous_optimum"]) or math.isnan(d["continuous_optimum"]):
            d["continuous_optimum"] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def cost_coefficients(params: CostParams) -> tuple:
    """
    Return ``(C1, C2)`` of the cost derivative ``C1*M'(N) + C2``.

    C1 prices the upstream energy of every request; C2 is the net cost of
    adding one instance (rent minus the value of its surplus offset).
    """
    c1 = params.total_requests * (params.G + params.H) * params.c0
    c2 = params.cv * params.T - params.Ev * params.c0 * (params.r - params.rT)
    return c1, c2


def cost_derivative(params: CostParams, model: MissRateModel, N: float) -> float:
    """d(total cost)/dN for the unclamped REC term."""
    c1, c2 = cost_coefficients(params)
    return float(c1 * model.derivative(N) + c2)


def _stationary_point(model, c1: float, c2: float, n_max: float) -> float:
    """Smallest N in [1, n_max] where C1*M'(N) + C2 >= 0; n_max if none."""

    def slope(n):
        return c1 * float(model.derivative(n)) + c2

    if slope(1.0) >= 0:
        return 1.0
    if isinstance(model, Exponential) and c2 > 0 and model.k > 0 and c1 * model.m0 > 0:
        n = math.log(c1 * model.m0 * model.k / c2) / model.k
        return min(max(1.0, n), float(n_max))
    if slope(n_max) < 0:
        return float(n_max)
    return brentq(slope, 1.0, n_max, xtol=ROOT_XTOL)


def _offset_exhaustion_point(params: CostParams, model, n_max: float) -> float:
    """N beyond which host surplus covers all REC demand (inf if never)."""

    def need(n):
        return rec_energy(params, n, float(model(n)))

    if need(1.0) <= 0:
        return 1.0
    if need(n_max) > 0:
        return math.inf
    return brentq(need, 1.0, n_max, xtol=ROOT_XTOL)


def _cost_at(params, model, n: int) -> float:
    return total_cost(params, n, float(model(n)))


def solve_optimal_instances(params: CostParams, model: MissRateModel, n_max: int = N_MAX) -> OptimizerResult:
    """
    Cheapest integer instance count that still meets the SLA.

    For a validated parametric model the clamped cost is convex in N: it
    follows the smooth cost while RECs are still needed and grows with the
    instance rent once host surplus covers everything. The continuous
    minimiser is therefore the earlier of the stationary point and the
    offset-exhaustion point; the integer answer is whichever neighbour of
    that (after applying the SLA floor) is cheaper, ties going to fewer
    instances.

    Empirical tables need not be convex, so they are searched exhaustively
    over their measured range and the exhaustion point.
    """
    report = validate_model(model)
    empirical = isinstance(model, Empirical)
    # empirical tables may be locally non-convex; the grid search copes
    if not (report.bounded.passed and report.monotone.passed) or (not empirical and not report.ok):
        raise ModelValidationError(report)

    n_sla = sla_min_instances(params)
    c1, c2 = cost_coefficients(params)
    notes = []
    at_boundary = False

    if empirical:
        nz = _offset_exhaustion_point(params, model, n_max)
        upper = max(n_sla, math.ceil(model.ns[-1]))
        candidates = set(range(1, min(upper, n_max) + 1))
        if math.isfinite(nz):
            candidates |= {math.floor(nz), math.ceil(nz)}
        else:
            # constant tail and surplus never covers demand: cost is
            # linear there, so the last measured point is as good as it gets
            # unless rent is negative, which CostParams forbids
            pass
        candidates = sorted(c for c in candidates if 1 <= c <= n_max)
        unconstrained = min(candidates, key=lambda n: (_cost_at(params, model, n), n))
        feasible = [c for c in candidates if c >= n_sla] or [n_sla]
        n_star = min(feasible, key=lambda n: (_cost_at(params, model, n), n))
        continuous = float(unconstrained)
        binding = Binding.SLA_BOUND if unconstrained < n_sla else Binding.COST_MINIMUM
    else:
        ns = _stationary_point(model, c1, c2, n_max)
        nz = _offset_exhaustion_point(params, model, n_max)
        continuous = min(ns, nz)
        if continuous >= n_max:
            at_boundary = True
            notes.append(f"cost still decreasing at N={n_max}; returning the search boundary")
            continuous = float(n_max)
        target = max(continuous, float(n_sla))
        candidates = {max(n_sla, math.floor(target)), max(n_sla, math.ceil(target))}
        n_star = min(sorted(candidates), key=lambda n: (_cost_at(params, model, n), n))
        binding = Binding.SLA_BOUND if continuous <= n_sla else Binding.COST_MINIMUM

    m = float(model(n_star))
    return OptimizerResult(
        n_star=int(n_star),
        binding_constraint=binding,
        c1=c1,
        c2=c2,
        cost_at_n_star=total_cost(params, n_star, m),
        rec_cost=rec_cost(params, n_star, m),
        instance_cost=instance_cost(params, n_star),
        miss_rate=m,
        continuous_optimum=continuous,
        at_search_boundary=at_boundary,
        notes=notes,
    )
