"""greenproxy: a carbon-aware IMAP caching proxy and its cost optimizer."""

from .cache import CacheKey, HashRing, ShardedCache
from .costmodel import CostParams, DomainError, EnergyAmount, rec_cost, instance_cost, total_cost
from .ledger import TrafficLedger
from .missrate import Empirical, Exponential, PowerLaw, fit_miss_rate, solve_optimal_instances, validate_model
from .workload import WorkloadSpec, generate_trace, replay

__version__ = "0.1.0"
