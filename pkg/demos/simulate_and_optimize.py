"""
From a synthetic workload to an instance count
==============================================

Generates a Zipf mail workload, replays it through LRU caches of growing
size, fits a miss-rate curve to the result and hands it to the optimizer.
"""

import numpy as np

from greenproxy.costmodel import CostParams
from greenproxy.missrate import fit_miss_rate, solve_optimal_instances, validate_model
from greenproxy.workload import WorkloadSpec, generate_trace, replay, working_set_footprint

# 10,000 messages of about 40 KB, 10 reads a second for 2,000 seconds
spec = WorkloadSpec(num_messages=10_000, arrival_rate=10, duration=2_000, seed=1)
trace = generate_trace(spec)
footprint = working_set_footprint(trace)
print(f"{len(trace)} reads touching {footprint / 1e6:.0f} MB")

# one capacity unit is a sixth of the working set
unit = footprint // 6
curve = []
for k in (1, 2, 3, 4, 6):
    rep = replay(trace, k * unit)
    curve.append((k, rep.steady_state_miss_rate))
    print(f"{k} units: steady-state miss rate {rep.steady_state_miss_rate:.3f} "
          f"(capacity misses only {rep.steady_state_capacity_miss_rate:.3f})")

# fit the curve and check it has the shape the optimizer relies on
model = fit_miss_rate(curve, "exponential")
print("fitted:", model, "valid:", validate_model(model).ok)
residual = np.array([m - float(model(n)) for n, m in curve])
print("fit residuals:", np.round(residual, 3))

# a busy service where upstream energy is costly
p = CostParams(lambda_=1e6, T=12, beta=1e6, H=0.05, c0=0.1, cv=5.0)
res = solve_optimal_instances(p, model)
print(f"N*={res.n_star} ({res.binding_constraint.value}): REC ${res.rec_cost:.2f} "
      f"+ instances ${res.instance_cost:.2f} = ${res.cost_at_n_star:.2f}")
