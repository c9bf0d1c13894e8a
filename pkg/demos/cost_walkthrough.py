"""
Operating cost of a green proxy
===============================

Walks through the yearly bill for a 500-user mail service behind one
green instance, then asks how many instances would be cheapest once a
cache sits in front of the mail server.
"""

import dataclasses

from greenproxy.costmodel import CostParams, instance_cost, rec_cost, total_cost
from greenproxy.missrate import Exponential, cost_coefficients, solve_optimal_instances

# 500 users reading 50 mails a day for a year; rates are per month
requests_per_year = 500 * 50 * 365
p = CostParams(
    lambda_=requests_per_year / 12,
    T=12,
    beta=1e6,
    H=14_200 / requests_per_year,  # the mail server burns 14,200 kWh a year
    c0=0.02,                       # USD per kWh of renewable credit
    cv=26.28,                      # USD per instance per month
)

# one instance and a cache that misses 88% of the time
print(f"REC spend      ${rec_cost(p, 1, 0.88):8.2f}")
print(f"instance rent  ${instance_cost(p, 1):8.2f}")
print(f"total          ${total_cost(p, 1, 0.88):8.2f}")

# a miss-rate curve that falls as instances (and cache) are added
model = Exponential(m0=0.9, k=0.5)
for n in (1, 2, 4, 8):
    print(f"N={n}: miss rate {float(model(n)):.3f}, total ${total_cost(p, n, float(model(n))):.2f}")

# the optimizer balances REC savings against rent
res = solve_optimal_instances(p, model)
print(f"cheapest: N*={res.n_star} ({res.binding_constraint.value}), ${res.cost_at_n_star:.2f}")

# a dearer mail server changes the answer
dear = dataclasses.replace(p, H=p.H * 50)
c1, c2 = cost_coefficients(dear)
res = solve_optimal_instances(dear, model)
print(f"with 50x server energy: C1={c1:.0f}, C2={c2:.2f}, N*={res.n_star}, ${res.cost_at_n_star:.2f}")

# a host whose surplus credits outweigh rent: only the SLA floor binds
surplus = CostParams(lambda_=10, T=1, beta=3, H=1, c0=0.1, cv=1, Ev=10, r=3.0, rT=1.0)
res = solve_optimal_instances(surplus, model)
print(f"surplus host: C2={cost_coefficients(surplus)[1]:.2f}, N*={res.n_star} ({res.binding_constraint.value})")
