"""
What the proxy's traffic costs in carbon
========================================

Link energy for a year of mail, the carbon of a measured network route,
and the renewable credits needed to offset the mail server's share.
"""

from pathlib import Path

from greenproxy.carbon import (
    EnergyIntensity,
    ServerProfile,
    ingest_route_file,
    link_energy,
    offset_requirement,
    route_carbon,
    traffic_bytes,
)
from greenproxy.costmodel import CostParams
from greenproxy.ledger import TrafficLedger

here = Path(__file__).parent

# a year of 100 KB mails for 500 users at 24.3 kWh per GB
nbytes = traffic_bytes(500, 50, 100_000, 365)
kwh = link_energy(nbytes, EnergyIntensity(24.3)).kwh
print(f"{nbytes / 1e9:.1f} GB over the network -> {kwh:,.2f} kWh")
print(f"share of 24.5 TWh of yearly Internet energy: {kwh / 24.5e9:.1e}")

# spread 1 MWh over the hops of a measured route
hops = ingest_route_file(here / "data" / "route.csv")
for h in hops:
    print(f"  {h.address:15s} {h.region:16s} {h.carbon_intensity:6.0f} kg/MWh")
print(f"1 MWh along this route: {route_carbon(hops, 1000):.0f} kg CO2")

# offset for one year where 88% of reads miss the cache
requests = 500 * 50 * 365
traffic = TrafficLedger(misses=round(0.88 * requests), hits=requests - round(0.88 * requests),
                        bytes_from_upstream=round(nbytes))
profile = ServerProfile(users_served=500, annual_energy_per_user=28.4, annual_carbon_per_user=16.7)
params = CostParams(lambda_=requests / 12, T=12, beta=1e6, H=14_200 / requests, c0=0.02, cv=26.28)
for ignore in (True, False):
    led = offset_requirement(traffic, profile, EnergyIntensity(24.3), params, 50 * 365,
                             ignore_link_energy=ignore, route=hops)
    label = "servers only " if ignore else "with links   "
    print(f"{label}: offset {led.energy_to_offset_kwh:9,.2f} kWh, REC ${led.rec_cost_usd:8.2f}")
