import json
import threading

import pytest
from hypothesis import given, strategies as st

from greenproxy.carbon import (
    MEDIUM_SERVER,
    EmissionLedger,
    EnergyIntensity,
    RegionTable,
    RouteFileError,
    RouteHop,
    ServerProfile,
    export_route_file,
    ingest_route_file,
    link_energy,
    load_region_table,
    offset_requirement,
    route_carbon,
    server_energy_per_request,
    traffic_bytes,
)
from greenproxy.costmodel import CostParams, DomainError, EnergyAmount
from greenproxy.ledger import TrafficLedger

YEAR_REQ = 50 * 365  # per user


def params(**kw):
    base = dict(lambda_=1, T=1, beta=1, c0=0.02)
    base.update(kw)
    return CostParams(**base)


def test_link_energy_examples():
    assert link_energy(0).kwh == 0.0
    assert link_energy(10**9).kwh == pytest.approx(24.3)
    assert link_energy(912_500_000_000).kwh == pytest.approx(22_173.75, rel=1e-12)


def test_yearly_traffic_and_negligibility():
    nbytes = traffic_bytes(500, 50, 100_000, 365)
    assert nbytes == 912_500_000_000
    kwh = link_energy(nbytes, EnergyIntensity(24.3)).kwh
    assert kwh == pytest.approx(22_173, rel=1e-3)
    assert kwh / 24.5e9 < 1e-5


def test_link_energy_rejects_negative():
    with pytest.raises(DomainError):
        link_energy(-1)
    with pytest.raises(DomainError):
        EnergyIntensity(0)


@given(st.integers(0, 10**15), st.integers(0, 10**15))
def test_link_energy_additive(a, b):
    assert link_energy(a + b).kwh == pytest.approx(link_energy(a).kwh + link_energy(b).kwh, rel=1e-12, abs=1e-12)


def test_server_profile():
    assert MEDIUM_SERVER.annual_energy == pytest.approx(14_200)
    assert server_energy_per_request(MEDIUM_SERVER, YEAR_REQ) == pytest.approx(1.556e-3, rel=1e-3)
    assert server_energy_per_request(ServerProfile(1, 28.4, 1), 28.4) == 1.0
    with pytest.raises(DomainError):
        server_energy_per_request(MEDIUM_SERVER, 0)
    with pytest.raises(DomainError):
        ServerProfile(0, 1, 1)


def test_route_carbon_examples():
    hop = RouteHop("10.0.0.1", "Columbus, Ohio", 1030)
    assert route_carbon([hop], EnergyAmount.from_mwh(1)) == pytest.approx(1030)
    assert route_carbon([], 1000) == 0.0
    two = [RouteHop("a", "x", 1000), RouteHop("b", "y", 500)]
    assert route_carbon(two, EnergyAmount.from_mwh(2)) == pytest.approx(1500)
    with pytest.raises(DomainError):
        route_carbon(two, -1)
    with pytest.raises(DomainError):
        RouteHop("a", "x", -1)


@given(st.lists(st.floats(0, 5000), min_size=1, max_size=30), st.floats(0, 1e6))
def test_route_conservation(intensities, kwh):
    hops = [RouteHop(str(i), "r", c) for i, c in enumerate(intensities)]
    expected = kwh / 1000 * sum(intensities) / len(intensities)
    assert route_carbon(hops, kwh) == pytest.approx(expected, rel=1e-9, abs=1e-9)


def write_route(path, rows, header="hop_index,ip,region"):
    path.write_text(header + "\n" + "".join(f"{r}\n" for r in rows))
    return path


def test_ingest_route_file_orders_hops(tmp_path):
    p = write_route(tmp_path / "r.csv", ["2,10.0.0.2,Ohio", "1,10.0.0.1,\"Columbus, Ohio\"", "3,10.0.0.3,Ohio"])
    hops = ingest_route_file(p)
    assert [h.address for h in hops] == ["10.0.0.1", "10.0.0.2", "10.0.0.3"]
    assert all(h.carbon_intensity == 1030 and not h.unknown_region for h in hops)


def test_unknown_region_gets_default_and_warning(tmp_path):
    table = RegionTable({"Ohio": 1030}, default=700)
    p = write_route(tmp_path / "r.csv", ["1,10.0.0.1,Atlantis"])
    with pytest.warns(UserWarning, match="Atlantis"):
        hops = ingest_route_file(p, table)
    assert hops[0].unknown_region and hops[0].carbon_intensity == 700


@pytest.mark.parametrize("rows,header", [
    (["1,a,Ohio", "1,b,Ohio"], "hop_index,ip,region"),
    (["x,a,Ohio"], "hop_index,ip,region"),
    (["1,a"], "hop_index,ip,region"),
    (["1,a,Ohio"], "index,ip,region"),
])
def test_malformed_route_files(tmp_path, rows, header):
    with pytest.raises(RouteFileError):
        ingest_route_file(write_route(tmp_path / "r.csv", rows, header))


def test_route_round_trip(tmp_path):
    p = write_route(tmp_path / "r.csv", ["1,10.0.0.1,Ohio", "5,10.0.0.9,\"Columbus, Ohio\"", "9,10.1.1.1,Ohio"])
    hops = ingest_route_file(p)
    export_route_file(hops, tmp_path / "out.csv")
    assert ingest_route_file(tmp_path / "out.csv") == hops


def test_region_table(tmp_path):
    t = load_region_table()
    assert t.lookup("Columbus, Ohio") == (1030.0, True)
    assert t.lookup("nowhere")[1] is False
    custom = tmp_path / "t.json"
    custom.write_text(json.dumps({"regions": {"X": 5}, "default": 9}))
    assert load_region_table(custom).lookup("Y") == (9.0, False)
    custom.write_text(json.dumps({"regions": {}}))
    with pytest.raises(RouteFileError):
        load_region_table(custom)


# -- offsets ---------------------------------------------------------------


def test_offset_requirement_worked_example():
    traffic = TrafficLedger(misses=8_030_000, hits=1_095_000)
    led = offset_requirement(traffic, MEDIUM_SERVER, EnergyIntensity(), params(), YEAR_REQ)
    assert led.energy_to_offset_kwh == pytest.approx(12_496, rel=1e-9)
    assert led.rec_cost_usd == pytest.approx(249.92, abs=0.005)
    assert led.link_energy_kwh == 0.0


def test_offset_zero_when_nothing_missed():
    led = offset_requirement(TrafficLedger(hits=10, bytes_to_client=10**6), MEDIUM_SERVER, EnergyIntensity(),
                             params(), YEAR_REQ)
    assert led.energy_to_offset_kwh == 0.0 and led.rec_cost_usd == 0.0 and led.total_carbon_kg == 0.0


def test_link_toggle_adds_link_energy():
    traffic = TrafficLedger(misses=8_030_000, bytes_from_upstream=912_500_000_000)
    off = offset_requirement(traffic, MEDIUM_SERVER, EnergyIntensity(), params(), YEAR_REQ)
    on = offset_requirement(traffic, MEDIUM_SERVER, EnergyIntensity(), params(), YEAR_REQ,
                            ignore_link_energy=False)
    assert on.energy_to_offset_kwh - off.energy_to_offset_kwh == pytest.approx(22_173.75, rel=1e-9)


def test_host_surplus_is_credited_and_floored():
    traffic = TrafficLedger(misses=1000)
    p = params(Ev=1.0, r=2.0, rT=1.0)
    per_req = server_energy_per_request(MEDIUM_SERVER, YEAR_REQ)
    one = offset_requirement(traffic, MEDIUM_SERVER, EnergyIntensity(), p, YEAR_REQ, n_instances=1)
    assert one.energy_to_offset_kwh == pytest.approx(1000 * per_req - 1.0)
    many = offset_requirement(traffic, MEDIUM_SERVER, EnergyIntensity(), p, YEAR_REQ, n_instances=100)
    assert many.energy_to_offset_kwh == 0.0 and many.rec_cost_usd == 0.0


def test_route_carbon_used_for_links():
    traffic = TrafficLedger(bytes_from_upstream=10**9)
    hops = [RouteHop("a", "x", 1000), RouteHop("b", "y", 0)]
    led = offset_requirement(traffic, MEDIUM_SERVER, EnergyIntensity(), params(), YEAR_REQ,
                             ignore_link_energy=False, route=hops)
    assert led.total_carbon_kg == pytest.approx(24.3 / 1000 * 500)


@given(st.integers(0, 10**7), st.integers(0, 10**7), st.integers(0, 10**12), st.integers(0, 10**12))
def test_offset_monotone(m1, m2, b1, b2):
    def energy(m, b):
        t = TrafficLedger(misses=m, bytes_from_upstream=b)
        return offset_requirement(t, MEDIUM_SERVER, EnergyIntensity(), params(Ev=5, r=2), YEAR_REQ,
                                  ignore_link_energy=False).energy_to_offset_kwh

    assert energy(min(m1, m2), min(b1, b2)) <= energy(max(m1, m2), max(b1, b2)) + 1e-9
    assert energy(m1, b1) >= 0


def test_emission_ledger_accumulates_concurrently():
    led = EmissionLedger(c0=0.5)

    def work():
        for _ in range(1000):
            led.accumulate(link_kwh=0.001, server_kwh=0.002, carbon_kg=0.003)

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    snap = led.snapshot()
    assert snap["link_energy_kwh"] == pytest.approx(8.0)
    assert snap["server_energy_kwh"] == pytest.approx(16.0)
    assert snap["rec_cost_usd"] == pytest.approx(12.0)
    assert snap["first_update"] <= snap["last_update"]
    with pytest.raises(DomainError):
        led.accumulate(link_kwh=-1)
    assert json.loads(led.to_json())["total_carbon_kg"] == pytest.approx(24.0)
