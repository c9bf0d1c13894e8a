"""
``greenproxy`` command line.

Subcommands: optimize, simulate, estimate, proxy, report, config-schema.
Results go to stdout as JSON (and to ``--out`` when given); short
human-readable summaries go to stderr.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import dataclasses
import json
import logging
import signal
import sys
import time
from pathlib import Path

from .cache import CacheConfigError
from .carbon import RouteFileError, ingest_route_file, link_energy, offset_requirement, route_carbon, traffic_bytes
from .config import ConfigError, config_schema, load_config
from .costmodel import DomainError, instance_cost, rec_cost, rec_energy, sla_min_instances, total_cost
from .imap.proxy import ImapProxy, parse_hostport
from .ledger import TrafficLedger
from .missrate import FitError, ModelValidationError, fit_miss_rate, solve_optimal_instances, validate_model
from .missrate import model_to_dict
from .workload import WorkloadError, generate_trace, replay, working_set_footprint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
WORLD_ANNUAL_KWH = 24.5e9  # yardstick for how small link energy is
log = logging.getLogger("greenproxy")


class RuntimeFailure(RuntimeError):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _emit(result: dict, out=None) -> None:
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        path = Path(out)
        if path.is_dir():
            path = path / "result.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


def _overrides(args) -> list:
    extra = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        extra.append(f"workload.seed={args.seed}")
    if getattr(args, "ignore_link_energy", None) is not None:
        extra.append(f"carbon.ignore_link_energy={json.dumps(args.ignore_link_energy)}")
    return extra


def _cost_breakdown(params, n: int, m: float) -> dict:
    return {
        "instances": n,
        "miss_rate": m,
        "rec_energy_kwh": max(0.0, rec_energy(params, n, m)),
        "rec_cost": rec_cost(params, n, m),
        "instance_cost": instance_cost(params, n),
        "total_cost": total_cost(params, n, m),
        "sla_min_instances": sla_min_instances(params),
        "meets_sla": n >= sla_min_instances(params),
    }


# --------------------------------------------------------------------------
# optimize


def read_observations(path) -> list:
    """``(N, miss_rate)`` pairs from a CSV with ``n`` and ``miss_rate`` columns."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"n", "miss_rate"} <= set(reader.fieldnames):
                raise RuntimeFailure(f"{path}: expected columns n, miss_rate")
            return [(float(r["n"]), float(r["miss_rate"])) for r in reader]
    except (OSError, ValueError) as exc:
        raise RuntimeFailure(f"cannot read observations {path}: {exc}") from exc


def cmd_optimize(cfg, args) -> dict:
    params = cfg.cost.params()
    if args.miss_rate is not None:
        if args.instances is None:
            raise ConfigError("--miss-rate needs --instances (a fixed miss rate has no optimum)")
        result = {"mode": "evaluate", "cost": _cost_breakdown(params, args.instances, args.miss_rate)}
        c = result["cost"]
        _note(f"N={args.instances}: REC ${c['rec_cost']:.2f} + instances ${c['instance_cost']:.2f}"
              f" = ${c['total_cost']:.2f}")
        return result

    if args.observations:
        obs = read_observations(args.observations)
        model = fit_miss_rate(obs, args.variant or cfg.simulate.variant)
        source = {"observations": str(args.observations), "points": len(obs)}
    elif cfg.model is not None:
        model = cfg.miss_model()
        source = {"config_model": True}
    else:
        raise ConfigError("optimize needs --observations, a 'model' in the config, or --miss-rate with --instances")

    if args.instances is not None:
        m = float(model(args.instances))
        return {"mode": "evaluate", "model": model_to_dict(model), "source": source,
                "cost": _cost_breakdown(params, args.instances, m)}

    res = solve_optimal_instances(params, model)
    _note(f"N*={res.n_star} ({res.binding_constraint.value}): REC ${res.rec_cost:.2f}"
          f" + instances ${res.instance_cost:.2f} = ${res.cost_at_n_star:.2f}")
    return {"mode": "optimize", "model": model_to_dict(model), "source": source, "result": res.to_dict()}


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg, args) -> dict:
    spec = cfg.workload.spec()
    sim = cfg.simulate
    capacities = args.capacities if args.capacities is not None else sim.capacities
    if not capacities or min(capacities) <= 0:
        raise ConfigError("capacities must be positive")
    out = Path(args.out or "simulation")
    out.mkdir(parents=True, exist_ok=True)

    trace = generate_trace(spec)
    footprint = working_set_footprint(trace)
    unit = sim.mb_analog_bytes or max(1, footprint // 6)
    spec.to_json(out / "workload.json")

    smallest = min(capacities)
    curve = []
    reports = {}
    for cap in sorted(set(capacities)):
        rep = replay(trace, int(round(cap * unit)), n_intervals=sim.n_intervals, steady_fraction=sim.steady_fraction)
        label = f"{cap:g}"
        rep.to_json(out / f"report_{label}.json")
        rep.write_intervals_csv(out / f"intervals_{label}.csv")
        m = rep.steady_state_capacity_miss_rate if sim.exclude_cold else rep.steady_state_miss_rate
        curve.append({"n": cap / smallest, "capacity_units": cap, "capacity_bytes": rep.capacity_bytes,
                      "miss_rate": m})
        reports[label] = {"steady_state_miss_rate": rep.steady_state_miss_rate,
                          "steady_state_capacity_miss_rate": rep.steady_state_capacity_miss_rate,
                          "misses": rep.misses, "hits": rep.hits}
        _note(f"capacity {label} ({rep.capacity_bytes} B): steady-state miss rate {m:.4f}")

    with open(out / "curve.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n", "capacity_units", "capacity_bytes", "miss_rate"])
        writer.writeheader()
        writer.writerows(curve)

    result = {"out": str(out), "events": len(trace), "footprint_bytes": footprint, "unit_bytes": unit,
              "reports": reports, "curve": curve}
    if len(curve) < 2:
        raise FitError(f"fitting M(N) needs at least 2 capacities, got {len(curve)}; "
                       f"reports and curve.csv were written to {out}")
    model = fit_miss_rate([(c["n"], c["miss_rate"]) for c in curve], sim.variant)
    report = validate_model(model)
    fit = {"model": model_to_dict(model), "valid": report.ok,
           "failures": {k: v for k, v in report.failures().items()}}
    (out / "fit.json").write_text(json.dumps(fit, indent=2, default=str) + "\n")
    result["fit"] = fit
    return result


# --------------------------------------------------------------------------
# estimate

TRAFFIC_KEYS = {"users", "emails_per_user_per_day", "email_size_bytes", "days", "miss_rate"}


def traffic_from_assumptions(path) -> tuple:
    """Turn a traffic assumptions file into a ledger plus the raw byte count."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read traffic assumptions {path}: {exc}") from exc
    unknown = set(data) - TRAFFIC_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        users, per_day, size = data["users"], data["emails_per_user_per_day"], data["email_size_bytes"]
    except KeyError as exc:
        raise ConfigError(f"{path}: missing {exc}") from None
    days = data.get("days", 365)
    miss_rate = data.get("miss_rate", 1.0)
    if not 0 <= miss_rate <= 1:
        raise ConfigError(f"{path}: miss_rate must be in [0, 1]")
    nbytes = traffic_bytes(users, per_day, size, days)
    requests = round(users * per_day * days)
    misses = round(requests * miss_rate)
    ledger = TrafficLedger(bytes_from_upstream=round(nbytes), requests_to_upstream=misses,
                           hits=requests - misses, misses=misses)
    return ledger, nbytes


def emissions(cfg, traffic: TrafficLedger, n_instances=None, route=None) -> dict:
    c = cfg.carbon
    led = offset_requirement(
        traffic, c.profile(), c.intensity(), cfg.cost.params(), c.requests_per_user_per_year,
        n_instances=n_instances or c.n_instances, ignore_link_energy=c.ignore_link_energy,
        route=route, default_carbon_intensity=c.regions().default,
    )
    snap = led.snapshot()
    # accumulation timestamps would make the output differ run to run
    snap.pop("first_update")
    snap.pop("last_update")
    return snap


def cmd_estimate(cfg, args) -> dict:
    traffic = TrafficLedger()
    result = {}
    if args.ledger:
        try:
            traffic = TrafficLedger.read_json(args.ledger)
        except (OSError, ValueError, KeyError) as exc:
            raise RuntimeFailure(f"cannot read ledger {args.ledger}: {exc}") from exc
    if args.traffic:
        assumed, nbytes = traffic_from_assumptions(args.traffic)
        traffic = traffic + assumed
        result["assumed_traffic_bytes"] = nbytes

    link_kwh = link_energy(traffic.total_link_bytes, cfg.carbon.intensity()).kwh
    result["link_energy_estimate_kwh"] = link_kwh
    result["link_energy_share_of_world"] = link_kwh / WORLD_ANNUAL_KWH

    hops = None
    if args.route:
        hops = ingest_route_file(args.route, cfg.carbon.regions())
        energy = args.route_energy_kwh if args.route_energy_kwh is not None else link_kwh
        result["route"] = {
            "hops": [dataclasses.asdict(h) for h in hops],
            "energy_kwh": energy,
            "carbon_kg": route_carbon(hops, energy),
        }
    result["traffic"] = traffic.to_dict()
    result["emissions"] = emissions(cfg, traffic, args.instances, hops)
    result["ignore_link_energy"] = cfg.carbon.ignore_link_energy
    e = result["emissions"]
    _note(f"offset {e['energy_to_offset_kwh']:.2f} kWh, REC ${e['rec_cost_usd']:.2f}; "
          f"link energy {link_kwh:.2f} kWh ({'ignored' if cfg.carbon.ignore_link_energy else 'included'})")
    return result


# --------------------------------------------------------------------------
# proxy


async def _probe(address: tuple, timeout: float) -> None:
    try:
        _, writer = await asyncio.wait_for(asyncio.open_connection(*address), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise RuntimeFailure(f"cannot reach upstream {address[0]}:{address[1]}: {exc or 'timed out'}") from None
    writer.close()


def _proxy_snapshot(cfg, proxy: ImapProxy) -> dict:
    snap = proxy.snapshot()
    snap["address"] = list(proxy.address)
    snap["emissions"] = emissions(cfg, proxy.ledger)
    return snap


async def run_proxy(cfg, out: Path, duration=None) -> dict:
    pc = cfg.proxy
    try:
        upstream = parse_hostport(pc.upstream)
        by_domain = {d: parse_hostport(v) for d, v in pc.upstreams_by_domain.items()}
    except ValueError as exc:
        raise ConfigError(f"bad upstream address: {exc}") from exc
    await _probe(upstream, pc.connect_timeout)

    proxy = ImapProxy(cfg.cache.build(), upstream, by_domain, connect_timeout=pc.connect_timeout)
    try:
        host, port = await proxy.start(pc.listen_host, pc.listen_port)
    except OSError as exc:
        raise RuntimeFailure(f"cannot listen on {pc.listen_host}:{pc.listen_port}: {exc}") from exc
    _note(f"proxy listening on {host}:{port}, upstream {upstream[0]}:{upstream[1]}")

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError, ValueError):
            pass  # not the main thread

    snap_path = out / "proxy_snapshot.json"

    def checkpoint() -> dict:
        proxy.cache.record()
        snap = _proxy_snapshot(cfg, proxy)
        tmp = snap_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(snap, indent=2))
        tmp.replace(snap_path)
        proxy.cache.write_history_csv(out / "cache_history.csv")
        return snap

    checkpoint()
    deadline = None if duration is None else time.monotonic() + duration
    try:
        while not stop.is_set():
            wait = pc.snapshot_interval
            if deadline is not None:
                wait = min(wait, max(0.0, deadline - time.monotonic()))
            try:
                await asyncio.wait_for(stop.wait(), wait)
            except asyncio.TimeoutError:
                pass
            checkpoint()
            if deadline is not None and time.monotonic() >= deadline:
                break
    finally:
        await proxy.close()
    return checkpoint()


def cmd_proxy(cfg, args) -> dict:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    snap = asyncio.run(run_proxy(cfg, out, args.duration))
    led = snap["ledger"]
    _note(f"proxy stopped: {led['hits']} hits, {led['misses']} misses")
    return {"snapshot": str(out / "proxy_snapshot.json"), "ledger": led}


# --------------------------------------------------------------------------
# report


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeFailure(f"cannot read {path}: {exc}") from exc


def cmd_report(cfg, args) -> dict:
    if bool(args.ledger) == bool(args.sim_report):
        raise ConfigError("report needs exactly one of --ledger or --sim-report")
    if args.ledger:
        data = _load_json(args.ledger)
        try:
            traffic = TrafficLedger.from_dict(data.get("ledger", data))
        except (KeyError, ValueError, TypeError) as exc:
            raise RuntimeFailure(f"{args.ledger}: not a ledger or proxy snapshot ({exc})") from exc
        source = "proxy"
    else:
        data = _load_json(args.sim_report)
        try:
            traffic = TrafficLedger(hits=data["hits"], misses=data["misses"], hit_bytes=data["get_bytes"],
                                    miss_bytes=data["set_bytes"], requests_to_upstream=data["misses"])
        except KeyError as exc:
            raise RuntimeFailure(f"{args.sim_report}: not a simulation report (missing {exc})") from None
        source = "simulation"

    t = traffic.to_dict()
    requests = t["hits"] + t["misses"]
    moved = t["hit_bytes"] + t["miss_bytes"]
    miss_rate = t["misses"] / requests if requests else 0.0
    n = args.instances or cfg.carbon.n_instances
    summary = {
        "source": source,
        "requests": requests,
        "hits": t["hits"],
        "misses": t["misses"],
        "hit_rate": traffic.hit_rate,
        "hit_bytes": t["hit_bytes"],
        "miss_bytes": t["miss_bytes"],
        "hit_byte_share": t["hit_bytes"] / moved if moved else 0.0,
        "upstream_bytes": traffic.upstream_link_bytes,
        "emissions": emissions(cfg, traffic, n),
        "annual_cost_at_measured_miss_rate": _cost_breakdown(cfg.cost.params(), n, miss_rate),
    }
    _note(f"{requests} cacheable fetches, hit rate {summary['hit_rate']:.3f}, "
          f"hit bytes {t['hit_bytes']} / miss bytes {t['miss_bytes']}")
    return summary


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="greenproxy", description=__doc__.split("\n\n")[0].strip())
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", parents=[common], help="fit M(N) and find the cheapest instance count")
    o.add_argument("--observations", type=Path, help="CSV with n, miss_rate columns (e.g. simulate's curve.csv)")
    o.add_argument("--variant", choices=["exponential", "powerlaw", "empirical"])
    o.add_argument("--miss-rate", type=float, help="fixed miss rate; use with --instances")
    o.add_argument("--instances", type=int, help="evaluate cost at this N instead of optimizing")

    s = sub.add_parser("simulate", parents=[common], help="replay a synthetic workload at several capacities")
    s.add_argument("--seed", type=int)
    s.add_argument("--capacities", type=_floats, help="comma-separated capacities in MB-analog units")

    e = sub.add_parser("estimate", parents=[common], help="energy, carbon and REC cost of upstream traffic")
    e.add_argument("--ledger", type=Path, help="traffic ledger JSON or proxy snapshot")
    e.add_argument("--traffic", type=Path, help="traffic assumptions JSON")
    e.add_argument("--route", type=Path, help="route CSV (hop_index, ip, region)")
    e.add_argument("--route-energy-kwh", type=float, help="energy to spread over the route (default: link energy)")
    e.add_argument("--ignore-link-energy", type=_bool, metavar="BOOL")
    e.add_argument("--instances", type=int, help="green instances credited against the offset")

    x = sub.add_parser("proxy", parents=[common], help="run the caching proxy")
    x.add_argument("--duration", type=float, help="stop after this many seconds")

    r = sub.add_parser("report", parents=[common], help="summarise a proxy snapshot or simulation report")
    r.add_argument("--ledger", type=Path, help="proxy snapshot or ledger JSON")
    r.add_argument("--sim-report", type=Path, help="report_*.json written by simulate")
    r.add_argument("--ignore-link-energy", type=_bool, metavar="BOOL")
    r.add_argument("--instances", type=int)

    sub.add_parser("config-schema", parents=[common], help="print the config JSON schema")
    return p


COMMANDS = {
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "proxy": cmd_proxy,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config-schema":
        _emit(config_schema(), args.out)
        return EXIT_OK
    if getattr(args, "instances", None) is not None and args.instances < 1:
        _note("error: --instances must be at least 1")
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, _overrides(args))
        result = COMMANDS[args.command](cfg, args)
    except (ConfigError, CacheConfigError, DomainError) as exc:
        _note(f"config error: {exc}")
        return EXIT_CONFIG
    except (RuntimeFailure, FitError, ModelValidationError, RouteFileError, WorkloadError, OSError) as exc:
        _note(f"error: {exc}")
        return EXIT_RUNTIME
    if args.command == "simulate":
        _emit(result, Path(result["out"]) / "summary.json")
    elif args.command == "proxy":
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        _emit(result, args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
