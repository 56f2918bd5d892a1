"""Command-line interface.

Exit codes: 0 success, 1 validation / usage error, 2 runtime error. Errors
are printed to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from .control import POLICIES, normalize_policy
from .io import (emit_plot_data, load_config, out_dir, read_config, write_audit, write_json,
                 write_metrics_csv, write_sweep_csv)
from .network import ConfigError, build_network
from .scenarios import IncidentSpec, SweepSpec, capacity_sweep, run_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage problems are validation errors
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pwbp", description="Network signal-control simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")

    s = sub.add_parser("simulate", help="run one policy and write metrics")
    s.add_argument("config")
    s.add_argument("--policy", default=None, help="ft | bp | cabp | pwbp")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.add_argument("--dt", type=float, default=None, help="override sim.dt (checked against CFL)")
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--audit", action="store_true", help="also write the decision log")

    w = sub.add_parser("sweep", help="capacity-frontier bisection")
    w.add_argument("config")
    w.add_argument("--spec", default=None, help="JSON sweep spec (default: config 'sweep' section)")
    w.add_argument("--out", default=None)
    w.add_argument("--threads", type=int, default=None)

    c = sub.add_parser("compare", help="run several policies on the same seed")
    c.add_argument("config")
    c.add_argument("--policies", default=",".join(POLICIES))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None)
    c.add_argument("--horizon", type=float, default=None)
    return p


def _incidents(g) -> list[IncidentSpec]:
    spec = g.extra.get("incident") or g.extra.get("incidents") or []
    if isinstance(spec, dict):
        spec = [spec]
    return [IncidentSpec.from_mapping(s) for s in spec]


def _simulate(args) -> dict:
    g = load_config(args.config, dt=args.dt)
    policy = normalize_policy(args.policy or g.controller.get("policy", "pwbp"))
    series, report = run_scenario(g, policy, horizon=args.horizon, seed=args.seed,
                                  incidents=_incidents(g), audit=args.audit,
                                  run_id=f"{policy}-seed{args.seed}")
    d = out_dir(args.out)
    write_metrics_csv(series, d / "metrics.csv")
    write_json(json.loads(report.to_json()), d / "report.json")
    emit_plot_data(series, d / "plot_data.csv")
    if args.audit:
        write_audit(series.decisions, d / "audit.csv")
    return {"out": str(d), "verdict": report.verdict, "steps": len(series)}


def _sweep(args) -> dict:
    g = load_config(args.config)
    spec = read_config(args.spec) if args.spec else g.extra.get("sweep")
    if not spec:
        raise ConfigError("no sweep spec: pass --spec or add a 'sweep' section")
    try:
        sweep = SweepSpec.from_mapping(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sweep spec: {exc}") from exc
    result = capacity_sweep(g, sweep, workers=args.threads)
    d = out_dir(args.out)
    write_sweep_csv(result, d / "sweep.csv")
    write_json(result.to_dict(), d / "sweep.json")
    emit_plot_data(result, d / "frontier.csv", kind="frontier")
    return {"out": str(d), "frontier": result.frontier}


def _compare(args) -> dict:
    g = load_config(args.config)
    policies = [normalize_policy(p) for p in args.policies.split(",") if p.strip()]
    d = out_dir(args.out)
    runs, summary = [], {}
    for p in policies:
        series, report = run_scenario(g, p, horizon=args.horizon, seed=args.seed,
                                      incidents=_incidents(g), run_id=p)
        write_metrics_csv(series, d / f"metrics_{p}.csv")
        runs.append(series)
        summary[p] = {"verdict": report.verdict, "slope": report.slope,
                      "avg_delay_per_vehicle": series.avg_delay_per_vehicle,
                      "vehicles_served": series.vehicles_served,
                      "time_avg_source_queue": report.time_avg_source_queue}
    emit_plot_data(runs, d / "plot_data.csv")
    write_json({"seed": args.seed, "policies": summary}, d / "compare.json")
    return {"out": str(d), "policies": policies}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(list(sys.argv[1:] if argv is None else argv))
        if args.command == "validate":
            build_network(read_config(args.config))
            result = {"valid": True}
        elif args.command == "simulate":
            if args.policy is not None:
                normalize_policy(args.policy)
            result = _simulate(args)
        elif args.command == "sweep":
            result = _sweep(args)
        else:
            result = _compare(args)
    except (UsageError, ConfigError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "arc", None):
            err["arc"] = exc.arc
        print(json.dumps(err), file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:  # e.g. unknown policy name
        print(json.dumps({"error": "ValueError", "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result))
    return EXIT_OK


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
