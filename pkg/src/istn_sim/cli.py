"""Command-line surface: run, sweep, validate, dump-channels."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .scenario import ConfigError, Scenario, build_scenario, with_overrides

C9_ENFORCING = {"ciim", "mdh", "rraihm", "uaaa", "es"}


def _load_scenario(args) -> Scenario:
    scenario = build_scenario(args.scenario) if args.scenario else Scenario()
    if args.seed is not None:
        scenario = with_overrides(scenario, rng_seed=args.seed)
    if getattr(args, "slots", None) is not None:
        scenario = with_overrides(scenario, n_timeslots=args.slots)
    return scenario


def cmd_run(args) -> int:
    from .ciim import run_simulation
    from .metrics_io import write_handover_csv, write_metrics_csv

    scenario = _load_scenario(args)
    metrics, logs = run_simulation(scenario, args.algo,
                                   dump_dir=args.dump_channels)
    out = Path(args.out)
    write_metrics_csv(metrics, out / "metrics.csv")
    write_handover_csv(logs["handovers"], out / "handovers.csv")
    info = {"algo": args.algo, "scenario": asdict(scenario),
            "n_slots": len(metrics)}
    with open(out / "run_info.json", "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(metrics)} slots to {out}")
    if args.algo in C9_ENFORCING and any(m.violations for m in metrics):
        print("constraint violations detected", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    from .metrics_io import SweepSpec, emit, run_sweep

    if sys.version_info >= (3, 11):
        import tomllib as toml
    else:
        import tomli as toml
    try:
        with open(args.spec, "rb") as fh:
            raw = toml.load(fh)
    except FileNotFoundError:
        print(f"sweep spec not found: {args.spec}", file=sys.stderr)
        return 1
    sweep_raw = raw.pop("sweep", None)
    if sweep_raw is None:
        print("sweep spec missing [sweep] section", file=sys.stderr)
        return 1
    spec = SweepSpec(
        variable=sweep_raw["variable"],
        values=tuple(sweep_raw["values"]),
        seeds=tuple(sweep_raw.get("seeds", [0])),
        algos=tuple(sweep_raw.get("algos", ["ciim"])),
        slots=sweep_raw.get("slots"),
    )
    scenario = build_scenario(raw)
    rows, runs = run_sweep(spec, scenario, workers=args.workers)
    for fmt in args.formats.split(","):
        path = emit(rows, fmt.strip(), args.out)
        print(f"wrote {path}")
    n_failed = sum(1 for r in runs if not r.ok)
    if n_failed:
        print(f"{n_failed} cell runs failed", file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    """Small built-in oracle suite; exercises the verification surfaces."""
    from . import validate

    failures = validate.run_all(verbose=True)
    return 1 if failures else 0


def cmd_dump_channels(args) -> int:
    from .channel import build_channel_state
    from .metrics_io import dump_channel_state
    from .scenario import generate_constellation, place_nodes

    scenario = _load_scenario(args)
    nodes = place_nodes(scenario)
    constellation = generate_constellation(scenario)
    n = args.slots if args.slots is not None else scenario.n_timeslots
    for t in range(min(n, scenario.n_timeslots)):
        channels = build_channel_state(scenario, nodes, constellation, t)
        dump_channel_state(channels, args.out)
    print(f"dumped {min(n, scenario.n_timeslots)} slots to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="istn-sim",
        description="Downlink simulator for integrated satellite-terrestrial "
                    "networks with coordinated interference management.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one algorithm over T slots")
    p_run.add_argument("--scenario", help="TOML scenario file")
    p_run.add_argument("--algo", default="ciim")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--slots", type=int, default=None,
                       help="override n_timeslots")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--dump-channels", default=None, metavar="DIR")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run an experiment grid")
    p_sweep.add_argument("--spec", required=True, help="TOML sweep spec")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument("--formats", default="csv,json,plotdata")
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate",
                           help="run the built-in oracle/property checks")
    p_val.set_defaults(func=cmd_validate)

    p_dump = sub.add_parser("dump-channels", help="write per-slot gain tensors")
    p_dump.add_argument("--scenario", help="TOML scenario file")
    p_dump.add_argument("--seed", type=int, default=None)
    p_dump.add_argument("--slots", type=int, default=None)
    p_dump.add_argument("--out", required=True)
    p_dump.set_defaults(func=cmd_dump_channels)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
