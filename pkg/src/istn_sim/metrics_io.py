"""Sweep orchestration, metric aggregation, and file emission.

All emitted files are byte-stable for identical (config, seed): floats are
rendered with shortest round-trip repr and every collection is sorted
before writing.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scenario import Scenario, with_overrides

METRICS_VERSION = "istn-sim metrics v1"
METRICS_COLUMNS = ("t", "algo", "sum_rate_bps", "backhaul_capacity_bps",
                   "geo_gs_cinr_db_min", "handover_count", "dual_value",
                   "converged", "violations")
SWEEP_VERSION = "istn-sim sweep v1"
SWEEP_COLUMNS = ("variable", "value", "algo", "n_seeds", "n_failed",
                 "sum_rate_bps_mean", "sum_rate_bps_stderr",
                 "backhaul_bps_mean", "backhaul_bps_stderr",
                 "handover_total_mean", "handover_total_stderr",
                 "cinr_db_min_mean", "unserved_mean")


@dataclass(frozen=True)
class SlotMetrics:
    """Headline quantities for one simulated timeslot."""

    t: int
    algo: str
    sum_rate_bps: float
    backhaul_capacity_bps: float
    backhaul_per_tbs: tuple
    geo_gs_cinr_db: tuple
    interference_w: tuple
    handover_count: int
    unserved_gu_count: int
    dual_value: float
    converged: bool
    violations: str

    @property
    def geo_gs_cinr_db_min(self) -> float:
        return min(self.geo_gs_cinr_db)

    @classmethod
    def from_slot(cls, t: int, algo: str, slot) -> "SlotMetrics":
        report = slot.constraint_report
        return cls(
            t=t,
            algo=algo,
            sum_rate_bps=float(slot.sum_rate_bps),
            backhaul_capacity_bps=float(slot.backhaul_per_tbs.sum()),
            backhaul_per_tbs=tuple(float(v) for v in slot.backhaul_per_tbs),
            geo_gs_cinr_db=tuple(float(v) for v in slot.cinr_db),
            interference_w=tuple(float(v) for v in slot.interference_w),
            handover_count=slot.handovers.count,
            unserved_gu_count=int(slot.unserved_gus),
            dual_value=float(slot.dual.best_dual),
            converged=bool(slot.dual.converged),
            violations="" if report.ok else report.summary(),
        )

    def row(self):
        return (str(self.t), self.algo, repr(self.sum_rate_bps),
                repr(self.backhaul_capacity_bps), repr(self.geo_gs_cinr_db_min),
                str(self.handover_count), repr(self.dual_value),
                str(self.converged), self.violations)


def write_metrics_csv(metrics, path):
    """Canonical per-slot metrics file with a version-stamped header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {METRICS_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for m in metrics:
            writer.writerow(m.row())
    return path


def read_metrics_csv(path):
    """Parse a metrics file back into SlotMetrics rows (headline fields)."""
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise ValueError(f"missing version stamp in {path}")
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(SlotMetrics(
                t=int(rec["t"]), algo=rec["algo"],
                sum_rate_bps=float(rec["sum_rate_bps"]),
                backhaul_capacity_bps=float(rec["backhaul_capacity_bps"]),
                backhaul_per_tbs=(),
                geo_gs_cinr_db=(float(rec["geo_gs_cinr_db_min"]),),
                interference_w=(),
                handover_count=int(rec["handover_count"]),
                unserved_gu_count=0,
                dual_value=float(rec["dual_value"]),
                converged=rec["converged"] == "True",
                violations=rec["violations"],
            ))
    return rows


def write_handover_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t", "tbs", "from_sat", "to_sat", "utility_db"))
        for t, tbs, f, to, u in rows:
            writer.writerow((t, tbs, f, to, repr(float(u))))
    return path


def dump_channel_state(channels, out_dir):
    """Per-slot gain tensors as .npy files (byte-stable binary artifacts)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"t{channels.t:05d}"
    for name in ("h_terr", "h_sat", "h_geo_gs", "h_geo_direct"):
        np.save(out / f"{stem}_{name}.npy", getattr(channels, name))
    np.save(out / f"{stem}_visible.npy", channels.visible)
    return out


# ---------------------------------------------------------------------------
# Sweeps

SWEEP_VARIABLES = ("n_gu", "d_gu_per_km2", "handover_threshold_db",
                   "cinr_threshold_db", "n_connect", "constellation_size",
                   "u_back_bps")


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    seeds: tuple
    algos: tuple
    slots: int | None = None     # optional n_timeslots override

    def validate(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"sweep.variable must be one of {SWEEP_VARIABLES}")
        if not self.values or not self.seeds or not self.algos:
            raise ValueError("sweep values, seeds, and algos must be non-empty")


def apply_variable(scenario: Scenario, variable: str, value) -> Scenario:
    """Produce the scenario for one sweep point."""
    if variable == "n_gu":
        return with_overrides(scenario, n_gu=int(value))
    if variable == "d_gu_per_km2":
        area_km2 = (scenario.area_side_m / 1000.0) ** 2
        return with_overrides(scenario, n_gu=max(1, round(value * area_km2)))
    if variable == "handover_threshold_db":
        return with_overrides(scenario, handover_threshold_db=float(value))
    if variable == "cinr_threshold_db":
        return with_overrides(scenario, cinr_threshold_db=float(value))
    if variable == "n_connect":
        return with_overrides(scenario, n_connect=int(value))
    if variable == "constellation_size":
        const = replace(scenario.constellation, sats_per_plane=int(value))
        return with_overrides(scenario, constellation=const)
    if variable == "u_back_bps":
        caching = replace(scenario.caching, u_back_bps=float(value))
        return with_overrides(scenario, caching=caching)
    raise ValueError(f"unknown sweep variable {variable}")


@dataclass
class RunSummary:
    """Per-(value, seed, algo) cell outcome."""

    value: object
    seed: int
    algo: str
    ok: bool
    error: str = ""
    sum_rate_bps: float = float("nan")
    backhaul_bps: float = float("nan")
    handover_total: int = 0
    cinr_db_min: float = float("nan")
    unserved_mean: float = float("nan")
    any_violation: bool = False


def _run_cell(args):
    scenario_base, variable, value, seed, algo, slots = args
    from .ciim import run_simulation

    try:
        scenario = apply_variable(scenario_base, variable, value)
        scenario = with_overrides(scenario, rng_seed=int(seed))
        if slots is not None:
            scenario = with_overrides(scenario, n_timeslots=int(slots))
        metrics, _logs = run_simulation(scenario, algo)
        return RunSummary(
            value=value, seed=seed, algo=algo, ok=True,
            sum_rate_bps=float(np.mean([m.sum_rate_bps for m in metrics])),
            backhaul_bps=float(np.mean([m.backhaul_capacity_bps for m in metrics])),
            handover_total=int(sum(m.handover_count for m in metrics)),
            cinr_db_min=float(min(m.geo_gs_cinr_db_min for m in metrics)),
            unserved_mean=float(np.mean([m.unserved_gu_count for m in metrics])),
            any_violation=any(m.violations for m in metrics),
        )
    except Exception as exc:   # cell failures are data; the sweep continues
        return RunSummary(value=value, seed=seed, algo=algo, ok=False,
                          error=f"{type(exc).__name__}: {exc}")


def run_sweep(spec: SweepSpec, scenario_base: Scenario, workers: int = 1):
    """Cartesian (value x seed x algo) grid; mean and standard error per cell.

    Returns (rows, runs): aggregate rows for emission plus every per-run
    summary for fine-grained assertions. Failures are recorded per cell.
    """
    spec.validate()
    jobs = [(scenario_base, spec.variable, value, seed, algo, spec.slots)
            for value in spec.values for algo in spec.algos
            for seed in spec.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_cell, jobs))
    else:
        runs = [_run_cell(j) for j in jobs]

    rows = []
    for value in spec.values:
        for algo in spec.algos:
            cell = [r for r in runs if r.value == value and r.algo == algo]
            good = [r for r in cell if r.ok]
            n = len(good)

            def agg(attr):
                if not n:
                    return float("nan"), float("nan")
                vals = np.array([getattr(r, attr) for r in good], dtype=float)
                stderr = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
                return float(vals.mean()), stderr

            sr = agg("sum_rate_bps")
            bh = agg("backhaul_bps")
            ho = agg("handover_total")
            rows.append({
                "variable": spec.variable, "value": value, "algo": algo,
                "n_seeds": n, "n_failed": len(cell) - n,
                "sum_rate_bps_mean": sr[0], "sum_rate_bps_stderr": sr[1],
                "backhaul_bps_mean": bh[0], "backhaul_bps_stderr": bh[1],
                "handover_total_mean": ho[0], "handover_total_stderr": ho[1],
                "cinr_db_min_mean": agg("cinr_db_min")[0],
                "unserved_mean": agg("unserved_mean")[0],
            })
    return rows, runs


def emit(rows, fmt: str, out_dir) -> Path:
    """Write aggregated sweep rows as csv, json, or plotdata series."""
    if not rows:
        raise ValueError("emit called with empty results")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "sweep.csv"
        with open(path, "w", newline="") as fh:
            fh.write(f"# {SWEEP_VERSION}\n")
            writer = csv.writer(fh)
            writer.writerow(SWEEP_COLUMNS)
            for row in rows:
                writer.writerow([_render(row[c]) for c in SWEEP_COLUMNS])
        return path
    if fmt == "json":
        path = out / "sweep.json"
        nested: dict = {}
        for row in rows:
            nested.setdefault(str(row["value"]), {})[row["algo"]] = {
                k: row[k] for k in SWEEP_COLUMNS if k not in ("value", "algo")}
        with open(path, "w") as fh:
            json.dump({"version": SWEEP_VERSION,
                       "variable": rows[0]["variable"],
                       "cells": nested}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
    if fmt == "plotdata":
        path = out / "plotdata.json"
        series: dict = {}
        for metric in ("sum_rate_bps", "backhaul_bps", "handover_total"):
            per_algo: dict = {}
            for row in rows:
                s = per_algo.setdefault(row["algo"], {"x": [], "y": [], "err": []})
                s["x"].append(row["value"])
                s["y"].append(row[f"{metric}_mean"])
                s["err"].append(row[f"{metric}_stderr"])
            series[metric] = per_algo
        with open(path, "w") as fh:
            json.dump({"version": SWEEP_VERSION,
                       "variable": rows[0]["variable"], "series": series},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
    raise ValueError(f"unknown emit format: {fmt}")


def _render(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
