"""Lagrangian dual outer loop coordinating the satellite and terrestrial
matchers, with backhaul-constraint repair and a projected subgradient
multiplier update.

Each iteration solves both subproblems at the current multipliers, records
the Lagrangian value (a dual certificate), repairs any backhaul-capacity
overload by evicting the lowest-rate backhaul users, and updates the
multipliers from the pre-repair slack. The best feasible assignment seen
across iterations is returned together with the dual history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .caching import place_and_request
from .channel import build_channel_state, resolve_interference_threshold
from .imish import HandoverLog, SatMatching, make_sat_context, run_sat_matching
from .link_budget import (
    AssignmentB,
    AssignmentX,
    backhaul_capacity,
    check_constraints,
    geo_gs_interference,
    gu_sinr_all,
)
from .scenario import generate_constellation, place_nodes
from .uara import TerrMatching, associate_gus, powers_for_pairs, uara_round
from .units import linear_to_db


@dataclass
class DualState:
    """Multiplier trajectory and per-iteration certificates for one slot."""

    lam: np.ndarray                      # final multipliers [M]
    theta: float                         # final step size
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    # history rows: (iteration, dual_value, primal_value, theta, slack[M])

    @property
    def best_dual(self) -> float:
        return min(h[1] for h in self.history) if self.history else float("nan")


@dataclass
class SlotResult:
    """Everything ciim_slot produces for one timeslot."""

    ax: AssignmentX
    ab: AssignmentB
    dual: DualState
    sat_matching: SatMatching
    terr_matching: TerrMatching
    handovers: HandoverLog
    sum_rate_bps: float
    backhaul_per_tbs: np.ndarray
    interference_w: np.ndarray
    cinr_db: np.ndarray
    unserved_gus: int
    constraint_report: object
    i_th_w: float


def capped_link_rates(x, p_terr, channels, scenario, cache, association):
    """Achieved per-link rates [M, J, C]: Shannon rate, backhaul GUs capped."""
    sinr = gu_sinr_all(x, p_terr, channels.h_terr, scenario.sigma2_c_w)
    rates = scenario.bands.b_c_hz * np.log2(1.0 + sinr)
    tbs_of = np.argmax(association, axis=0)
    local = cache.g[tbs_of, np.arange(scenario.n_gu)]
    cap = np.where(local, np.inf, scenario.caching.u_back_bps)
    return np.minimum(rates, cap[None, :, None]) * (np.asarray(x) > 0)


def backhaul_load(x, cache, u_back_bps: float) -> np.ndarray:
    """Per-TBS admitted backhaul traffic sum_j,c x (1 - g) U_back."""
    served_backhaul = (np.asarray(x, dtype=bool) & ~cache.g[:, :, None])
    return served_backhaul.sum(axis=(1, 2)) * u_back_bps


def dual_value(x, b, p_terr, p_sat, lam, scenario, cache, channels,
               association) -> float:
    """Lagrangian: achieved sum rate plus lambda-weighted backhaul slack."""
    lam = np.asarray(lam, dtype=float)
    rates = capped_link_rates(x, p_terr, channels, scenario, cache, association)
    cap_m = backhaul_capacity(b, p_sat, channels.h_sat, scenario.sigma2_ka_w,
                              scenario.bands.b_ka_hz)
    load = backhaul_load(x, cache, scenario.caching.u_back_bps)
    return float(rates.sum() + lam @ (cap_m - load))


def repair_backhaul(pairs, rates_by_link, cache, cap_m, u_back_bps: float):
    """Evict admitted backhaul GUs, lowest achieved rate first, until every
    TBS's backhaul load fits its capacity. Returns the surviving pairs."""
    pairs = list(pairs)
    if u_back_bps <= 0:
        return tuple(pairs)
    survivors = []
    by_tbs: dict = {}
    for j, m, c in pairs:
        by_tbs.setdefault(m, []).append((j, m, c))
    for m, links in sorted(by_tbs.items()):
        backhaul_links = [(rates_by_link[m, j, c], j, c) for j, _, c in links
                          if not cache.g[m, j]]
        load = len(backhaul_links) * u_back_bps
        backhaul_links.sort()
        evicted = set()
        while load > cap_m[m] * (1 + 1e-9) and backhaul_links:
            _, j, c = backhaul_links.pop(0)
            evicted.add((j, m, c))
            load -= u_back_bps
        survivors.extend(p for p in links if p not in evicted)
    return tuple(sorted(survivors))


def _default_sat_step(ctx, rng, handover_enabled):
    return run_sat_matching(ctx, handover_enabled=handover_enabled)


def ciim_slot(scenario, channels, cache, prev_lam=None, *,
              sat_step=None, terr_step=None, power_mode: str = "waterfill",
              handover_enabled: bool = True, rng=None,
              i_th_w: float | None = None) -> SlotResult:
    """Run the dual loop for one timeslot and return the best feasible slot
    solution plus the dual certificate history.

    ``sat_step`` and ``terr_step`` replace the default matchers (baselines
    plug in here); ``power_mode`` selects water-filling or equal power on
    the terrestrial side. The loop stops at the step-size convergence
    criterion (|theta_{t+1} - theta_t| <= eps), at the iteration cap, or
    early once multipliers and both matchings reach a fixpoint.
    """
    algo = scenario.algo
    m_n = scenario.n_tbs
    if i_th_w is None:
        i_th_w = resolve_interference_threshold(scenario, channels.h_geo_direct)
    lam = np.zeros(m_n) if prev_lam is None else np.asarray(prev_lam, float).copy()
    theta = algo.theta0
    u_back = scenario.caching.u_back_bps
    denom = max(u_back, 1.0)
    association = associate_gus(channels, scenario)
    sat_step = sat_step or _default_sat_step

    best = None
    best_primal = -np.inf
    history = []
    prev_sig = None
    converged = False
    iterations = 0

    for it in range(algo.dual_iteration_cap):
        iterations = it + 1
        ctx = make_sat_context(channels, scenario, lam, i_th_w,
                               ranges=channels.sat_ranges)
        sat_matching, ho_log = sat_step(ctx, rng, handover_enabled)
        b, p_sat = sat_matching.b_tensor(scenario.powers.p_leo_per_sc_w)
        cap_m = backhaul_capacity(b, p_sat, channels.h_sat,
                                  scenario.sigma2_ka_w, scenario.bands.b_ka_hz)

        if terr_step is None:
            terr_matching, p_terr = uara_round(channels, scenario, lam, cache,
                                               power_mode=power_mode)
        else:
            terr_matching, p_terr = terr_step(channels, scenario, lam, cache)
        x = terr_matching.x_tensor(m_n, scenario.n_gu, scenario.n_sc_terrestrial)

        d_val = dual_value(x, b, p_terr, p_sat, lam, scenario, cache, channels,
                           association)
        load = backhaul_load(x, cache, u_back)
        slack = cap_m - load

        # Repair to a feasible primal, then re-run the power rule on the
        # surviving links.
        rates_pre = capped_link_rates(x, p_terr, channels, scenario, cache,
                                      association)
        kept = repair_backhaul(terr_matching.pairs, rates_pre, cache, cap_m,
                               u_back)
        if kept != terr_matching.pairs:
            p_post = powers_for_pairs(channels, scenario, lam, cache,
                                      association, kept, power_mode)
        else:
            p_post = p_terr
        x_post = np.zeros_like(x)
        for j, mm, c in kept:
            x_post[mm, j, c] = True
        primal = float(capped_link_rates(x_post, p_post, channels, scenario,
                                         cache, association).sum())
        history.append((it, d_val, primal, theta, slack.copy()))
        if primal > best_primal:
            best_primal = primal
            best = (x_post, p_post, kept, sat_matching, ho_log, b, p_sat)

        new_lam = np.maximum(0.0, lam - theta * slack / denom)
        theta_next = algo.theta0 * algo.beta ** (it + 1)
        if abs(theta_next - theta) <= algo.dual_convergence_eps:
            lam = new_lam
            converged = True
            break
        sig = (sat_matching.pairs, terr_matching.pairs, tuple(new_lam))
        if algo.early_exit_on_fixpoint and sig == prev_sig:
            lam = new_lam
            converged = True
            break
        prev_sig = sig
        lam = new_lam
        theta = theta_next

    x_post, p_post, kept, sat_matching, ho_log, b, p_sat = best
    dual = DualState(lam=lam, theta=theta, iterations=iterations,
                     converged=converged, history=history)
    ax = AssignmentX(x=x_post, a=association, p_terr=p_post)
    ab = AssignmentB(b=b, p_sat=p_sat)
    i_l, cinr = geo_gs_interference(
        b, p_sat, channels.h_geo_gs, p_geo_w=scenario.powers.p_geo_w,
        h_geo_direct=channels.h_geo_direct, sigma2=scenario.sigma2_ka_w)
    report = check_constraints(ax, ab, scenario, cache, channels,
                               i_th_w=i_th_w if handover_enabled else None)
    served = {j for j, _, _ in kept}
    final_terr = TerrMatching(
        pairs=kept, association=association,
        backhaul_gus=tuple(int(j) for j in range(scenario.n_gu)
                           if not cache.g[np.argmax(association[:, j]), j]),
        unmatched=tuple(sorted(set(range(scenario.n_gu)) - served)),
        proposal_iterations=0, improve_passes=0)
    return SlotResult(
        ax=ax, ab=ab, dual=dual, sat_matching=sat_matching,
        terr_matching=final_terr, handovers=ho_log,
        sum_rate_bps=best_primal,
        backhaul_per_tbs=backhaul_capacity(b, p_sat, channels.h_sat,
                                           scenario.sigma2_ka_w,
                                           scenario.bands.b_ka_hz),
        interference_w=i_l,
        cinr_db=np.asarray(linear_to_db(
            scenario.powers.p_geo_w * channels.h_geo_direct
            / (i_l + scenario.sigma2_ka_w))),
        unserved_gus=scenario.n_gu - len(served),
        constraint_report=report,
        i_th_w=i_th_w,
    )


def run_simulation(scenario, algo: str = "ciim", *, dump_dir=None):
    """Drive T timeslots end to end for one algorithm.

    Returns (list[SlotMetrics], dict of logs). Deterministic per
    (config, seed): byte-identical metrics on replay.
    """
    from .baselines import slot_config_for
    from .metrics_io import SlotMetrics, dump_channel_state

    nodes = place_nodes(scenario)
    constellation = generate_constellation(scenario)
    cfg = slot_config_for(algo)
    metrics = []
    handover_rows = []
    lam_prev = None
    for t in range(scenario.n_timeslots):
        channels = build_channel_state(scenario, nodes, constellation, t)
        if dump_dir is not None:
            dump_channel_state(channels, dump_dir)
        cache = place_and_request(scenario, t=t)
        rng = np.random.default_rng([scenario.rng_seed, 6, t])
        result = ciim_slot(
            scenario, channels, cache,
            prev_lam=lam_prev if scenario.algo.warm_start_lambda else None,
            sat_step=cfg["sat_step"], terr_step=cfg["terr_step"],
            power_mode=cfg["power_mode"],
            handover_enabled=cfg["handover_enabled"], rng=rng)
        lam_prev = result.dual.lam
        metrics.append(SlotMetrics.from_slot(t, algo, result))
        handover_rows.extend(result.handovers.rows())
    return metrics, {"handovers": handover_rows}
