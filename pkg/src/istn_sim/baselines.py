"""Comparison algorithms: handover/allocation baselines for the satellite
side, equal-power and exhaustive-search references for the terrestrial side.

Every baseline returns the same structures as the primary algorithms so the
driver, metrics, and constraint checker treat them uniformly.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from .imish import HandoverLog, SatContext, SatMatching, run_sat_matching
from .link_budget import gu_sinr_all
from .uara import TerrMatching, associate_gus, powers_for_pairs, uara_round

ES_STATE_BUDGET = 10_000_000

ALGORITHM_IDS = ("ciim", "jimua", "mdh", "rraihm", "greedy_sat", "random_sat",
                 "uaaa", "es")


class BudgetExceededError(RuntimeError):
    """Raised when an exhaustive search would enumerate too many states."""


# ---------------------------------------------------------------------------
# Satellite-side baselines (same interface as the default IMISH step)

def _feasible_units(ctx: SatContext):
    n_sats, n_tbs, n_sc = ctx.shape
    return [(n, k) for n in range(n_sats) if ctx.visible[n].any()
            for k in range(n_sc)]


def greedy_sat_step(ctx: SatContext, rng, handover_enabled):
    """Pure rate-greedy: strongest links first, interference ignored.

    Runs no handover machinery regardless of the flag.
    """
    n_sats, n_tbs, n_sc = ctx.shape
    entries = []
    h = ctx.h_sat
    for n in range(n_sats):
        for m in range(n_tbs):
            if not ctx.visible[n, m]:
                continue
            for k in range(n_sc):
                if not np.isnan(h[n, m, k]):
                    entries.append((-h[n, m, k], n, m, k))
    entries.sort()
    pairs = set()
    taken = set()
    counts = np.zeros(n_tbs, dtype=int)
    for _, n, m, k in entries:
        if counts[m] < ctx.n_connect and (n, k) not in taken:
            pairs.add((m, n, k))
            taken.add((n, k))
            counts[m] += 1
    matching = SatMatching(pairs=tuple(sorted(pairs)), n_sats=n_sats,
                           n_tbs=n_tbs, n_sc=n_sc)
    return matching, HandoverLog()


def _random_assignment(ctx: SatContext, rng):
    """Uniform random feasible fill; shared by random_sat and rraihm init."""
    n_sats, n_tbs, n_sc = ctx.shape
    units = _feasible_units(ctx)
    order = rng.permutation(len(units))
    pairs = set()
    counts = np.zeros(n_tbs, dtype=int)
    for idx in order:
        n, k = units[idx]
        targets = [m for m in range(n_tbs)
                   if ctx.visible[n, m] and counts[m] < ctx.n_connect]
        if not targets:
            continue
        m = targets[int(rng.integers(len(targets)))]
        pairs.add((m, n, k))
        counts[m] += 1
    return pairs


def random_sat_step(ctx: SatContext, rng, handover_enabled):
    """Uniform random allocation; no utility logic, no handover machinery."""
    pairs = _random_assignment(ctx, rng)
    matching = SatMatching(pairs=tuple(sorted(pairs)), n_sats=ctx.shape[0],
                           n_tbs=ctx.shape[1], n_sc=ctx.shape[2])
    return matching, HandoverLog()


def rraihm_step(ctx: SatContext, rng, handover_enabled):
    """Random allocation refined by utility-filtered random proposals, then
    the same protection machinery as the primary matcher.

    Starts from the identical random fill as the plain random baseline (same
    stream), so its objective can only improve on it.
    """
    from .imish import _moves_for_unit, weighted_backhaul_value

    pairs = _random_assignment(ctx, rng)
    units = _feasible_units(ctx)
    value = weighted_backhaul_value(tuple(sorted(pairs)), ctx)
    n_proposals = 3 * ctx.shape[1] * ctx.n_connect
    for _ in range(n_proposals):
        n, k = units[int(rng.integers(len(units)))]
        best_val, best_pairs = value, None
        for trial, _tag in _moves_for_unit(n, k, tuple(sorted(pairs)), ctx):
            v = weighted_backhaul_value(trial, ctx)
            if v > best_val + 1e-12:
                best_val, best_pairs = v, trial
        if best_pairs is not None:
            pairs, value = set(best_pairs), best_val
    return run_sat_matching(ctx, handover_enabled=handover_enabled,
                            init_pairs=pairs, improve=False)


def mdh_step(ctx: SatContext, rng, handover_enabled):
    """Minimum-distance policy: each TBS takes its nearest visible
    satellites; the protection loop replaces removed satellites by the
    nearest candidate (the handover threshold plays no role).
    """
    n_sats, n_tbs, n_sc = ctx.shape
    if ctx.ranges is None:
        raise ValueError("mdh requires slant ranges in the context")
    pairs = set()
    taken = set()
    for m in range(n_tbs):
        order = sorted((ctx.ranges[n, m], n) for n in range(n_sats)
                       if ctx.visible[n, m])
        links = 0
        for _, n in order:
            if links >= ctx.n_connect:
                break
            ks = [(ctx.h_sat[n, m, k], k) for k in range(n_sc)
                  if (n, k) not in taken and not np.isnan(ctx.h_sat[n, m, k])]
            if not ks:
                continue
            _, k = max(ks)
            pairs.add((m, n, k))
            taken.add((n, k))
            links += 1
    return run_sat_matching(ctx, handover_enabled=handover_enabled,
                            init_pairs=pairs, improve=False,
                            protection_policy="nearest")


# ---------------------------------------------------------------------------
# Terrestrial-side baselines

def uaaa_round(channels, scenario, lam, cache_state):
    """Same matching path as the primary allocator, equal power per SC."""
    return uara_round(channels, scenario, lam, cache_state, power_mode="equal")


def es_budget(n_gu: int, n_tbs: int, n_sc: int) -> float:
    """The enumeration bound N_J^(N_M * N_C) used to gate the search."""
    return n_gu ** (n_tbs * n_sc) if n_gu > 1 else 1.0


def es_search(channels, scenario, cache, lam=None, *,
              waterfill_refine: bool = True):
    """Exhaustive search over the raw per-unit choice space (each of the
    M*C subchannel units picks one GU or none); infeasible combinations are
    rejected in the loop. The optimality oracle for small instances.

    Every feasible candidate is scored exactly like the matcher's final
    output (capped achieved rates at the configured power rule, minus the
    lambda-weighted backhaul charge). Returns (pairs, value, n_evaluated).
    """
    m_n, j_n, c_n = scenario.n_tbs, scenario.n_gu, scenario.n_sc_terrestrial
    if math.log(max(j_n, 2)) * m_n * c_n > math.log(ES_STATE_BUDGET):
        raise BudgetExceededError(
            f"es_search budget exceeded: {j_n}^({m_n}*{c_n}) > {ES_STATE_BUDGET:g}")
    lam = np.zeros(m_n) if lam is None else np.asarray(lam, dtype=float)
    association = associate_gus(channels, scenario)
    tbs_of = np.argmax(association, axis=0)

    u_back = scenario.caching.u_back_bps
    local = cache.g[tbs_of, np.arange(j_n)]
    cap = np.where(local, np.inf, u_back)
    pen = np.where(local, 0.0, lam[tbs_of] * u_back)
    mode = "waterfill" if waterfill_refine else "equal"

    units = [(m, c) for m in range(m_n) for c in range(c_n)]
    # per-unit choices: -1 (idle) or any GU; C1 and C2 filter in the loop
    choices = [[-1] + list(range(j_n))] * len(units)
    unit_tbs = [m for m, _c in units]

    best_value, best_pairs = -np.inf, ()
    n_eval = 0
    for combo in product(*choices):
        served = [j for j in combo if j >= 0]
        if len(set(served)) != len(served):    # C2: one subchannel per GU
            continue
        if any(j >= 0 and tbs_of[j] != m for j, m in zip(combo, unit_tbs)):
            continue                           # C1: association respected
        pairs = tuple(sorted((j, m, c) for (m, c), j in zip(units, combo)
                             if j >= 0))
        n_eval += 1
        x = np.zeros((m_n, j_n, c_n), dtype=bool)
        for j, m, c in pairs:
            x[m, j, c] = True
        p = powers_for_pairs(channels, scenario, lam, cache, association,
                             pairs, mode)
        sinr = gu_sinr_all(x, p, channels.h_terr, scenario.sigma2_c_w)
        rates = scenario.bands.b_c_hz * np.log2(1.0 + sinr)
        value = 0.0
        for j, m, c in pairs:
            value += min(rates[m, j, c], cap[j]) - pen[j]
        if value > best_value + 1e-12:
            best_value, best_pairs = value, pairs
    return best_pairs, float(best_value), n_eval


def es_terr_step(channels, scenario, lam, cache_state):
    """Slot-level terrestrial step backed by the exhaustive search."""
    pairs, _value, _n = es_search(channels, scenario, cache_state, lam)
    association = associate_gus(channels, scenario)
    tbs_of = np.argmax(association, axis=0)
    p = powers_for_pairs(channels, scenario, np.asarray(lam, dtype=float),
                         cache_state, association, pairs, "waterfill")
    matched = {j for j, _, _ in pairs}
    matching = TerrMatching(
        pairs=pairs, association=association,
        backhaul_gus=tuple(int(j) for j in range(scenario.n_gu)
                           if not cache_state.g[tbs_of[j], j]),
        unmatched=tuple(sorted(set(range(scenario.n_gu)) - matched)),
    )
    return matching, p


# ---------------------------------------------------------------------------
# Tiny-instance satellite matching enumerator (oracle for acceptance tests)

def enumerate_sat_matchings(ctx: SatContext, state_budget: int = 200_000):
    """Yield every C4/C5/C6-feasible satellite matching (tiny instances)."""
    units = _feasible_units(ctx)
    n_tbs = ctx.shape[1]
    results = []

    def rec(idx, pairs, counts):
        if len(results) > state_budget:
            raise BudgetExceededError("satellite matching enumeration too large")
        if idx == len(units):
            results.append(tuple(sorted(pairs)))
            return
        n, k = units[idx]
        rec(idx + 1, pairs, counts)                 # unit left unmatched
        for m in range(n_tbs):
            if ctx.visible[n, m] and counts[m] < ctx.n_connect:
                pairs.append((m, n, k))
                counts[m] += 1
                rec(idx + 1, pairs, counts)
                counts[m] -= 1
                pairs.pop()

    rec(0, [], np.zeros(n_tbs, dtype=int))
    return results


# ---------------------------------------------------------------------------
# Driver wiring

def slot_config_for(algo: str) -> dict:
    """Driver wiring (matcher steps, power rule, handover flag) per id."""
    table = {
        "ciim": (None, None, "waterfill", True),
        "jimua": (None, None, "waterfill", False),
        "mdh": (mdh_step, None, "waterfill", True),
        "rraihm": (rraihm_step, None, "waterfill", True),
        "greedy_sat": (greedy_sat_step, None, "waterfill", False),
        "random_sat": (random_sat_step, None, "waterfill", False),
        "uaaa": (None, None, "equal", True),
        "es": (None, es_terr_step, "waterfill", True),
    }
    if algo not in table:
        raise ValueError(f"unknown algorithm id: {algo} (one of {ALGORITHM_IDS})")
    sat_step, terr_step, power_mode, handover = table[algo]
    return {"sat_step": sat_step, "terr_step": terr_step,
            "power_mode": power_mode, "handover_enabled": handover}


def jimua_round(scenario, channels, cache, prev_lam=None, rng=None):
    """Full slot pipeline with the handover process disabled."""
    from .ciim import ciim_slot

    return ciim_slot(scenario, channels, cache, prev_lam,
                     handover_enabled=False, rng=rng)
