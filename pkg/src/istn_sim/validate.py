"""Built-in oracle and property checks on small instances, plus the toy
world builders they run on. The ``istn-sim validate`` subcommand drives
``run_all``; the test suite reuses the same machinery at larger counts.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .channel import ChannelState
from .scenario import ConstellationConfig, Scenario, with_overrides


def toy_scenario(m=2, j=4, c=2, n=3, k=2, l=1, seed=0, **overrides) -> Scenario:
    """Small validated scenario whose channel state is built by hand."""
    const = ConstellationConfig(model="synthetic_walker", n_planes=1,
                                sats_per_plane=n, altitude_m=550e3)
    base = Scenario(n_tbs=m, n_gu=j, n_sc_terrestrial=c, n_sc_leo=k,
                    n_geo_gs=l, n_timeslots=1, constellation=const,
                    rng_seed=seed)
    return with_overrides(base, **overrides) if overrides else base


def toy_channels(scenario: Scenario, rng=None, t: int = 0,
                 visible=None) -> ChannelState:
    """Random but physically scaled gains; all satellite pairs visible by
    default. Levels put terrestrial links ~40 dB and backhaul links ~30 dB
    above their noise floors at nominal powers."""
    if rng is None:
        rng = np.random.default_rng(scenario.rng_seed)
    m, j, c = scenario.n_tbs, scenario.n_gu, scenario.n_sc_terrestrial
    n, k, l = scenario.n_leo, scenario.n_sc_leo, scenario.n_geo_gs
    mean_terr = 1e-13 * rng.lognormal(0.0, 1.0, size=(m, j))
    h_terr = mean_terr[:, :, None] * rng.exponential(1.0, size=(m, j, c))
    if visible is None:
        visible = np.ones((n, m), dtype=bool)
    h_sat = 1e-13 * rng.lognormal(0.0, 0.7, size=(n, m, k))
    h_sat[~visible, :] = np.nan
    h_geo_gs = 1e-16 * rng.lognormal(0.0, 1.0, size=(n, l))
    h_geo_direct = np.full(l, 1e-14)
    ranges = 6e5 + 4e5 * rng.random(size=(n, m))
    return ChannelState(t=t, h_terr=h_terr, h_sat=h_sat, visible=visible,
                        h_geo_gs=h_geo_gs, h_geo_direct=h_geo_direct,
                        mean_terr=mean_terr, sat_ranges=ranges)


def toy_cache(scenario: Scenario, rng=None, all_local=False, all_backhaul=False):
    from .caching import CacheState, hit_matrix, place_and_request

    if all_local or all_backhaul:
        cap = scenario.caching.n_files if all_local else 0
        sc = with_overrides(scenario,
                            caching=replace(scenario.caching, cache_capacity=cap))
        placement = np.stack([np.arange(cap)] * scenario.n_tbs) if cap else \
            np.zeros((scenario.n_tbs, 0), dtype=int)
        requests = np.zeros(scenario.n_gu, dtype=int)
        return CacheState(placement=placement, requests=requests,
                          g=hit_matrix(sc, placement, requests))
    return place_and_request(scenario, rng=rng)


# ---------------------------------------------------------------------------
# Random feasible assignments and surgical single-constraint mutations

def random_feasible_assignment(scenario, channels, cache, rng):
    """Rejection-style construction of a C1-C9 feasible assignment pair.

    Returns (AssignmentX, AssignmentB, i_th_loose) where the interference
    threshold is chosen loose enough that C9 holds with margin.
    """
    from .link_budget import AssignmentB, AssignmentX, backhaul_capacity

    m_n, j_n, c_n = scenario.n_tbs, scenario.n_gu, scenario.n_sc_terrestrial
    n_n, k_n = scenario.n_leo, scenario.n_sc_leo
    a = np.zeros((m_n, j_n), dtype=bool)
    a[np.argmax(channels.mean_terr, axis=0), np.arange(j_n)] = True

    # Satellite side first: capacity determines how many backhaul GUs fit.
    b = np.zeros((n_n, m_n, k_n), dtype=bool)
    counts = np.zeros(m_n, dtype=int)
    units = [(n, k) for n in range(n_n) for k in range(k_n)]
    rng.shuffle(units)
    for n, k in units:
        targets = [m for m in range(m_n)
                   if channels.visible[n, m] and counts[m] < scenario.n_connect]
        if targets and rng.random() < 0.7:
            m = int(rng.choice(targets))
            b[n, m, k] = True
            counts[m] += 1
    p_sat = np.where(b, scenario.powers.p_leo_per_sc_w, 0.0)
    cap_m = backhaul_capacity(b, p_sat, channels.h_sat, scenario.sigma2_ka_w,
                              scenario.bands.b_ka_hz)

    x = np.zeros((m_n, j_n, c_n), dtype=bool)
    budget = np.floor(cap_m / max(scenario.caching.u_back_bps, 1.0)).astype(int)
    for m in range(m_n):
        gus = list(np.flatnonzero(a[m]))
        rng.shuffle(gus)
        free = list(rng.permutation(c_n))
        for j in gus:
            if not free:
                break
            if not cache.g[m, j]:
                if budget[m] <= 0:
                    continue
                budget[m] -= 1
            if rng.random() < 0.8:
                x[m, j, free.pop()] = True
    p0 = scenario.powers.p_tbs_total_w / c_n
    p_terr = np.where(x, p0, 0.0)

    from .link_budget import geo_gs_interference
    i_base = geo_gs_interference(b, p_sat, channels.h_geo_gs)
    i_th_loose = float(i_base.max()) * 1.5 + 1e-15
    return (AssignmentX(x=x, a=a, p_terr=p_terr),
            AssignmentB(b=b, p_sat=p_sat), i_th_loose)


def mutate_assignment(target: str, ax, ab, scenario, channels, cache, rng,
                      i_th_loose: float):
    """Inject exactly one violation of ``target``; returns (ax, ab, i_th).

    Returns None when the sampled base assignment cannot host this mutation
    (caller draws a fresh base).
    """
    from .link_budget import AssignmentB, AssignmentX, geo_gs_interference

    x = ax.x.copy()
    a = ax.a
    p_terr = ax.p_terr.copy()
    b = ab.b.copy()
    p_sat = ab.p_sat.copy()
    m_n, j_n, c_n = x.shape
    n_n, _, k_n = b.shape
    i_th = i_th_loose
    unmatched = [j for j in range(j_n) if not x[:, j, :].any()]
    p0 = scenario.powers.p_tbs_total_w / c_n

    if target == "C1":
        opts = [(m, j, c) for j in unmatched for m in range(m_n)
                if not a[m, j] and cache.g[m, j]
                for c in range(c_n) if not x[m, :, c].any()]
        if not opts:
            return None
        m, j, c = opts[int(rng.integers(len(opts)))]
        x[m, j, c] = True
        p_terr[m, j, c] = p0
    elif target == "C2":
        opts = [(m, j, c) for m in range(m_n) for j in range(j_n)
                if x[m, j, :].any() and cache.g[m, j]
                for c in range(c_n) if not x[m, :, c].any() and not x[m, j, c]]
        if not opts:
            return None
        m, j, c = opts[int(rng.integers(len(opts)))]
        x[m, j, c] = True
        p_terr[m, j, c] = p0
    elif target == "C3":
        opts = [(m, j2, c) for m in range(m_n) for c in range(c_n)
                if x[m, :, c].any()
                for j2 in unmatched if a[m, j2] and cache.g[m, j2]]
        if not opts:
            return None
        m, j2, c = opts[int(rng.integers(len(opts)))]
        x[m, j2, c] = True
        p_terr[m, j2, c] = 0.0   # keep the power budget untouched
    elif target == "C4":
        counts = b.sum(axis=(0, 2))
        opts = [(n, m, k) for n in range(n_n) for m in range(m_n)
                if not channels.visible[n, m] and counts[m] < scenario.n_connect
                for k in range(k_n) if not b[n, :, k].any()]
        if not opts:
            return None
        n, m, k = opts[int(rng.integers(len(opts)))]
        b[n, m, k] = True
        p_sat[n, m, k] = scenario.powers.p_leo_per_sc_w
    elif target == "C5":
        counts = b.sum(axis=(0, 2))
        for m in range(m_n):
            free = [(n, k) for n in range(n_n) if channels.visible[n, m]
                    for k in range(k_n) if not b[n, :, k].any()]
            need = scenario.n_connect + 1 - int(counts[m])
            if len(free) >= need:
                for n, k in free[:need]:
                    b[n, m, k] = True
                    p_sat[n, m, k] = scenario.powers.p_leo_per_sc_w
                break
        else:
            return None
    elif target == "C6":
        counts = b.sum(axis=(0, 2))
        opts = [(n, k, m2) for n in range(n_n) for k in range(k_n)
                if b[n, :, k].any()
                for m2 in range(m_n)
                if not b[n, m2, k] and channels.visible[n, m2]
                and counts[m2] < scenario.n_connect]
        if not opts:
            return None
        n, k, m2 = opts[int(rng.integers(len(opts)))]
        b[n, m2, k] = True
        p_sat[n, m2, k] = scenario.powers.p_leo_per_sc_w
    elif target == "C7":
        from .link_budget import backhaul_capacity

        cap_m = backhaul_capacity(b, p_sat, channels.h_sat,
                                  scenario.sigma2_ka_w, scenario.bands.b_ka_hz)
        u = scenario.caching.u_back_bps
        done = False
        for m in range(m_n):
            backhaul_unmatched = [j for j in unmatched
                                  if a[m, j] and not cache.g[m, j]]
            free = [c for c in range(c_n) if not x[m, :, c].any()]
            load = (x[m] & ~cache.g[m][:, None]).sum() * u
            need = int(np.floor((cap_m[m] - load) / u)) + 1 if u > 0 else 0
            if u > 0 and 0 < need <= min(len(backhaul_unmatched), len(free)):
                for j, c in zip(backhaul_unmatched[:need], free[:need]):
                    x[m, j, c] = True
                    p_terr[m, j, c] = p0
                done = True
                break
        if not done:
            return None
    elif target == "C8":
        active = np.argwhere(x)
        if not len(active):
            return None
        m, j, c = active[int(rng.integers(len(active)))]
        p_terr[m, j, c] = scenario.powers.p_tbs_total_w * 1.5
    elif target == "C9":
        i_base = geo_gs_interference(b, p_sat, channels.h_geo_gs)
        if i_base.max() <= 0:
            return None
        i_th = float(i_base.max()) * 0.5
    else:
        raise ValueError(f"unknown constraint {target}")
    if target in ("C4", "C5", "C6"):
        # Added satellite links raise GEO-GS interference and shift other
        # TBSs' capacities; keep C9 loose and re-trim the backhaul load so
        # only the injected violation remains.
        i_mut = geo_gs_interference(b, p_sat, channels.h_geo_gs)
        i_th = float(i_mut.max()) * 1.5 + 1e-15
        from .link_budget import backhaul_capacity

        cap_m = backhaul_capacity(b, p_sat, channels.h_sat,
                                  scenario.sigma2_ka_w, scenario.bands.b_ka_hz)
        u = scenario.caching.u_back_bps
        for m in range(m_n):
            links = [(j, c) for j, c in zip(*np.nonzero(x[m]))
                     if not cache.g[m, j]]
            while u > 0 and len(links) * u > cap_m[m]:
                j, c = links.pop()
                x[m, j, c] = False
                p_terr[m, j, c] = 0.0
    return (AssignmentX(x=x, a=a, p_terr=p_terr),
            AssignmentB(b=b, p_sat=p_sat), i_th)


# ---------------------------------------------------------------------------
# Check batteries

def check_waterfill(n_instances=50, seed=0, max_sc=8):
    from .uara import waterfill

    rng = np.random.default_rng(seed)
    failures = []
    for i in range(n_instances):
        n_sc = int(rng.integers(1, max_sc + 1))
        n_eff = rng.lognormal(0.0, 1.0, size=n_sc)
        total = float(rng.lognormal(0.5, 1.0))
        p = waterfill(n_eff, total)
        if abs(p.sum() - total) > 1e-9 * total:
            failures.append(f"waterfill[{i}]: power budget missed")
            continue
        active = p > 0
        levels = p[active] + n_eff[active]
        if levels.size and (levels.max() - levels.min()) > 1e-6 * levels.max():
            failures.append(f"waterfill[{i}]: water levels diverge")
        mu = levels.max() if levels.size else -np.inf
        if (n_eff[~active] < mu * (1 - 1e-6)).any():
            failures.append(f"waterfill[{i}]: inactive channel below level")
        # Random-search oracle on the simplex.
        obj = np.sum(np.log2(1.0 + p / n_eff))
        draws = rng.dirichlet(np.ones(n_sc), size=2000) * total
        best = np.max(np.sum(np.log2(1.0 + draws / n_eff), axis=1))
        if obj < best - 1e-6:
            failures.append(f"waterfill[{i}]: beaten by random search")
    return failures


def soundness_scenario(seed=0) -> Scenario:
    """Shape where every constraint mutation is constructible: backhaul
    traffic on the same scale as link capacity, a half-hit cache, and room
    on every axis."""
    sc = toy_scenario(m=2, j=10, c=4, n=4, k=2, seed=seed)
    return with_overrides(
        sc, caching=replace(sc.caching, u_back_bps=8e8, cache_capacity=25))


def run_constraint_mutations(n_rounds, seed=0, max_tries=40):
    """Yield (target, flagged) for n_rounds sweeps over C1..C9."""
    from .link_budget import check_constraints

    constraints = ["C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8", "C9"]
    rng = np.random.default_rng(seed)
    scenario = soundness_scenario(seed)
    outcomes = []
    for _ in range(n_rounds):
        for target in constraints:
            flagged = None
            for _try in range(max_tries):
                visible = rng.random((scenario.n_leo, scenario.n_tbs)) < 0.75
                visible[:, ~visible.any(axis=0)] = True   # every TBS sees someone
                channels = toy_channels(scenario, rng, visible=visible)
                cache = toy_cache(scenario, rng)
                ax, ab, i_th = random_feasible_assignment(
                    scenario, channels, cache, rng)
                base = check_constraints(ax, ab, scenario, cache, channels,
                                         i_th_w=i_th)
                if not base.ok:
                    flagged = ["BASE-INFEASIBLE"] + base.failed_constraints()
                    break
                mutated = mutate_assignment(target, ax, ab, scenario, channels,
                                            cache, rng, i_th)
                if mutated is None:
                    continue
                ax_m, ab_m, i_th_m = mutated
                rep = check_constraints(ax_m, ab_m, scenario, cache, channels,
                                        i_th_w=i_th_m)
                flagged = rep.failed_constraints()
                break
            outcomes.append((target, flagged))
    return outcomes


def check_constraint_soundness(n_rounds=10, seed=0):
    failures = []
    for target, flagged in run_constraint_mutations(n_rounds, seed):
        if flagged is None:
            failures.append(f"could not construct a {target} mutation")
        elif flagged != [target]:
            failures.append(f"mutation {target} flagged {flagged}")
    return failures


def check_weak_duality(n_scenarios=3, seed=0):
    from .ciim import ciim_slot

    failures = []
    for i in range(n_scenarios):
        scenario = toy_scenario(m=2, j=5, c=2, n=3, k=2, seed=seed + i)
        rng = np.random.default_rng([seed, i])
        channels = toy_channels(scenario, rng)
        cache = toy_cache(scenario, rng)
        result = ciim_slot(scenario, channels, cache)
        best_primal = max(h[2] for h in result.dual.history)
        for it, d_val, _primal, _theta, _slack in result.dual.history:
            if d_val < best_primal * (1 - 1e-9) - 1e-6:
                failures.append(
                    f"duality[{i}] iter {it}: dual {d_val:.6g} < primal "
                    f"{best_primal:.6g}")
    return failures


def check_zipf():
    from .caching import zipf_popularity

    failures = []
    for f, omega in ((1, 0.0), (3, 0.5), (50, 0.5), (200, 1.2)):
        q = zipf_popularity(f, omega)
        if abs(q.sum() - 1.0) > 1e-12:
            failures.append(f"zipf({f},{omega}) does not normalize")
        if (np.diff(q) > 1e-15).any():
            failures.append(f"zipf({f},{omega}) not non-increasing")
    return failures


def run_all(verbose=False):
    checks = [
        ("zipf popularity", check_zipf),
        ("water-filling KKT + oracle", check_waterfill),
        ("constraint checker soundness", check_constraint_soundness),
        ("weak duality on small slots", check_weak_duality),
    ]
    all_failures = []
    for name, fn in checks:
        failures = fn()
        if verbose:
            status = "PASS" if not failures else "FAIL"
            print(f"[{status}] {name}")
            for f in failures:
                print(f"    {f}")
        all_failures.extend(failures)
    return all_failures
