"""Many-to-one matching of LEO satellite subchannel units to TBSs, with a
GEO-ground-station protection loop driven by inter-satellite handover.

A matching is a set of (tbs, sat, sc) triples. Candidate deviations are
scored by the weighted backhaul objective sum_m lambda_m * C_m; a matching
is stable when no single-unit deviation (attach, relocate, evict-swap, or
drop) strictly improves it. The protection loop removes satellites in
descending interference order whenever a ground station's CINR falls below
the working threshold, then admits replacement links only when their
handover utility clears the configured threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .link_budget import backhaul_capacity
from .units import linear_to_db

IMPROVE_TOL = 1e-12
MAX_IMPROVE_PASSES = 200


@dataclass(frozen=True)
class SatMatching:
    """Stable satellite-side matching for one slot."""

    pairs: tuple                 # sorted ((m, n, k), ...)
    n_sats: int
    n_tbs: int
    n_sc: int
    proposal_iterations: int = 0
    improve_passes: int = 0
    removed_sats: tuple = ()     # satellites dropped by the protection loop

    def b_tensor(self, p_leo_w: float | None = None):
        b = np.zeros((self.n_sats, self.n_tbs, self.n_sc), dtype=bool)
        for m, n, k in self.pairs:
            b[n, m, k] = True
        if p_leo_w is None:
            return b
        return b, np.where(b, p_leo_w, 0.0)

    def links_per_tbs(self):
        counts = np.zeros(self.n_tbs, dtype=int)
        for m, _, _ in self.pairs:
            counts[m] += 1
        return counts


@dataclass(frozen=True)
class HandoverEvent:
    t: int
    tbs: int
    from_sat: int
    to_sat: int
    utility_db: float


@dataclass
class HandoverLog:
    events: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.events)

    def rows(self):
        return [(e.t, e.tbs, e.from_sat, e.to_sat, e.utility_db)
                for e in self.events]


@dataclass
class SatContext:
    """Everything a satellite-side matcher needs for one slot."""

    h_sat: np.ndarray        # [N, M, K], NaN for invisible pairs
    visible: np.ndarray      # [N, M]
    h_geo_gs: np.ndarray     # [N, L]
    h_geo_direct: np.ndarray  # [L]
    lam: np.ndarray          # [M]
    p_leo_w: float
    p_geo_w: float
    sigma2_w: float
    bandwidth_hz: float
    n_connect: int
    i_th_w: float
    handover_threshold_db: float
    cinr_threshold_db: float
    handover_mode: str = "db"      # "db" or "linear"
    ranges: np.ndarray | None = None   # [N, M] slant ranges, for MDH
    t: int = 0

    @property
    def shape(self):
        return self.h_sat.shape


def sic_preference(h_cur: float, h_cand: float, h_cross: float,
                   symmetric: bool = False) -> float:
    """Successive-interference-cancellation preference of a candidate pair.

    ``h_cur`` is the proposing pair's own power gain, ``h_cand`` the
    candidate pair's, and ``h_cross`` the gain from the proposing satellite
    to the candidate TBS. The piecewise rule returns the candidate/current
    gain ratio when the candidate link dominates that cross link, and the
    raw candidate gain otherwise. ``symmetric=True`` switches the branch
    condition to compare the candidate against the current pair's own gain.
    """
    threshold = h_cur if symmetric else h_cross
    if h_cand > threshold:
        return h_cand / h_cur
    return h_cand


def weighted_backhaul_value(pairs, ctx: SatContext) -> float:
    """Objective sum_m lambda_m C_m for an explicit pair set."""
    if not pairs:
        return 0.0
    arr = np.asarray(sorted(pairs), dtype=int)
    m_arr, n_arr, k_arr = arr[:, 0], arr[:, 1], arr[:, 2]
    h = np.nan_to_num(ctx.h_sat, nan=0.0)
    own = h[n_arr, m_arr, k_arr] * ctx.p_leo_w
    # cross[i, j] = power arriving at link j's TBS from link i's satellite.
    cross = ctx.p_leo_w * h[n_arr[:, None], m_arr[None, :], k_arr[None, :]]
    same_k = k_arr[:, None] == k_arr[None, :]
    np.fill_diagonal(same_k, False)
    interference = (cross * same_k).sum(axis=0)
    rates = ctx.bandwidth_hz * np.log2(1.0 + own / (interference + ctx.sigma2_w))
    value = 0.0
    for m, r in zip(m_arr, rates):
        value += ctx.lam[m] * r
    return float(value)


def capacity_per_tbs(pairs, ctx: SatContext) -> np.ndarray:
    b = np.zeros(ctx.shape, dtype=bool)
    for m, n, k in pairs:
        b[n, m, k] = True
    p = np.where(b, ctx.p_leo_w, 0.0)
    return backhaul_capacity(b, p, ctx.h_sat, ctx.sigma2_w, ctx.bandwidth_hz)


def gs_interference(pairs, ctx: SatContext) -> np.ndarray:
    i_l = np.zeros(ctx.h_geo_gs.shape[1])
    for _, n, _ in pairs:
        i_l += ctx.p_leo_w * ctx.h_geo_gs[n]
    return i_l


def gs_cinr_db(pairs, ctx: SatContext) -> np.ndarray:
    i_l = gs_interference(pairs, ctx)
    cinr = ctx.p_geo_w * ctx.h_geo_direct / (i_l + ctx.sigma2_w)
    return np.asarray(linear_to_db(cinr))


def handover_utility(n: int, pairs, h_sat, h_geo_gs, p_leo_w: float) -> float:
    """Aggregate received power at TBSs minus aggregate GEO-GS interference
    injected by satellite n's links (linear Watts).

    The ground-station side uses the station that sees satellite n most
    strongly (the worst-case victim).
    """
    links = [(m, k) for m, nn, k in pairs if nn == n]
    if not links:
        return 0.0
    h = np.nan_to_num(np.asarray(h_sat), nan=0.0)
    g_gs = float(np.max(h_geo_gs[n]))
    signal = sum(p_leo_w * h[n, m, k] for m, k in links)
    return float(signal - p_leo_w * g_gs * len(links))


def _candidate_utility(n: int, m: int, k: int, ctx: SatContext):
    """(utility passes threshold?, utility in dB) for a single new link."""
    signal = ctx.p_leo_w * float(np.nan_to_num(ctx.h_sat[n, m, k], nan=0.0))
    g_gs = float(np.max(ctx.h_geo_gs[n]))
    interf = ctx.p_leo_w * g_gs
    if ctx.handover_mode == "linear":
        # Raw power-difference form of the utility; threshold interpreted
        # as dB relative to 1 mW on the difference.
        diff = signal - interf
        u_db = float(linear_to_db(max(diff, 1e-300) / 1e-3))
        return diff > 0 and u_db >= ctx.handover_threshold_db, u_db
    u_db = float(linear_to_db(max(signal, 1e-300) / max(interf, 1e-300)))
    return u_db >= ctx.handover_threshold_db, u_db


# ---------------------------------------------------------------------------
# Matching engine

def _unit_owner(pairs):
    return {(n, k): m for m, n, k in pairs}


def _moves_for_unit(n, k, pairs, ctx: SatContext):
    """All single deviations that place, move, or drop unit (n, k)."""
    owner = _unit_owner(pairs)
    cur = owner.get((n, k))
    counts = np.zeros(ctx.shape[1], dtype=int)
    for m, _, _ in pairs:
        counts[m] += 1
    moves: list = []
    for m in range(ctx.shape[1]):
        if not ctx.visible[n, m] or m == cur:
            continue
        base = set(pairs)
        if cur is not None:
            base.discard((cur, n, k))
        if counts[m] < ctx.n_connect:
            moves.append((tuple(sorted(base | {(m, n, k)})), ("assign", m, None)))
        else:
            for m2, n2, k2 in sorted(pairs):
                if m2 != m:
                    continue
                trial = set(base)
                trial.discard((m2, n2, k2))
                trial.add((m, n, k))
                moves.append((tuple(sorted(trial)), ("swap", m, (n2, k2))))
    if cur is not None:
        dropped = set(pairs)
        dropped.discard((cur, n, k))
        moves.append((tuple(sorted(dropped)), ("drop", cur, None)))
    return moves


def _improve(pairs, ctx: SatContext, max_passes=MAX_IMPROVE_PASSES,
             enforce_c9: bool = False, excluded_sats=frozenset()):
    """First-improvement passes until no deviation raises the objective.

    With ``enforce_c9``, only deviations keeping every ground station at or
    below the interference cap are admissible; ``excluded_sats`` (satellites
    evicted by the protection loop) never re-enter.
    """
    pairs = tuple(sorted(pairs))
    value = weighted_backhaul_value(pairs, ctx)
    passes = 0
    units = [(n, k) for n in range(ctx.shape[0])
             if ctx.visible[n].any() and n not in excluded_sats
             for k in range(ctx.shape[2])]
    while passes < max_passes:
        passes += 1
        changed = False
        for n, k in units:
            best_val, best_pairs = value, None
            for trial, _tag in _moves_for_unit(n, k, pairs, ctx):
                if enforce_c9 and \
                        gs_interference(trial, ctx).max() > ctx.i_th_w * (1 + 1e-9):
                    continue
                v = weighted_backhaul_value(trial, ctx)
                if v > best_val + IMPROVE_TOL:
                    best_val, best_pairs = v, trial
            if best_pairs is not None:
                pairs, value = best_pairs, best_val
                changed = True
        if not changed:
            break
    return pairs, value, passes


def sat_blocking_pairs(pairs, ctx: SatContext, enforce_c9: bool = False,
                       first_only: bool = True, excluded_sats=frozenset()):
    """Deviations that would strictly improve the objective (stability scan).

    With ``enforce_c9`` deviations that push any ground station above the
    interference cap do not count as blocking; satellites evicted by the
    protection loop are outside the game and are skipped.
    """
    pairs = tuple(sorted(pairs))
    value = weighted_backhaul_value(pairs, ctx)
    blocking = []
    for n in range(ctx.shape[0]):
        if not ctx.visible[n].any() or n in excluded_sats:
            continue
        for k in range(ctx.shape[2]):
            for trial, tag in _moves_for_unit(n, k, pairs, ctx):
                if weighted_backhaul_value(trial, ctx) <= value + IMPROVE_TOL:
                    continue
                if enforce_c9 and gs_interference(trial, ctx).max() > ctx.i_th_w * (1 + 1e-9):
                    continue
                blocking.append(((n, k), tag))
                if first_only:
                    return blocking
    return blocking


def _init_phase(ctx: SatContext):
    """Maximin seeding: each TBS in turn takes its worst visible free unit.

    The TBS whose weakest unmatched option is strongest gets matched first;
    one TBS is matched per iteration, so iterations <= M.
    """
    n_sats, n_tbs, n_sc = ctx.shape
    pairs = set()
    taken = set()
    waiting = set(range(n_tbs))
    iterations = 0
    h = ctx.h_sat
    while waiting:
        best = None   # (value, m, k, n)
        for m in sorted(waiting):
            for k in range(n_sc):
                gains = [(h[n, m, k], n) for n in range(n_sats)
                         if ctx.visible[n, m] and (n, k) not in taken
                         and not np.isnan(h[n, m, k])]
                if not gains:
                    continue
                val, n_min = min(gains)
                if best is None or val > best[0] + 0.0:
                    best = (val, m, k, n_min)
        if best is None:
            break
        _, m, k, n = best
        pairs.add((m, n, k))
        taken.add((n, k))
        waiting.discard(m)
        iterations += 1
    return pairs, iterations


def _protection(pairs, ctx: SatContext, policy: str = "utility"):
    """Remove interfering satellites until every station meets the cap, then
    admit replacements per the handover policy. Returns (pairs, events).
    """
    pairs = set(pairs)
    events = []
    removed_sats = set()
    lost = []   # (m, from_sat, k) in removal order
    guard = 0
    while pairs:
        guard += 1
        if guard > len(ctx.h_geo_gs) * ctx.shape[0] + 10_000:
            break    # structurally unreachable; removal strictly shrinks pairs
        i_l = gs_interference(pairs, ctx)
        l_star = int(np.argmax(i_l))
        if i_l[l_star] <= ctx.i_th_w * (1 + 1e-9):
            break
        active = sorted({n for _, n, _ in pairs})
        contrib = {n: sum(ctx.p_leo_w * ctx.h_geo_gs[n, l_star]
                          for p in pairs if p[1] == n) for n in active}
        n_rm = max(active, key=lambda n: (contrib[n], -n))
        for m, n, k in sorted(pairs):
            if n == n_rm:
                lost.append((m, n_rm, k))
        pairs = {p for p in pairs if p[1] != n_rm}
        removed_sats.add(n_rm)

    for m, n_from, _k in lost:
        owner = _unit_owner(pairs)
        counts = np.zeros(ctx.shape[1], dtype=int)
        for mm, _, _ in pairs:
            counts[mm] += 1
        if counts[m] >= ctx.n_connect:
            continue
        candidates = []
        for n in range(ctx.shape[0]):
            if n in removed_sats or not ctx.visible[n, m]:
                continue
            for k in range(ctx.shape[2]):
                if (n, k) in owner or np.isnan(ctx.h_sat[n, m, k]):
                    continue
                ok, u_db = _candidate_utility(n, m, k, ctx)
                if policy == "nearest":
                    rng_nm = ctx.ranges[n, m] if ctx.ranges is not None else 0.0
                    candidates.append((rng_nm, n, k, u_db))
                elif ok:
                    candidates.append((-u_db, n, k, u_db))
        chosen = None
        for key, n, k, u_db in sorted(candidates):
            trial = set(pairs)
            trial.add((m, n, k))
            if gs_interference(trial, ctx).max() <= ctx.i_th_w * (1 + 1e-9):
                chosen = (n, k, u_db)
                break
        if chosen is not None:
            n, k, u_db = chosen
            pairs.add((m, n, k))
            events.append(HandoverEvent(t=ctx.t, tbs=m, from_sat=n_from,
                                        to_sat=n, utility_db=u_db))
    return pairs, events, removed_sats


def run_sat_matching(ctx: SatContext, *, handover_enabled: bool = True,
                     init_pairs=None, improve: bool = True,
                     protection_policy: str = "utility",
                     max_passes: int = MAX_IMPROVE_PASSES):
    """Full satellite-side pipeline: seed, improve, protect.

    Baselines reuse this with different seeds/policies; IMISH itself uses the
    maximin seed, full improvement, and the utility-threshold handover rule.
    """
    if init_pairs is None:
        pairs, iterations = _init_phase(ctx)
    else:
        pairs, iterations = set(init_pairs), 0
    passes = 0
    if improve:
        pairs, _, passes = _improve(pairs, ctx, max_passes)
    events = []
    removed = set()
    if handover_enabled:
        cinr = gs_cinr_db(pairs, ctx)
        if (cinr.size and float(cinr.min()) < ctx.cinr_threshold_db) or \
                gs_interference(pairs, ctx).max() > ctx.i_th_w * (1 + 1e-9):
            pairs, events, removed = _protection(pairs, ctx,
                                                 policy=protection_policy)
            if improve:
                # Re-stabilize within the interference cap; evicted
                # satellites stay out for the rest of the slot.
                pairs, _, extra = _improve(pairs, ctx, max_passes,
                                           enforce_c9=True,
                                           excluded_sats=frozenset(removed))
                passes += extra
    matching = SatMatching(pairs=tuple(sorted(pairs)), n_sats=ctx.shape[0],
                           n_tbs=ctx.shape[1], n_sc=ctx.shape[2],
                           proposal_iterations=iterations,
                           improve_passes=passes,
                           removed_sats=tuple(sorted(removed)))
    log = HandoverLog(events=events)
    return matching, log


def make_sat_context(channels, scenario, lam, i_th_w: float,
                     ranges=None) -> SatContext:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (scenario.n_tbs,):
        raise ValueError(f"lambda must have shape ({scenario.n_tbs},)")
    if (lam < 0).any():
        raise ValueError("lambda must be componentwise nonnegative")
    return SatContext(
        h_sat=channels.h_sat,
        visible=channels.visible,
        h_geo_gs=channels.h_geo_gs,
        h_geo_direct=channels.h_geo_direct,
        lam=lam,
        p_leo_w=scenario.powers.p_leo_per_sc_w,
        p_geo_w=scenario.powers.p_geo_w,
        sigma2_w=scenario.sigma2_ka_w,
        bandwidth_hz=scenario.bands.b_ka_hz,
        n_connect=scenario.n_connect,
        i_th_w=i_th_w,
        handover_threshold_db=scenario.handover_threshold_db,
        cinr_threshold_db=scenario.cinr_threshold_db,
        handover_mode=scenario.algo.handover_utility_mode,
        ranges=ranges,
        t=channels.t,
    )


def imish_round(channels, scenario, lam, geo_gains=None, prev_matching=None,
                *, i_th_w: float | None = None, handover_enabled: bool = True):
    """One IMISH slot: stable interference-aware matching plus handover log.

    ``geo_gains`` defaults to the gains carried by the channel state; the
    previous matching is accepted for interface symmetry (each slot builds
    its matching fresh from the current channels).
    """
    if i_th_w is None:
        from .channel import resolve_interference_threshold
        i_th_w = resolve_interference_threshold(scenario, channels.h_geo_direct)
    ctx = make_sat_context(channels, scenario, lam, i_th_w)
    if geo_gains is not None:
        ctx.h_geo_gs = np.asarray(geo_gains)
    return run_sat_matching(ctx, handover_enabled=handover_enabled)
