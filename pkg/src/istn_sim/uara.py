"""One-to-one matching of ground users to TBS subchannels, followed by
per-TBS water-filling power allocation.

Each GU is pinned to its associated TBS (max mean received power), so the
game assigns the TBS's subchannels among its own users while co-channel
interference couples decisions across TBSs. Candidate assignments are
scored by the backhaul-penalized sum-rate objective with every TBS's
budget split equally over its active subchannels; a matching is stable
when no single deviation (assign, displace, relocate, exchange, or drop)
improves the objective. Water-filling replaces the equal split once the
matching has stabilized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

IMPROVE_TOL = 1e-9
MAX_IMPROVE_PASSES = 400


@dataclass(frozen=True)
class TerrMatching:
    """Stable terrestrial matching for one slot."""

    pairs: tuple                # sorted ((j, m, c), ...)
    association: np.ndarray     # [M, J] bool
    backhaul_gus: tuple         # GU ids classified backhaul
    unmatched: tuple            # GU ids left unserved
    proposal_iterations: int = 0
    improve_passes: int = 0

    def x_tensor(self, n_tbs: int, n_gu: int, n_sc: int) -> np.ndarray:
        x = np.zeros((n_tbs, n_gu, n_sc), dtype=bool)
        for j, m, c in self.pairs:
            x[m, j, c] = True
        return x


def associate_gus(channels, scenario) -> np.ndarray:
    """One-hot [M, J] association by maximum fading-averaged received power.

    Ties break to the lowest TBS index.
    """
    mean = channels.mean_terr
    best = np.argmax(mean, axis=0)          # argmax returns the first maximum
    a = np.zeros_like(mean, dtype=bool)
    a[best, np.arange(mean.shape[1])] = True
    return a


def theta_preference(h_new_own, h_new_cross, rho: float):
    """Externality-aware preference: own gain to the rho power over the
    cross gain the candidate would receive from the proposing unit's TBS.
    """
    return np.asarray(h_new_own, dtype=float) ** rho / np.asarray(h_new_cross,
                                                                  dtype=float)


def waterfill(n_eff, total_power: float, rel_tol: float = 1e-9) -> np.ndarray:
    """Water-filling over parallel channels with effective noise ``n_eff``.

    Returns powers p_c = max(0, mu - n_eff_c) with the level mu found by
    bisection so that sum(p) matches ``total_power`` to ``rel_tol``.
    """
    n_eff = np.asarray(n_eff, dtype=float)
    if n_eff.ndim != 1 or n_eff.size == 0:
        raise ValueError("n_eff must be a non-empty vector")
    if total_power <= 0:
        raise ValueError("total_power must be positive")
    lo = float(n_eff.min())
    hi = lo + total_power
    target = float(total_power)
    for _ in range(200):
        mu = 0.5 * (lo + hi)
        spent = np.maximum(0.0, mu - n_eff).sum()
        if abs(spent - target) <= rel_tol * target:
            break
        if spent > target:
            hi = mu
        else:
            lo = mu
    p = np.maximum(0.0, mu - n_eff)
    # Bisection leaves a sub-tolerance residual; spread it over active SCs.
    active = p > 0
    if active.any():
        p[active] += (target - p.sum()) / active.sum()
        p = np.maximum(p, 0.0)
    return p


# ---------------------------------------------------------------------------
# Matching engine

class _TerrState:
    """Mutable matching state with incremental utility deltas.

    Candidate evaluation splits each TBS's power budget equally over its
    active subchannels, so a move that changes a TBS's active count also
    re-prices that TBS's other links and the interference they cause.
    Rates for backhaul GUs are capped at the backhaul traffic and charged
    the lambda-weighted backhaul penalty. Hot paths run on plain Python
    floats; numpy only stores the inputs.
    """

    def __init__(self, h, a, lam, cap, pen, total_power, sigma2, bandwidth):
        self.h_np = h                 # [M, J, C]
        self.hl = h.tolist()
        self.a = a
        self.lam = lam
        self.cap = cap                # [J] rate cap (inf for local GUs)
        self.pen = pen                # [J] lambda * U_back for backhaul GUs
        self.capl = [float(v) for v in cap]
        self.penl = [float(v) for v in pen]
        self.total_power = float(total_power)
        self.sigma2 = float(sigma2)
        self.bw = float(bandwidth)
        m, j, c = h.shape
        self.n_tbs, self.n_gu, self.n_sc = m, j, c
        self.sc_of = [-1] * j
        self.occ = [[-1] * c for _ in range(m)]
        self.n_act = [0] * m
        self.tbs_of = np.argmax(a, axis=0)
        self.gus_of = [[int(j2) for j2 in np.flatnonzero(a[mm])]
                       for mm in range(m)]
        self.act_c = [[] for _ in range(c)]       # active TBSs per SC, sorted
        self._util_cache = [0.0] * c
        self._pw = [self.total_power] * m         # per-link power per TBS
        # Deep exchange moves only pay off on small instances; large ones
        # rely on the cheap families (see the polish gate as well).
        self.enable_xswap = (m * c) <= 64

    # --- bookkeeping -------------------------------------------------------
    def snapshot(self):
        return ([row[:] for row in self.occ], self.sc_of[:], self.n_act[:],
                [x[:] for x in self.act_c], self._util_cache[:], self._pw[:])

    def restore(self, snap):
        occ, sc, na, ac, uc, pw = snap
        self.occ = [row[:] for row in occ]
        self.sc_of = sc[:]
        self.n_act = na[:]
        self.act_c = [x[:] for x in ac]
        self._util_cache = uc[:]
        self._pw = pw[:]

    def power_of(self, n_links: int) -> float:
        return self.total_power / (n_links if n_links > 1 else 1)

    @property
    def pw(self):
        return np.array(self._pw)

    def pw_list(self):
        return self._pw

    # --- utility evaluation --------------------------------------------------
    def _sc_utility_cols(self, c, col, pw) -> float:
        """Utility of subchannel c for an explicit occupancy column (list
        indexed by TBS, -1 for idle) and per-TBS link powers."""
        hl = self.hl
        act = [m for m in range(self.n_tbs) if col[m] >= 0]
        if not act:
            return 0.0
        total = 0.0
        s2 = self.sigma2
        bw = self.bw
        capl, penl = self.capl, self.penl
        log2 = math.log2
        for m in act:
            j = col[m]
            hj = hl[m][j]
            interference = 0.0
            for m2 in act:
                if m2 != m:
                    interference += pw[m2] * hl[m2][j][c]
            rate = bw * log2(1.0 + pw[m] * hj[c] / (interference + s2))
            capj = capl[j]
            if rate > capj:
                rate = capj
            total += rate - penl[j]
        return total

    def _sc_utility(self, c, occ_col, pw):
        """Array-input wrapper kept for the independent test oracles."""
        return self._sc_utility_cols(c, list(occ_col), list(pw))

    def _util_before(self, c) -> float:
        v = self._util_cache[c]
        if v is None:
            v = self._sc_utility_cols(c, [self.occ[m][c]
                                          for m in range(self.n_tbs)],
                                      self.pw_list())
            self._util_cache[c] = v
        return v

    def _delta_for(self, changes) -> float:
        """Exact objective delta for a move given as {(m, c): new_j or -1}.

        Recomputes every subchannel whose occupancy changes plus every
        subchannel of any TBS whose active-link count (and hence per-link
        power) changes.
        """
        new_n = None
        for (m, c), j_new in changes.items():
            j_old = self.occ[m][c]
            step = (j_new >= 0) - (j_old >= 0)
            if step:
                if new_n is None:
                    new_n = self.n_act[:]
                new_n[m] += step
        if new_n is None:
            # occupancy swaps only: no repricing, touched SCs suffice
            pw_new = self._pw
            affected = {c for (_m, c) in changes}
        else:
            pw_new = [self.power_of(n) for n in new_n]
            affected = {c for (_m, c) in changes}
            for m in range(self.n_tbs):
                if new_n[m] != self.n_act[m]:
                    occ_m = self.occ[m]
                    affected.update(c for c in range(self.n_sc)
                                    if occ_m[c] >= 0)
        delta = 0.0
        for c in affected:
            col_new = [self.occ[mm][c] for mm in range(self.n_tbs)]
            for (mm, cc), j_new in changes.items():
                if cc == c:
                    col_new[mm] = j_new
            delta += (self._sc_utility_cols(c, col_new, pw_new)
                      - self._util_before(c))
        return delta

    # --- move family per unit ------------------------------------------------
    def moves_for_unit(self, m, c):
        """All deviations placing a candidate on (m, c), plus drop,
        intra-TBS exchange, cross-TBS subchannel swap, and compound
        placements that evict one co-channel victim at another TBS."""
        occupant = self.occ[m][c]
        moves = []
        for j in self.gus_of[m]:
            if j == occupant:
                continue
            changes = {(m, c): j}
            c_old = self.sc_of[j]
            if c_old >= 0:
                changes[(m, c_old)] = -1
            moves.append((changes, ("assign", j)))
            if occupant < 0:
                for m2 in self.act_c[c]:
                    if m2 == m:
                        continue
                    evict = dict(changes)
                    evict[(m2, c)] = -1
                    moves.append((evict, ("cross", j, m2)))
        if occupant >= 0:
            moves.append(({(m, c): -1}, ("drop", occupant)))
            for c2 in range(c + 1, self.n_sc):
                if self.occ[m][c2] >= 0:
                    moves.append(({(m, c): self.occ[m][c2],
                                   (m, c2): occupant}, ("exchange", c2)))
            if self.enable_xswap:
                for m2 in range(m + 1, self.n_tbs):
                    if self.occ[m2][c] >= 0:
                        continue
                    for c2 in range(self.n_sc):
                        j2 = self.occ[m2][c2]
                        if c2 == c or j2 < 0 or self.occ[m][c2] >= 0:
                            continue
                        moves.append(({(m, c): -1, (m2, c2): -1,
                                       (m, c2): occupant, (m2, c): j2},
                                      ("xswap", m2, c2)))
        return moves

    def best_move_for_unit(self, m, c):
        """Best (delta, changes) over the unit's move family, or (None, None).

        The hot families (unmatched candidate onto a free or occupied unit,
        with or without evicting a co-channel victim) share their
        candidate-independent terms; the small families go through the
        exact generic delta.
        """
        occupant = self.occ[m][c]
        hl = self.hl
        s2 = self.sigma2
        bw = self.bw
        capl, penl = self.capl, self.penl
        pw = self.pw_list()
        co = self.act_c[c]
        unmatched = [j for j in self.gus_of[m]
                     if self.sc_of[j] < 0 and j != occupant]
        best_delta, best_changes = -math.inf, None

        if unmatched:
            if occupant >= 0:
                # Displacement: transmit set and powers unchanged.
                others = [m2 for m2 in co if m2 != m]
                i_occ = 0.0
                for m2 in others:
                    i_occ += pw[m2] * hl[m2][occupant][c]
                sinr_occ = pw[m] * hl[m][occupant][c] / (i_occ + s2)
                u_occ = bw * math.log2(1.0 + sinr_occ)
                if u_occ > capl[occupant]:
                    u_occ = capl[occupant]
                u_occ -= penl[occupant]
                pwm = pw[m]
                for j in unmatched:
                    i_j = 0.0
                    for m2 in others:
                        i_j += pw[m2] * hl[m2][j][c]
                    u_new = bw * math.log2(1.0 + pwm * hl[m][j][c] / (i_j + s2))
                    if u_new > capl[j]:
                        u_new = capl[j]
                    d = u_new - penl[j] - u_occ
                    if d > best_delta:
                        best_delta, best_changes = d, {(m, c): j}
            else:
                # New link: the TBS's other links are repriced.
                pw_new = pw[:]
                pw_new[m] = self.power_of(self.n_act[m] + 1)
                shared = 0.0
                for c2 in range(self.n_sc):
                    if self.occ[m][c2] >= 0:
                        col = [self.occ[mm][c2] for mm in range(self.n_tbs)]
                        shared += (self._sc_utility_cols(c2, col, pw_new)
                                   - self._util_before(c2))
                others_after = 0.0
                for m2 in co:
                    j2 = self.occ[m2][c]
                    i2 = pw_new[m] * hl[m][j2][c]
                    for m3 in co:
                        if m3 != m2:
                            i2 += pw[m3] * hl[m3][j2][c]
                    r2 = bw * math.log2(1.0 + pw[m2] * hl[m2][j2][c] / (i2 + s2))
                    if r2 > capl[j2]:
                        r2 = capl[j2]
                    others_after += r2 - penl[j2]
                base = shared + others_after - self._util_before(c)
                pwm = pw_new[m]
                for j in unmatched:
                    i_j = 0.0
                    for m2 in co:
                        i_j += pw[m2] * hl[m2][j][c]
                    u_new = bw * math.log2(1.0 + pwm * hl[m][j][c] / (i_j + s2))
                    if u_new > capl[j]:
                        u_new = capl[j]
                    d = u_new - penl[j] + base
                    if d > best_delta:
                        best_delta, best_changes = d, {(m, c): j}
                # Cross-eviction of one co-channel victim per target TBS.
                for m2 in co:
                    if m2 == m:
                        continue
                    pw2 = pw[:]
                    pw2[m] = self.power_of(self.n_act[m] + 1)
                    pw2[m2] = self.power_of(self.n_act[m2] - 1)
                    shared2 = 0.0
                    for mm in (m, m2):
                        for c2 in range(self.n_sc):
                            if c2 != c and self.occ[mm][c2] >= 0:
                                col = [self.occ[m3][c2]
                                       for m3 in range(self.n_tbs)]
                                shared2 += (self._sc_utility_cols(c2, col, pw2)
                                            - self._util_before(c2))
                    rest = [m3 for m3 in co if m3 != m2]
                    others_after = 0.0
                    for m3 in rest:
                        j3 = self.occ[m3][c]
                        i3 = pw2[m] * hl[m][j3][c]
                        for m4 in rest:
                            if m4 != m3:
                                i3 += pw2[m4] * hl[m4][j3][c]
                        r3 = bw * math.log2(1.0 + pw2[m3] * hl[m3][j3][c]
                                            / (i3 + s2))
                        if r3 > capl[j3]:
                            r3 = capl[j3]
                        others_after += r3 - penl[j3]
                    base2 = shared2 + others_after - self._util_before(c)
                    pwm2 = pw2[m]
                    for j in unmatched:
                        i_j = 0.0
                        for m3 in rest:
                            i_j += pw2[m3] * hl[m3][j][c]
                        u_new = bw * math.log2(1.0 + pwm2 * hl[m][j][c]
                                               / (i_j + s2))
                        if u_new > capl[j]:
                            u_new = capl[j]
                        d = u_new - penl[j] + base2
                        if d > best_delta:
                            best_delta, best_changes = d, {(m, c): j,
                                                           (m2, c): -1}

        # Exact generic evaluation for the remaining (small) move families.
        small_moves = []
        for j in self.gus_of[m]:
            c_old = self.sc_of[j]
            if c_old < 0 or j == occupant:
                continue
            small_moves.append({(m, c): j, (m, c_old): -1})
            if occupant < 0:
                for m2 in co:
                    if m2 != m:
                        small_moves.append({(m, c): j, (m, c_old): -1,
                                            (m2, c): -1})
        if occupant >= 0:
            small_moves.append({(m, c): -1})
            for c2 in range(c + 1, self.n_sc):
                if self.occ[m][c2] >= 0:
                    small_moves.append({(m, c): self.occ[m][c2],
                                        (m, c2): occupant})
            if self.enable_xswap:
                for m2 in range(m + 1, self.n_tbs):
                    if self.occ[m2][c] >= 0:
                        continue
                    for c2 in range(self.n_sc):
                        j2 = self.occ[m2][c2]
                        if c2 == c or j2 < 0 or self.occ[m][c2] >= 0:
                            continue
                        small_moves.append({(m, c): -1, (m2, c2): -1,
                                            (m, c2): occupant, (m2, c): j2})
        for changes in small_moves:
            d = self._delta_for(changes)
            if d > best_delta:
                best_delta, best_changes = d, changes
        if best_changes is None:
            return None, None
        return best_delta, best_changes

    def apply(self, changes):
        repriced = False
        for (m, c), j_new in changes.items():
            j_old = self.occ[m][c]
            if j_old >= 0:
                self.sc_of[j_old] = -1
                self.n_act[m] -= 1
                self.act_c[c].remove(m)
                repriced = True
            self.occ[m][c] = -1
            self._util_cache[c] = None
        for (m, c), j_new in changes.items():
            if j_new >= 0:
                self.occ[m][c] = j_new
                self.sc_of[j_new] = c
                self.n_act[m] += 1
                self.act_c[c].append(m)
                self.act_c[c].sort()
                repriced = True
        if repriced:
            self._util_cache = [None] * self.n_sc
            for (m, _c) in changes:
                self._pw[m] = self.power_of(self.n_act[m])

    def pairs(self):
        out = []
        for j in range(self.n_gu):
            if self.sc_of[j] >= 0:
                out.append((j, int(self.tbs_of[j]), self.sc_of[j]))
        return tuple(sorted(out))


def _init_phase(state: _TerrState):
    """Gain-greedy seeding: every free subchannel proposes to its best
    unmatched associated GU; each GU accepts its strongest proposal.
    At least one GU is matched per round, so rounds <= J.
    """
    rounds = 0
    while True:
        proposals = {}   # j -> (gain, m, c)
        if all(c >= 0 for c in state.sc_of):
            break
        progress = False
        for m in range(state.n_tbs):
            js = np.array([j for j in state.gus_of[m] if state.sc_of[j] < 0])
            if js.size == 0:
                continue
            free_cs = np.array([c for c in range(state.n_sc)
                                if state.occ[m][c] < 0])
            if free_cs.size == 0:
                continue
            gains = state.h_np[m][np.ix_(js, free_cs)]
            for idx_c, c in enumerate(free_cs):
                j_best = int(js[int(np.argmax(gains[:, idx_c]))])
                g = float(state.h_np[m, j_best, c])
                cur = proposals.get(j_best)
                if cur is None or g > cur[0]:
                    proposals[j_best] = (g, m, int(c))
        if not proposals:
            break
        rounds += 1
        for j in sorted(proposals):
            g, m, c = proposals[j]
            if state.occ[m][c] < 0 and state.sc_of[j] < 0:
                state.apply({(m, c): int(j)})
                progress = True
        if not progress:
            break
    return rounds


def _improve(state: _TerrState, max_passes=MAX_IMPROVE_PASSES):
    """First-improvement sweeps over subchannel units until stable."""
    passes = 0
    while passes < max_passes:
        passes += 1
        changed = False
        for m in range(state.n_tbs):
            for c in range(state.n_sc):
                delta, changes = state.best_move_for_unit(m, c)
                if delta is not None and delta > IMPROVE_TOL:
                    state.apply(changes)
                    changed = True
        if not changed:
            break
    return passes


def _total_utility(state: _TerrState) -> float:
    pw = state.pw_list()
    return sum(state._sc_utility_cols(c, [state.occ[m][c]
                                          for m in range(state.n_tbs)], pw)
               for c in range(state.n_sc))


def _ban_reconverge(state: _TerrState, ban, orig_pairs=None):
    """Evict the given GUs, converge with them banned so the rest can
    restructure, then re-admit them and converge again.

    Returns (passes, moved): ``moved`` is False when the process provably
    lands back on the incumbent matching, letting the caller skip the
    value comparison (and this function skip the final verification).
    """
    passes = 0
    saved = {}
    survivors = {(j, state.sc_of[j]) for j in range(state.n_gu)
                 if state.sc_of[j] >= 0 and j not in ban}
    for j in ban:
        m = int(state.tbs_of[j])
        c = state.sc_of[j]
        if c >= 0:
            state.apply({(m, c): -1})
        if m not in saved:
            saved[m] = state.gus_of[m]
    for m in saved:
        state.gus_of[m] = [j for j in saved[m] if j not in ban]
    passes += _improve(state)
    restructured = {(j, state.sc_of[j]) for j in range(state.n_gu)
                    if state.sc_of[j] >= 0} != survivors
    for m, full in saved.items():
        state.gus_of[m] = full
    if not restructured:
        # The remainder did not move, so the banned GUs re-enter their old
        # slots exactly; the incumbent is reproduced.
        return passes, False
    passes += _improve(state, max_passes=1)
    if orig_pairs is not None and state.pairs() == orig_pairs:
        return passes, False
    passes += _improve(state)
    return passes, True


def _polish(state: _TerrState, max_rounds: int = 64, deep: bool = False):
    """Escape residual local maxima by ban-and-reconverge restarts over
    single matched GUs (plus whole-TBS and GU-pair bans in deep mode).
    A change is kept only when it strictly improves the objective, so the
    result is still an improvement fixpoint."""
    best = _total_utility(state)
    extra_passes = 0
    version = 0
    rejected = {}            # ban tuple -> incumbent version when rejected
    for _ in range(max_rounds):
        matched = [int(j) for j in range(state.n_gu) if state.sc_of[j] >= 0]
        candidates = [(j,) for j in matched]
        tbs_bans = set()
        for m in range(state.n_tbs):
            links = tuple(j for j in matched if state.tbs_of[j] == m)
            if len(links) > 1:
                candidates.append(links)
                tbs_bans.add(links)
        if deep:
            candidates += [(a, b) for i, a in enumerate(matched)
                           for b in matched[i + 1:]
                           if (a, b) not in tbs_bans]
        improved = False
        orig_pairs = state.pairs()
        for ban in candidates:
            if rejected.get(ban) == version:
                continue
            snap = state.snapshot()
            p, moved = _ban_reconverge(state, set(ban), orig_pairs)
            extra_passes += p
            if moved and _total_utility(state) > best + IMPROVE_TOL:
                best = _total_utility(state)
                improved = True
                version += 1
                break
            rejected[ban] = version
            state.restore(snap)
        if not improved:
            break
    return extra_passes


def _polish_level(scenario) -> str:
    """'deep' (on), 'light' (auto, small instance), or 'none'."""
    mode = scenario.algo.matching_polish
    if mode == "on":
        return "deep"
    if mode == "off":
        return "none"
    small = scenario.n_gu <= 40 and scenario.n_sc_terrestrial <= 8
    return "light" if small else "none"


def _build_state(channels, scenario, lam, cache_state, association):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (scenario.n_tbs,):
        raise ValueError(f"lambda must have shape ({scenario.n_tbs},)")
    if (lam < 0).any():
        raise ValueError("lambda must be componentwise nonnegative")
    tbs_of = np.argmax(association, axis=0)
    j_idx = np.arange(scenario.n_gu)
    local = cache_state.g[tbs_of, j_idx]
    u_back = scenario.caching.u_back_bps
    cap = np.where(local, np.inf, u_back)
    pen = np.where(local, 0.0, lam[tbs_of] * u_back)
    return _TerrState(channels.h_terr, association, lam, cap, pen,
                      scenario.powers.p_tbs_total_w,
                      scenario.sigma2_c_w, scenario.bands.b_c_hz)


def equal_split_powers(state: _TerrState) -> np.ndarray:
    """Per-link power tensor for the equal-split rule (the matching's own
    provisional model and the UAAA final rule)."""
    p = np.zeros((state.n_tbs, state.n_gu, state.n_sc))
    pw = state.pw_list()
    for m in range(state.n_tbs):
        for c in range(state.n_sc):
            j = state.occ[m][c]
            if j >= 0:
                p[m, j, c] = pw[m]
    return p


def allocate_powers(state: _TerrState, total_power: float, mode: str,
                    wf_iterations: int = 1) -> np.ndarray:
    """Final power tensor [M, J, C] for the matched links.

    ``waterfill`` equalizes water levels against effective noise measured
    with other TBSs held at the equal-split provisional power; ``equal``
    keeps the even split over active subchannels.
    """
    if mode == "equal":
        return equal_split_powers(state)
    p = equal_split_powers(state)
    current = p.sum(axis=1)                       # [M, C] transmit powers
    for _ in range(max(1, wf_iterations)):
        new_p = np.zeros_like(p)
        for m in range(state.n_tbs):
            links = [(c, state.occ[m][c]) for c in range(state.n_sc)
                     if state.occ[m][c] >= 0]
            if not links:
                continue
            n_eff = np.empty(len(links))
            for i, (c, j) in enumerate(links):
                interf = 0.0
                for m2 in state.act_c[c]:
                    if m2 != m:
                        interf += current[m2, c] * state.hl[m2][j][c]
                n_eff[i] = (interf + state.sigma2) / state.hl[m][j][c]
            alloc = waterfill(n_eff, total_power)
            for i, (c, j) in enumerate(links):
                new_p[m, j, c] = alloc[i]
        p = new_p
        current = p.sum(axis=1)
    return p


def uara_round(channels, scenario, lam, cache_state, *,
               power_mode: str = "waterfill"):
    """One UARA slot: stable matching plus per-TBS power allocation.

    Returns (TerrMatching, p_terr). The matching is evaluated at the
    equal-split provisional power; the configured power rule runs
    afterwards.
    """
    association = associate_gus(channels, scenario)
    state = _build_state(channels, scenario, lam, cache_state, association)
    rounds = _init_phase(state)
    passes = _improve(state)
    level = _polish_level(scenario)
    if level != "none":
        passes += _polish(state, deep=(level == "deep"))
    p_terr = allocate_powers(state, scenario.powers.p_tbs_total_w, power_mode,
                             scenario.algo.wf_iterations)
    pairs = state.pairs()
    matched = {j for j, _, _ in pairs}
    tbs_of = np.argmax(association, axis=0)
    backhaul = tuple(int(j) for j in range(scenario.n_gu)
                     if not cache_state.g[tbs_of[j], j])
    matching = TerrMatching(
        pairs=pairs,
        association=association,
        backhaul_gus=backhaul,
        unmatched=tuple(sorted(set(range(scenario.n_gu)) - matched)),
        proposal_iterations=rounds,
        improve_passes=passes,
    )
    return matching, p_terr


def powers_for_pairs(channels, scenario, lam, cache_state, association, pairs,
                     power_mode: str = "waterfill") -> np.ndarray:
    """Re-run the power rule for an explicit pair set (post-repair refresh)."""
    state = _build_state(channels, scenario, lam, cache_state, association)
    for j, m, c in pairs:
        state.apply({(m, c): int(j)})
    return allocate_powers(state, scenario.powers.p_tbs_total_w, power_mode,
                           scenario.algo.wf_iterations)


# ---------------------------------------------------------------------------
# Independent full-state evaluation (used by the stability scanner and tests)

def terr_utility_full(pairs, channels, scenario, lam, cache_state,
                      association) -> float:
    """Backhaul-penalized utility computed from scratch on full tensors,
    at the equal-split provisional power."""
    from .link_budget import gu_sinr_all

    lam = np.asarray(lam, dtype=float)
    m_n, j_n, c_n = scenario.n_tbs, scenario.n_gu, scenario.n_sc_terrestrial
    x = np.zeros((m_n, j_n, c_n), dtype=bool)
    for j, m, c in pairs:
        x[m, j, c] = True
    n_act = x.sum(axis=(1, 2))
    pw = scenario.powers.p_tbs_total_w / np.maximum(n_act, 1)
    p = np.where(x, pw[:, None, None], 0.0)
    sinr = gu_sinr_all(x, p, channels.h_terr, scenario.sigma2_c_w)
    rates = scenario.bands.b_c_hz * np.log2(1.0 + sinr)
    tbs_of = np.argmax(association, axis=0)
    local = cache_state.g[tbs_of, np.arange(j_n)]
    u_back = scenario.caching.u_back_bps
    total = 0.0
    for j, m, c in pairs:
        r = rates[m, j, c]
        if not local[j]:
            r = min(r, u_back)
            total -= lam[m] * u_back
        total += r
    return float(total)


def terr_blocking_pairs(matching: TerrMatching, channels, scenario, lam,
                        cache_state, first_only: bool = True):
    """Exhaustive deviation scan against the from-scratch utility.

    A pair (j, (m, c)) blocks when assigning j to (m, c) — displacing any
    occupant and freeing j's current subchannel — strictly improves the
    utility; pure drops are scanned as well.
    """
    a = matching.association
    base_pairs = set(matching.pairs)
    base = terr_utility_full(base_pairs, channels, scenario, lam, cache_state, a)
    unit_of = {(m, c): j for j, m, c in base_pairs}
    sc_of = {j: (m, c) for j, m, c in base_pairs}
    blocking = []
    for j in range(scenario.n_gu):
        m = int(np.argmax(a[:, j]))
        for c in range(scenario.n_sc_terrestrial):
            if unit_of.get((m, c)) == j:
                continue
            trial = set(base_pairs)
            if j in sc_of:
                trial.discard((j,) + sc_of[j])
            occ = unit_of.get((m, c))
            if occ is not None:
                trial.discard((occ, m, c))
            trial.add((j, m, c))
            if terr_utility_full(trial, channels, scenario, lam, cache_state,
                                 a) > base + IMPROVE_TOL:
                blocking.append((j, m, c))
                if first_only:
                    return blocking
    for j, m, c in sorted(base_pairs):
        trial = set(base_pairs)
        trial.discard((j, m, c))
        if terr_utility_full(trial, channels, scenario, lam, cache_state,
                             a) > base + IMPROVE_TOL:
            blocking.append((j, m, c))
            if first_only:
                return blocking
    return blocking
