"""Closed-form performance math: SINRs, rates, backhaul capacity, GEO-GS
interference, and the full constraint checker.

Everything here is a pure function of the assignment tensors and channel
gains; constraint violations are returned as data, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REL_TOL = 1e-9


@dataclass(frozen=True)
class AssignmentX:
    """Terrestrial side: GU-to-TBS-subchannel assignment and power."""

    x: np.ndarray        # [M, J, C] bool
    a: np.ndarray        # [M, J] bool association
    p_terr: np.ndarray   # [M, J, C] Watts


@dataclass(frozen=True)
class AssignmentB:
    """Satellite side: LEO-subchannel-to-TBS assignment and power."""

    b: np.ndarray        # [N, M, K] bool
    p_sat: np.ndarray    # [N, M, K] Watts


def gu_sinr_all(x, p_terr, h_terr, sigma2: float) -> np.ndarray:
    """SINR of every active terrestrial link, 0 where inactive.

    Interference for a link is every other active link on the same
    subchannel (co-channel sum), regardless of which TBS carries it.
    """
    x = np.asarray(x, dtype=float)
    tx = (x * p_terr)                                       # [M, J, C]
    per_tbs_sc = tx.sum(axis=1)                             # [M, C]
    # Total co-channel power arriving at GU j on SC c, own link included.
    arriving = np.einsum("mc,mjc->jc", per_tbs_sc, h_terr)  # [J, C]
    own = tx * h_terr
    interference = np.maximum(arriving[None, :, :] - own, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sinr = np.where(x > 0, own / (interference + sigma2), 0.0)
    return sinr


def gu_sinr(x, p_terr, h_terr, m: int, j: int, c: int, sigma2: float) -> float:
    """SINR of the single link (m, j, c); the link must be active."""
    if not x[m, j, c]:
        raise ValueError(f"link ({m},{j},{c}) is not active")
    return float(gu_sinr_all(x, p_terr, h_terr, sigma2)[m, j, c])


def gu_rate(sinr, is_backhaul_gu, u_back_bps: float, bandwidth_hz: float):
    """Shannon rate, capped at the backhaul traffic for backhaul GUs."""
    rate = bandwidth_hz * np.log2(1.0 + np.asarray(sinr, dtype=float))
    return np.where(is_backhaul_gu, np.minimum(rate, u_back_bps), rate)


def sat_link_rates(b, p_sat, h_sat, sigma2: float, bandwidth_hz: float):
    """Per-link backhaul rates [N, M, K]; 0 where inactive.

    Gains that are absent (NaN, below the elevation mask) contribute nothing
    to interference: such paths do not exist in the model.
    """
    b = np.asarray(b, dtype=float)
    h = np.nan_to_num(np.asarray(h_sat, dtype=float), nan=0.0)
    tx = b * p_sat                                          # [N, M, K]
    per_sat_sc = tx.sum(axis=1)                             # [N, K]
    arriving = np.einsum("nk,nmk->mk", per_sat_sc, h)       # [M, K]
    own = tx * h
    interference = np.maximum(arriving[None, :, :] - own, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sinr = np.where(b > 0, own / (interference + sigma2), 0.0)
    return bandwidth_hz * np.log2(1.0 + sinr)


def backhaul_capacity(b, p_sat, h_sat, sigma2: float, bandwidth_hz: float):
    """Per-TBS backhaul capacity vector [M] (sum of its link rates)."""
    return sat_link_rates(b, p_sat, h_sat, sigma2, bandwidth_hz).sum(axis=(0, 2))


def geo_gs_interference(b, p_sat, h_geo_gs, *, p_geo_w: float | None = None,
                        h_geo_direct=None, sigma2: float | None = None):
    """Aggregate LEO interference I_l at each GEO ground station.

    Returns the interference vector [L]; when the GEO direct-link arguments
    are supplied, also returns the CINR vector p_geo h_l / (I_l + sigma^2).
    """
    b = np.asarray(b, dtype=float)
    link_power = (b * p_sat).sum(axis=(1, 2))               # [N]
    i_l = link_power @ np.asarray(h_geo_gs, dtype=float)    # [L]
    if h_geo_direct is None:
        return i_l
    cinr = p_geo_w * np.asarray(h_geo_direct, dtype=float) / (i_l + sigma2)
    return i_l, cinr


@dataclass
class ConstraintReport:
    """Outcome of evaluating C1-C9 on one assignment."""

    violations: list = field(default_factory=list)   # (name, indices, detail)

    @property
    def ok(self) -> bool:
        return not self.violations

    def failed_constraints(self):
        return sorted({v[0] for v in self.violations})

    def add(self, name, indices, detail):
        self.violations.append((name, tuple(int(i) for i in indices), detail))

    def summary(self) -> str:
        if self.ok:
            return "all constraints satisfied"
        return "; ".join(f"{name}{list(idx)}: {detail}"
                         for name, idx, detail in self.violations)


def check_constraints(ax: AssignmentX, ab: AssignmentB, scenario, cache,
                      channels, i_th_w: float | None = None) -> ConstraintReport:
    """Evaluate every constraint C1-C9; violations are data, not errors."""
    rep = ConstraintReport()
    x = np.asarray(ax.x, dtype=bool)
    a = np.asarray(ax.a, dtype=bool)
    b = np.asarray(ab.b, dtype=bool)

    for m, j, c in zip(*np.nonzero(x & ~a[:, :, None])):
        rep.add("C1", (m, j, c), "link without association")
    for j in np.flatnonzero(x.sum(axis=(0, 2)) > 1):
        rep.add("C2", (j,), f"GU on {int(x.sum(axis=(0, 2))[j])} subchannels")
    over = np.argwhere(x.sum(axis=1) > 1)
    for m, c in over:
        rep.add("C3", (m, c), f"{int(x.sum(axis=1)[m, c])} GUs on one subchannel")

    vis = channels.visible
    for n, m, k in zip(*np.nonzero(b & ~vis[:, :, None])):
        rep.add("C4", (n, m, k), "assignment on non-visible pair")
    per_tbs = b.sum(axis=(0, 2))
    for m in np.flatnonzero(per_tbs > scenario.n_connect):
        rep.add("C5", (m,), f"{int(per_tbs[m])} > N_r={scenario.n_connect} links")
    per_unit = b.sum(axis=1)
    for n, k in np.argwhere(per_unit > 1):
        rep.add("C6", (n, k), f"{int(per_unit[n, k])} TBSs share one unit")

    cap = backhaul_capacity(b, ab.p_sat, channels.h_sat, scenario.sigma2_ka_w,
                            scenario.bands.b_ka_hz)
    load = (x * ~cache.g[:, :, None]).sum(axis=(1, 2)) * scenario.caching.u_back_bps
    for m in np.flatnonzero(load > cap * (1 + REL_TOL) + 1e-12):
        rep.add("C7", (m,), f"backhaul deficit {load[m] - cap[m]:.6g} bit/s")

    spent = (x * ax.p_terr).sum(axis=(1, 2))
    budget = scenario.powers.p_tbs_total_w
    for m in np.flatnonzero(spent > budget * (1 + REL_TOL)):
        rep.add("C8", (m,), f"power {spent[m]:.6g} W > {budget:.6g} W")

    if i_th_w is None:
        from .channel import resolve_interference_threshold
        i_th_w = resolve_interference_threshold(scenario, channels.h_geo_direct)
    i_l = geo_gs_interference(b, ab.p_sat, channels.h_geo_gs)
    for l in np.flatnonzero(i_l > i_th_w * (1 + REL_TOL) + 1e-30):
        rep.add("C9", (l,), f"interference {i_l[l]:.6g} W > I_th {i_th_w:.6g} W")
    return rep
