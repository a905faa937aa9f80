"""Per-timeslot channel power gains for all three link families.

Terrestrial access links fade Rayleigh, satellite backhaul links fade
Rician, and the LEO-to-GEO-ground-station interference path is a
deterministic function of geometry (free-space loss plus the receive
antenna's off-axis discrimination mask).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .scenario import (
    ConstellationState,
    NodePositions,
    Scenario,
    elevation_angle,
    place_nodes,
    slant_range,
)
from .units import SYSTEM_NOISE_TEMP_K, db_to_linear, friis_gain

log = logging.getLogger(__name__)

OFFAXIS_FLOOR_DBI = -10.0


@dataclass(frozen=True)
class ChannelState:
    """All channel power gains for one timeslot.

    ``h_sat`` entries for satellite-TBS pairs below the elevation mask are
    NaN (absent, not zero); ``visible`` carries the mask explicitly.
    """

    t: int
    h_terr: np.ndarray        # [M, J, C] linear power gain
    h_sat: np.ndarray         # [N, M, K]; NaN where not visible
    visible: np.ndarray       # [N, M] bool
    h_geo_gs: np.ndarray      # [N, L] LEO -> GEO-GS interference gain
    h_geo_direct: np.ndarray  # [L] GEO -> GEO-GS wanted-signal gain
    mean_terr: np.ndarray     # [M, J] fading-averaged terrestrial gain
    sat_ranges: np.ndarray | None = None   # [N, M] slant ranges (m)

    @property
    def shape(self):
        return self.h_terr.shape + self.h_sat.shape[::2]


def _rng_for(scenario: Scenario, stream: int, t: int):
    return np.random.default_rng([scenario.rng_seed, stream, t])


def peak_rx_gain_db(scenario: Scenario) -> float:
    """Boresight receive gain implied by the configured G/T figure."""
    return scenario.powers.g_over_t_db_k + 10.0 * math.log10(SYSTEM_NOISE_TEMP_K)


def offaxis_gain_db(phi_deg, peak_db: float):
    """ITU-style receive discrimination mask, 32 - 25 log10(phi) dBi.

    Clamped to [floor, peak]; the boresight direction gets the peak gain.
    """
    phi = np.asarray(phi_deg, dtype=float)
    pos = phi > 0
    mask = np.where(pos, 32.0 - 25.0 * np.log10(np.where(pos, phi, 1.0)), np.inf)
    return np.clip(mask, OFFAXIS_FLOOR_DBI, peak_db)


def sample_terrestrial_gains(scenario: Scenario, nodes: NodePositions, t: int,
                             rng=None) -> np.ndarray:
    """Rayleigh-faded TBS-to-GU gains, i.i.d. across (m, j, c).

    Gain = Friis(d, f_c) * G_T * G_R * |g|^2 with E|g|^2 = 1; distances below
    the configured minimum are clamped (and reported via logging).
    """
    if rng is None:
        rng = _rng_for(scenario, 3, t)
    mean = mean_terrestrial_gains(scenario, nodes)
    shape = (scenario.n_tbs, scenario.n_gu, scenario.n_sc_terrestrial)
    fade = rng.exponential(scale=1.0, size=shape)   # |CN(0,1)|^2
    return mean[:, :, None] * fade


def mean_terrestrial_gains(scenario: Scenario, nodes: NodePositions) -> np.ndarray:
    """Deterministic part of the terrestrial gain (path loss and antennas)."""
    d = slant_range(nodes.tbs[:, None, :], nodes.gu[None, :, :])
    n_clamped = int((d < scenario.channel.d_min_m).sum())
    if n_clamped:
        log.warning("clamped %d TBS-GU distances below %.1f m", n_clamped,
                    scenario.channel.d_min_m)
    d = np.maximum(d, scenario.channel.d_min_m)
    g = db_to_linear(scenario.powers.g_t_db + scenario.powers.g_r_db)
    return friis_gain(d, scenario.bands.f_c_hz) * g


def _rician_power_fades(rng, k_lin: float, size) -> np.ndarray:
    if math.isinf(k_lin):
        return np.ones(size)
    los = math.sqrt(k_lin / (k_lin + 1.0))
    sigma = math.sqrt(1.0 / (2.0 * (k_lin + 1.0)))
    re = los + sigma * rng.standard_normal(size)
    im = sigma * rng.standard_normal(size)
    return re**2 + im**2


def sample_satellite_gains(scenario: Scenario, constellation: ConstellationState,
                           t: int, rng=None, nodes: NodePositions | None = None):
    """Rician-faded LEO-to-TBS gains for visible pairs; NaN elsewhere.

    Returns (h_sat [N, M, K], visible [N, M]).
    """
    if rng is None:
        rng = _rng_for(scenario, 4, t)
    if nodes is None:
        nodes = place_nodes(scenario)
    sats = constellation.positions_at(t)
    el = elevation_angle(sats[:, None, :], nodes.tbs[None, :, :])
    visible = el >= scenario.elevation_min_deg

    n, m, k = constellation.n_sats, scenario.n_tbs, scenario.n_sc_leo
    h = np.full((n, m, k), np.nan)
    if visible.any():
        rng_d = slant_range(sats[:, None, :], nodes.tbs[None, :, :])
        g = db_to_linear(scenario.powers.g_t_db + scenario.powers.g_r_db)
        mean = friis_gain(rng_d, scenario.bands.f_ka_hz) * g
        k_lin = float(db_to_linear(scenario.channel.k_rice_db)) \
            if not math.isinf(scenario.channel.k_rice_db) else math.inf
        idx = np.argwhere(visible)
        fades = _rician_power_fades(rng, k_lin, (len(idx), k))
        h[idx[:, 0], idx[:, 1], :] = mean[idx[:, 0], idx[:, 1], None] * fades
    return h, visible


def geo_gs_interference_gains(scenario: Scenario,
                              constellation: ConstellationState,
                              t: int) -> np.ndarray:
    """Deterministic LEO-to-GEO-GS gains [N, L] through the off-axis mask.

    The off-axis angle is measured at the ground station between its GEO
    boresight and the direction to the LEO satellite; no fading is applied
    on this path.
    """
    sats = constellation.positions_at(t)
    gs = constellation.gs_positions
    to_geo = constellation.geo_position[None, :] - gs          # [L, 3]
    to_leo = sats[:, None, :] - gs[None, :, :]                 # [N, L, 3]
    cosang = np.sum(to_leo * to_geo[None, :, :], axis=-1)
    cosang /= np.linalg.norm(to_leo, axis=-1) * np.linalg.norm(to_geo, axis=-1)
    phi = np.rad2deg(np.arccos(np.clip(cosang, -1.0, 1.0)))

    peak = peak_rx_gain_db(scenario)
    rx = db_to_linear(offaxis_gain_db(phi, peak))
    tx = db_to_linear(scenario.powers.g_t_db)
    d = np.linalg.norm(to_leo, axis=-1)
    return friis_gain(d, scenario.bands.f_ka_hz) * tx * rx


def geo_direct_gains(scenario: Scenario, constellation: ConstellationState
                     ) -> np.ndarray:
    """GEO-to-GS wanted-signal gain [L], boresight aligned by definition."""
    d = slant_range(constellation.geo_position[None, :], constellation.gs_positions)
    g = db_to_linear(scenario.powers.g_t_db + peak_rx_gain_db(scenario))
    return friis_gain(d, scenario.bands.f_ka_hz) * g


def resolve_interference_threshold(scenario: Scenario,
                                   h_geo_direct: np.ndarray) -> float:
    """Interference cap; defaults so the GEO-GS CINR threshold sits at 0 dB.

    With the default, I <= I_th is equivalent to CINR >= 0 dB at the weakest
    ground station. Never negative: an empty assignment is always feasible.
    """
    if scenario.interference_threshold_w is not None:
        return float(scenario.interference_threshold_w)
    wanted = scenario.powers.p_geo_w * float(np.min(h_geo_direct))
    cinr_lin = float(db_to_linear(scenario.cinr_threshold_db))
    return max(0.0, wanted / cinr_lin - scenario.sigma2_ka_w)


def build_channel_state(scenario: Scenario, nodes: NodePositions,
                        constellation: ConstellationState, t: int) -> ChannelState:
    """Sample every gain family for slot t (deterministic per seed)."""
    h_terr = sample_terrestrial_gains(scenario, nodes, t)
    h_sat, visible = sample_satellite_gains(scenario, constellation, t, nodes=nodes)
    h_geo = geo_gs_interference_gains(scenario, constellation, t)
    sats = constellation.positions_at(t)
    return ChannelState(
        t=t,
        h_terr=h_terr,
        h_sat=h_sat,
        visible=visible,
        h_geo_gs=h_geo,
        h_geo_direct=geo_direct_gains(scenario, constellation),
        mean_terr=mean_terrestrial_gains(scenario, nodes),
        sat_ranges=slant_range(sats[:, None, :], nodes.tbs[None, :, :]),
    )
