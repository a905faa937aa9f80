"""Simulation world: validated parameters, node placement, constellation motion.

All positions are Earth-centered Cartesian meters on a spherical Earth.
Ground nodes are static; satellite positions are expressed in the
Earth-fixed frame (orbital motion composed with the inverse of Earth
rotation), so elevation geometry can be evaluated against static ground
coordinates at every timeslot.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .units import (
    EARTH_RADIUS_M,
    EARTH_ROTATION_RAD_S,
    GEO_ALTITUDE_M,
    circular_orbit_period_s,
    dbm_to_w,
)

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

LEO_ALTITUDE_MIN_M = 300_000.0
LEO_ALTITUDE_MAX_M = 2_000_000.0


class ConfigError(ValueError):
    """Raised when a scenario config fails to parse or validate."""


@dataclass(frozen=True)
class BandConfig:
    f_c_hz: float = 4.9e9
    f_ka_hz: float = 30.0e9
    b_c_hz: float = 100.0e6          # per-subchannel bandwidth, C band
    b_ka_hz: float = 500.0e6         # per-subchannel bandwidth, Ka band
    noise_psd_dbm_hz: float = -174.0

    def validate(self):
        for name in ("f_c_hz", "f_ka_hz", "b_c_hz", "b_ka_hz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"bands.{name} must be positive")
        if self.noise_psd_dbm_hz >= 0:
            raise ConfigError("bands.noise_psd_dbm_hz must be negative")

    @property
    def noise_c_w(self) -> float:
        """Noise power over one C-band subchannel."""
        return float(dbm_to_w(self.noise_psd_dbm_hz) * self.b_c_hz)

    @property
    def noise_ka_w(self) -> float:
        """Noise power over one Ka-band subchannel."""
        return float(dbm_to_w(self.noise_psd_dbm_hz) * self.b_ka_hz)


@dataclass(frozen=True)
class PowerConfig:
    p_tbs_total_w: float = float(dbm_to_w(47.0))   # shared budget per TBS
    p_leo_per_sc_w: float = float(dbm_to_w(48.0))  # fixed per satellite subchannel
    p_geo_w: float = float(dbm_to_w(60.0))
    g_t_db: float = 30.0
    g_r_db: float = 30.0
    g_over_t_db_k: float = 18.5

    def validate(self):
        for name in ("p_tbs_total_w", "p_leo_per_sc_w", "p_geo_w"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"powers.{name} must be positive")


@dataclass(frozen=True)
class CacheConfig:
    n_files: int = 50
    cache_capacity: int = 40
    zipf_omega: float = 0.5
    u_back_bps: float = 3.0e6

    def validate(self):
        if self.n_files < 1:
            raise ConfigError("caching.n_files must be >= 1")
        if not 0 <= self.cache_capacity <= self.n_files:
            raise ConfigError("caching.cache_capacity out of range [0, n_files]")
        if self.zipf_omega < 0:
            raise ConfigError("caching.zipf_omega must be >= 0")
        if self.u_back_bps < 0:
            raise ConfigError("caching.u_back_bps must be >= 0")


@dataclass(frozen=True)
class ConstellationConfig:
    model: str = "synthetic_walker"     # or "trace_file"
    n_planes: int = 36
    sats_per_plane: int = 40
    altitude_m: float = 550_000.0
    inclination_deg: float = 53.0
    phasing: int = 1
    earth_rotation: bool = True         # express positions in the rotating frame
    trace_path: str = ""

    def validate(self):
        if self.model not in ("synthetic_walker", "trace_file"):
            raise ConfigError("constellation.model must be synthetic_walker or trace_file")
        if self.model == "synthetic_walker":
            if self.n_planes < 1 or self.sats_per_plane < 1:
                raise ConfigError("constellation.n_planes and sats_per_plane must be >= 1")
            if not LEO_ALTITUDE_MIN_M <= self.altitude_m <= LEO_ALTITUDE_MAX_M:
                raise ConfigError("constellation.altitude_m out of range [300 km, 2000 km]")
        elif not self.trace_path:
            raise ConfigError("constellation.trace_path required for trace_file model")


@dataclass(frozen=True)
class ChannelParams:
    k_rice_db: float = 10.0
    d_min_m: float = 1.0


@dataclass(frozen=True)
class AlgoParams:
    theta0: float = 1.0
    beta: float = 0.9
    dual_iteration_cap: int = 200
    dual_convergence_eps: float = 1e-6
    warm_start_lambda: bool = True
    early_exit_on_fixpoint: bool = True
    wf_iterations: int = 1
    handover_utility_mode: str = "db"   # "db" or "linear"
    sic_symmetric: bool = False
    rho: float = 1.0
    matching_polish: str = "auto"       # "auto" | "on" | "off"

    def validate(self):
        if not 0 < self.beta < 1:
            raise ConfigError("algo.beta must be in (0, 1)")
        if self.theta0 <= 0:
            raise ConfigError("algo.theta0 must be positive")
        if self.handover_utility_mode not in ("db", "linear"):
            raise ConfigError("algo.handover_utility_mode must be 'db' or 'linear'")
        if self.matching_polish not in ("auto", "on", "off"):
            raise ConfigError("algo.matching_polish must be auto, on, or off")


@dataclass(frozen=True)
class Scenario:
    """Immutable world description; safe to share across workers."""

    area_side_m: float = 3000.0
    n_tbs: int = 4
    n_gu: int = 50
    n_geo_gs: int = 1
    n_sc_terrestrial: int = 273
    n_sc_leo: int = 8
    n_connect: int = 3                      # max satellites per TBS
    elevation_min_deg: float = 30.0
    handover_threshold_db: float = 3.0
    cinr_threshold_db: float = 0.0
    interference_threshold_w: float | None = None   # None -> derived from GEO link
    n_timeslots: int = 1440
    slot_duration_s: float = 60.0
    rng_seed: int = 0
    scene_lat_deg: float = 40.0
    scene_lon_deg: float = 0.0
    tbs_layout: str = "grid"                # "grid" or "random"
    static_requests: bool = False
    bands: BandConfig = field(default_factory=BandConfig)
    powers: PowerConfig = field(default_factory=PowerConfig)
    caching: CacheConfig = field(default_factory=CacheConfig)
    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    algo: AlgoParams = field(default_factory=AlgoParams)

    @property
    def n_leo(self) -> int:
        """Satellite count; 0 for trace scenarios until the trace is loaded."""
        c = self.constellation
        if c.model == "synthetic_walker":
            return c.n_planes * c.sats_per_plane
        return 0

    def validate(self):
        counts = {
            "n_tbs": self.n_tbs, "n_gu": self.n_gu, "n_geo_gs": self.n_geo_gs,
            "n_sc_terrestrial": self.n_sc_terrestrial, "n_sc_leo": self.n_sc_leo,
            "n_timeslots": self.n_timeslots,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"scenario.{name} must be >= 1")
        if self.area_side_m <= 0:
            raise ConfigError("scenario.area_side_m must be positive")
        if not 0.0 < self.elevation_min_deg <= 90.0:
            raise ConfigError("scenario.elevation_min out of range (0, 90]")
        if self.n_connect < 1:
            raise ConfigError("scenario.n_connect must be >= 1")
        if self.slot_duration_s <= 0:
            raise ConfigError("scenario.slot_duration_s must be positive")
        if self.tbs_layout not in ("grid", "random"):
            raise ConfigError("scenario.tbs_layout must be 'grid' or 'random'")
        if self.interference_threshold_w is not None and self.interference_threshold_w < 0:
            raise ConfigError("scenario.interference_threshold_w must be >= 0")
        self.bands.validate()
        self.powers.validate()
        self.caching.validate()
        self.constellation.validate()
        self.algo.validate()

    # Derived quantities used throughout the link math.
    @property
    def sigma2_c_w(self) -> float:
        return self.bands.noise_c_w

    @property
    def sigma2_ka_w(self) -> float:
        return self.bands.noise_ka_w


def _take(section: dict, known: dict, where: str) -> dict:
    out = dict(known)
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}.{key}")
        out[key] = value
    return out


def _power_section(raw: dict) -> PowerConfig:
    raw = dict(raw)
    pairs = [("p_tbs_dbm", "p_tbs_total_w"), ("p_leo_dbm", "p_leo_per_sc_w"),
             ("p_geo_dbm", "p_geo_w")]
    kw = {}
    for dbm_key, w_key in pairs:
        if dbm_key in raw and w_key in raw:
            raise ConfigError(f"powers: give either {dbm_key} or {w_key}, not both")
        if dbm_key in raw:
            kw[w_key] = float(dbm_to_w(raw.pop(dbm_key)))
        elif w_key in raw:
            kw[w_key] = float(raw.pop(w_key))
    for key in ("g_t_db", "g_r_db", "g_over_t_db_k"):
        if key in raw:
            kw[key] = float(raw.pop(key))
    if raw:
        raise ConfigError(f"unknown config key powers.{next(iter(raw))}")
    return PowerConfig(**kw)


def build_scenario(config) -> Scenario:
    """Build a validated Scenario from a TOML file path or a nested mapping.

    Unspecified fields take their defaults (the standard parameter table);
    validation errors name the offending field.
    """
    if isinstance(config, (str, Path)):
        try:
            with open(config, "rb") as fh:
                data = _toml.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"scenario config not found: {config}")
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"scenario config parse failure: {exc}")
    elif isinstance(config, dict):
        data = config
    else:
        raise ConfigError(f"unsupported config type: {type(config).__name__}")

    data = dict(data)
    sections = {}
    for name, cls in (("bands", BandConfig), ("powers", None), ("caching", CacheConfig),
                      ("constellation", ConstellationConfig), ("channel", ChannelParams),
                      ("algo", AlgoParams)):
        raw = data.pop(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        if name == "powers":
            sections[name] = _power_section(raw)
        else:
            known = {f: getattr(cls(), f) for f in cls.__dataclass_fields__}
            sections[name] = cls(**_take(raw, known, name))

    top = data.pop("scenario", {})
    if data:
        raise ConfigError(f"unknown config section [{next(iter(data))}]")
    scalar_fields = {
        f: getattr(Scenario(), f) for f in Scenario.__dataclass_fields__
        if f not in ("bands", "powers", "caching", "constellation", "channel",
                     "algo", "_trace_n_leo")
    }
    kw = _take(top, scalar_fields, "scenario")
    scenario = Scenario(**kw, **sections)
    scenario.validate()
    return scenario


# ---------------------------------------------------------------------------
# Geometry helpers

def latlon_to_ecef(lat_deg, lon_deg, radius_m):
    lat = np.deg2rad(lat_deg)
    lon = np.deg2rad(lon_deg)
    return radius_m * np.array(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


def _scene_frame(scenario: Scenario):
    """Scene center and local east/north unit vectors on the sphere."""
    center = latlon_to_ecef(scenario.scene_lat_deg, scenario.scene_lon_deg,
                            EARTH_RADIUS_M)
    up = center / np.linalg.norm(center)
    east = np.cross([0.0, 0.0, 1.0], up)
    east = east / np.linalg.norm(east)
    north = np.cross(up, east)
    return center, east, north


def _ground_points(scenario: Scenario, east_m, north_m):
    """Map local planar offsets onto the Earth sphere."""
    center, east, north = _scene_frame(scenario)
    east_m = np.atleast_1d(np.asarray(east_m, dtype=float))
    north_m = np.atleast_1d(np.asarray(north_m, dtype=float))
    pts = center + np.outer(east_m, east) + np.outer(north_m, north)
    pts *= (EARTH_RADIUS_M / np.linalg.norm(pts, axis=1))[:, None]
    return pts


def elevation_angle(sat_pos, ground_pos):
    """Elevation of a satellite above the local horizon plane, in degrees.

    Broadcasts over leading dimensions; the last axis must be the 3-vector.
    """
    sat_pos = np.asarray(sat_pos, dtype=float)
    ground_pos = np.asarray(ground_pos, dtype=float)
    zenith = ground_pos / np.linalg.norm(ground_pos, axis=-1, keepdims=True)
    delta = sat_pos - ground_pos
    rng = np.linalg.norm(delta, axis=-1)
    sin_el = np.sum(delta * zenith, axis=-1) / rng
    return np.rad2deg(np.arcsin(np.clip(sin_el, -1.0, 1.0)))


def slant_range(sat_pos, ground_pos):
    delta = np.asarray(sat_pos, dtype=float) - np.asarray(ground_pos, dtype=float)
    return np.linalg.norm(delta, axis=-1)


@dataclass(frozen=True)
class NodePositions:
    """Static ground-node coordinates (Earth-centered meters)."""

    tbs: np.ndarray      # [M, 3]
    gu: np.ndarray       # [J, 3]
    geo_gs: np.ndarray   # [L, 3]


def place_nodes(scenario: Scenario) -> NodePositions:
    """Place TBSs (grid by default), GUs and GEO-GSs (uniform random) in the square.

    Deterministic for a given (config, seed).
    """
    rng = np.random.default_rng([scenario.rng_seed, 1])
    side = scenario.area_side_m
    m = scenario.n_tbs

    if scenario.tbs_layout == "grid":
        g = int(np.ceil(np.sqrt(m)))
        cell = side / g
        centers = [(-side / 2 + (i + 0.5) * cell, -side / 2 + (j + 0.5) * cell)
                   for j in range(g) for i in range(g)]
        coords = np.array(centers[:m])
    else:
        coords = rng.uniform(-side / 2, side / 2, size=(m, 2))
    tbs = _ground_points(scenario, coords[:, 0], coords[:, 1])

    gu_xy = rng.uniform(-side / 2, side / 2, size=(scenario.n_gu, 2))
    gu = _ground_points(scenario, gu_xy[:, 0], gu_xy[:, 1])

    gs_xy = rng.uniform(-side / 2, side / 2, size=(scenario.n_geo_gs, 2))
    geo_gs = _ground_points(scenario, gs_xy[:, 0], gs_xy[:, 1])
    return NodePositions(tbs=tbs, gu=gu, geo_gs=geo_gs)


# ---------------------------------------------------------------------------
# Constellation

class ConstellationState:
    """Satellite positions for every timeslot, plus GEO and GEO-GS geometry.

    Walker-delta positions are computed on demand from the orbital elements;
    trace positions are stored. Both are pure functions of the scenario, so
    the state is immutable and safe to share.
    """

    def __init__(self, scenario: Scenario, kind: str, *,
                 plane_axes=None, phase0=None, mean_motion=None,
                 trace=None, gs_positions=None):
        self.kind = kind
        self.n_slots = scenario.n_timeslots
        self.slot_s = scenario.slot_duration_s
        self._plane_axes = plane_axes
        self._phase0 = phase0
        self._mean_motion = mean_motion
        self._trace = trace
        if kind == "walker":
            self.n_sats = phase0.shape[0]
            c = scenario.constellation
            self.orbit_radius_m = EARTH_RADIUS_M + c.altitude_m
            self.earth_rotation = c.earth_rotation
        else:
            self.n_sats = trace.shape[1]
            self.earth_rotation = False
        self.geo_position = latlon_to_ecef(0.0, scenario.scene_lon_deg,
                                           EARTH_RADIUS_M + GEO_ALTITUDE_M)
        self.gs_positions = gs_positions

    def positions_at(self, t: int) -> np.ndarray:
        """Satellite coordinates [N, 3] in the Earth-fixed frame at slot t."""
        if not 0 <= t < self.n_slots:
            raise IndexError(f"timeslot {t} outside [0, {self.n_slots})")
        if self.kind == "trace":
            return self._trace[t]
        u = self._phase0 + self._mean_motion * self.slot_s * t
        in_plane = np.stack([np.cos(u), np.sin(u)], axis=1)          # [N, 2]
        eci = np.einsum("nij,nj->ni", self._plane_axes, in_plane) * self.orbit_radius_m
        if not self.earth_rotation:
            return eci
        # Earth-fixed frame: undo Earth rotation accumulated since t = 0.
        ang = -EARTH_ROTATION_RAD_S * self.slot_s * t
        ca, sa = np.cos(ang), np.sin(ang)
        rot = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
        return eci @ rot.T


def generate_constellation(scenario: Scenario, model: str | None = None
                           ) -> ConstellationState:
    """Build the constellation for the scenario.

    ``synthetic_walker`` produces a Walker-delta shell on circular orbits
    advancing at the Kepler rate; ``trace_file`` loads a CSV of
    ``t,sat_id,x_m,y_m,z_m`` rows that must cover every (slot, satellite) pair.
    """
    model = model or scenario.constellation.model
    gs = place_nodes(scenario).geo_gs
    if model == "synthetic_walker":
        return _walker_state(scenario, gs)
    if model == "trace_file":
        return _trace_state(scenario, gs)
    raise ConfigError(f"unknown constellation model: {model}")


def _walker_state(scenario: Scenario, gs_positions) -> ConstellationState:
    c = scenario.constellation
    p, s = c.n_planes, c.sats_per_plane
    n = p * s
    inc = np.deg2rad(c.inclination_deg)
    radius = EARTH_RADIUS_M + c.altitude_m
    mean_motion = 2.0 * np.pi / circular_orbit_period_s(radius)

    plane_idx = np.repeat(np.arange(p), s)
    sat_idx = np.tile(np.arange(s), p)
    raan = 2.0 * np.pi * plane_idx / p
    phase0 = (2.0 * np.pi * sat_idx / s
              + 2.0 * np.pi * c.phasing * plane_idx / (p * s))

    # Orthonormal in-plane axes for each orbital plane.
    cos_o, sin_o = np.cos(raan), np.sin(raan)
    p_axis = np.stack([cos_o, sin_o, np.zeros(n)], axis=1)
    q_axis = np.stack([-sin_o * np.cos(inc), cos_o * np.cos(inc),
                       np.full(n, np.sin(inc))], axis=1)
    plane_axes = np.stack([p_axis, q_axis], axis=2)   # [N, 3, 2]
    return ConstellationState(scenario, "walker", plane_axes=plane_axes,
                              phase0=phase0, mean_motion=mean_motion,
                              gs_positions=gs_positions)


def _trace_state(scenario: Scenario, gs_positions) -> ConstellationState:
    path = scenario.constellation.trace_path
    rows = []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append((int(row["t"]), int(row["sat_id"]),
                             float(row["x_m"]), float(row["y_m"]), float(row["z_m"])))
    except FileNotFoundError:
        raise ConfigError(f"trace file not found: {path}")
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"trace file malformed: {exc}")

    sat_ids = sorted({r[1] for r in rows})
    sat_index = {sid: i for i, sid in enumerate(sat_ids)}
    n, t_max = len(sat_ids), scenario.n_timeslots
    trace = np.full((t_max, n, 3), np.nan)
    for t, sid, x, y, z in rows:
        if 0 <= t < t_max:
            trace[t, sat_index[sid]] = (x, y, z)
    missing = np.argwhere(np.isnan(trace[:, :, 0]))
    if missing.size:
        t, i = missing[0]
        raise ConfigError(f"trace missing position for (t={t}, sat_id={sat_ids[i]})")
    radii = np.linalg.norm(trace, axis=2)
    alt = radii - EARTH_RADIUS_M
    if alt.min() < LEO_ALTITUDE_MIN_M or alt.max() > LEO_ALTITUDE_MAX_M:
        raise ConfigError("trace altitude out of range [300 km, 2000 km]")
    return ConstellationState(scenario, "trace", trace=trace,
                              gs_positions=gs_positions)


def visibility_report(scenario: Scenario, constellation: ConstellationState,
                      tbs_positions: np.ndarray, slot_stride: int = 1) -> dict:
    """Fraction of timeslots in which each TBS sees >= n_connect satellites.

    Returns per-TBS fractions plus the list of violating TBS indices
    (fraction < 0.99). Violations are reported, never silently dropped.
    """
    slots = range(0, scenario.n_timeslots, slot_stride)
    counts = np.zeros((len(tbs_positions), len(slots)), dtype=int)
    for col, t in enumerate(slots):
        sats = constellation.positions_at(t)
        el = elevation_angle(sats[:, None, :], tbs_positions[None, :, :])
        counts[:, col] = (el >= scenario.elevation_min_deg).sum(axis=0)
    frac = (counts >= scenario.n_connect).mean(axis=1)
    return {
        "fraction_ok": frac,
        "violating_tbs": [int(i) for i in np.flatnonzero(frac < 0.99)],
        "min_visible": int(counts.min()),
        "mean_visible": float(counts.mean()),
    }


def with_overrides(scenario: Scenario, **kwargs) -> Scenario:
    """Copy a scenario with top-level field overrides (sweep plumbing)."""
    out = replace(scenario, **kwargs)
    out.validate()
    return out
