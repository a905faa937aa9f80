import math

import numpy as np
import pytest

from istn_sim.scenario import (
    ConfigError,
    ConstellationConfig,
    Scenario,
    build_scenario,
    elevation_angle,
    generate_constellation,
    place_nodes,
    visibility_report,
    with_overrides,
    _scene_frame,
)
from istn_sim.units import (
    EARTH_RADIUS_M,
    MU_EARTH_M3_S2,
    circular_orbit_period_s,
    dbm_to_w,
    w_to_dbm,
)


class TestBuildScenario:
    def test_empty_config_takes_defaults(self):
        s = build_scenario({})
        assert s.bands.f_c_hz == 4.9e9
        assert s.bands.f_ka_hz == 30e9
        assert s.bands.b_c_hz == 100e6
        assert s.bands.b_ka_hz == 500e6
        assert s.bands.noise_psd_dbm_hz == -174.0
        assert s.powers.p_tbs_total_w == pytest.approx(dbm_to_w(47.0))
        assert s.powers.p_leo_per_sc_w == pytest.approx(dbm_to_w(48.0))
        assert s.powers.p_geo_w == pytest.approx(1000.0)
        assert s.powers.g_over_t_db_k == 18.5
        assert s.elevation_min_deg == 30.0
        assert s.algo.rho == 1.0
        assert s.n_timeslots == 1440
        assert s.caching.zipf_omega == 0.5
        assert s.caching.n_files == 50 and s.caching.cache_capacity == 40

    def test_elevation_min_zero_rejected(self):
        with pytest.raises(ConfigError, match="elevation_min"):
            build_scenario({"scenario": {"elevation_min_deg": 0.0}})

    def test_dbm_power_stored_linear(self, tmp_path):
        cfg = tmp_path / "s.toml"
        cfg.write_text("[powers]\np_tbs_dbm = 47.0\n")
        s = build_scenario(cfg)
        # 10^(47/10) mW computed independently
        assert s.powers.p_tbs_total_w == pytest.approx(50.11872336272722, rel=1e-9)

    def test_unknown_key_names_field(self):
        with pytest.raises(ConfigError, match="not_a_field"):
            build_scenario({"scenario": {"not_a_field": 1}})

    def test_parse_failure(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("this is [not toml")
        with pytest.raises(ConfigError, match="parse"):
            build_scenario(bad)

    def test_dbm_roundtrip(self):
        for dbm in np.linspace(-190.0, 80.0, 41):
            w = dbm_to_w(dbm)
            assert abs(w_to_dbm(w) - dbm) < 1e-9 * max(1.0, abs(dbm))


class TestConstellation:
    def test_walker_counts(self):
        s = with_overrides(Scenario(), constellation=ConstellationConfig(
            n_planes=36, sats_per_plane=40))
        const = generate_constellation(s)
        assert const.n_sats == 1440
        assert const.positions_at(0).shape == (1440, 3)

    def test_orbit_period_matches_kepler(self):
        # Independent oracle: Kepler's third law at 550 km altitude.
        a = EARTH_RADIUS_M + 550e3
        period = 2.0 * math.pi * math.sqrt(a**3 / MU_EARTH_M3_S2)
        assert abs(circular_orbit_period_s(a) - period) < 1e-6
        assert period == pytest.approx(5730.1, abs=1.0)

    def test_equatorial_half_period_antipodal(self):
        a = EARTH_RADIUS_M + 550e3
        half = circular_orbit_period_s(a) / 2.0
        const_cfg = ConstellationConfig(n_planes=1, sats_per_plane=1,
                                        altitude_m=550e3, inclination_deg=0.0,
                                        earth_rotation=False)
        s = with_overrides(Scenario(), n_timeslots=2, slot_duration_s=half,
                           constellation=const_cfg)
        const = generate_constellation(s)
        p0 = const.positions_at(0)[0]
        p1 = const.positions_at(1)[0]
        assert np.allclose(p0, -p1, atol=1e-3 * a)

    def test_positions_deterministic(self):
        s = Scenario()
        c1 = generate_constellation(s)
        c2 = generate_constellation(s)
        assert np.array_equal(c1.positions_at(3), c2.positions_at(3))

    def test_altitude_bounds_enforced(self):
        with pytest.raises(ConfigError, match="altitude"):
            build_scenario({"constellation": {"altitude_m": 100e3}})

    def test_trace_roundtrip(self, tmp_path):
        radius = EARTH_RADIUS_M + 600e3
        rows = ["t,sat_id,x_m,y_m,z_m"]
        for t in range(3):
            for sid in (11, 22):
                ang = 0.1 * t + (0.5 if sid == 22 else 0.0)
                rows.append(f"{t},{sid},{radius*math.cos(ang)},"
                            f"{radius*math.sin(ang)},0.0")
        trace = tmp_path / "trace.csv"
        trace.write_text("\n".join(rows) + "\n")
        s = build_scenario({
            "scenario": {"n_timeslots": 3},
            "constellation": {"model": "trace_file", "trace_path": str(trace)},
        })
        const = generate_constellation(s)
        assert const.n_sats == 2
        p = const.positions_at(2)
        assert p[0] == pytest.approx(
            [radius * math.cos(0.2), radius * math.sin(0.2), 0.0])

    def test_trace_missing_pair_rejected(self, tmp_path):
        radius = EARTH_RADIUS_M + 600e3
        trace = tmp_path / "trace.csv"
        trace.write_text("t,sat_id,x_m,y_m,z_m\n"
                         f"0,1,{radius},0,0\n"
                         f"1,1,{radius},0,0\n"
                         f"0,2,{radius},0,0\n")
        s = build_scenario({
            "scenario": {"n_timeslots": 2},
            "constellation": {"model": "trace_file", "trace_path": str(trace)},
        })
        with pytest.raises(ConfigError, match=r"t=1, sat_id=2"):
            generate_constellation(s)


class TestElevation:
    def test_zenith(self):
        ground = np.array([EARTH_RADIUS_M, 0.0, 0.0])
        sat = np.array([EARTH_RADIUS_M + 550e3, 0.0, 0.0])
        assert elevation_angle(sat, ground) == pytest.approx(90.0)

    def test_horizon_plane(self):
        ground = np.array([EARTH_RADIUS_M, 0.0, 0.0])
        sat = np.array([EARTH_RADIUS_M, 700e3, 0.0])   # in the tangent plane
        assert elevation_angle(sat, ground) == pytest.approx(0.0, abs=1e-9)

    def test_five_degrees_of_arc(self):
        # Spherical-geometry oracle built from the plane triangle:
        # ground at radius R, satellite at radius r, central angle psi.
        r = EARTH_RADIUS_M + 550e3
        psi = math.radians(5.0)
        ground = np.array([EARTH_RADIUS_M, 0.0, 0.0])
        sat = np.array([r * math.cos(psi), r * math.sin(psi), 0.0])
        delta = sat - ground
        expected = math.degrees(math.asin(delta[0] / np.linalg.norm(delta)))
        assert expected == pytest.approx(40.96, abs=0.05)
        assert elevation_angle(sat, ground) == pytest.approx(expected, abs=1e-9)


class TestPlaceNodes:
    def test_grid_of_four_is_cell_centers(self):
        s = with_overrides(Scenario(), n_tbs=4)
        tbs = place_nodes(s).tbs
        assert np.allclose(np.linalg.norm(tbs, axis=1), EARTH_RADIUS_M)
        d = np.linalg.norm(tbs[:, None] - tbs[None, :], axis=-1)
        # 2x2 cell centers on a 3 km square: neighbors 1500 m, diagonal
        # 1500*sqrt(2); chord-vs-arc error at this scale is micrometers.
        expect = {0.0: 4, 1500.0: 8, 1500.0 * math.sqrt(2): 4}
        for val, count in expect.items():
            assert (np.abs(d - val) < 0.01).sum() == count

    def test_same_seed_identical(self):
        s = Scenario()
        n1, n2 = place_nodes(s), place_nodes(s)
        assert np.array_equal(n1.gu, n2.gu)
        assert np.array_equal(n1.geo_gs, n2.geo_gs)

    def test_many_gus_mean_near_center(self):
        s = with_overrides(Scenario(), n_gu=10_000)
        nodes = place_nodes(s)
        center, east, north = _scene_frame(s)
        offsets = nodes.gu - center
        mean_e = float(np.mean(offsets @ east))
        mean_n = float(np.mean(offsets @ north))
        assert abs(mean_e) < 0.01 * s.area_side_m
        assert abs(mean_n) < 0.01 * s.area_side_m


@pytest.mark.slow
def test_visibility_precondition_paper_constellations():
    """Every TBS sees >= N_r satellites in >= 99% of sampled slots for the
    four studied shell sizes."""
    for spp in (40, 55, 75, 100):
        s = with_overrides(Scenario(), constellation=ConstellationConfig(
            n_planes=36, sats_per_plane=spp))
        nodes = place_nodes(s)
        const = generate_constellation(s)
        rep = visibility_report(s, const, nodes.tbs, slot_stride=8)
        assert not rep["violating_tbs"], rep
        assert rep["fraction_ok"].min() >= 0.99
