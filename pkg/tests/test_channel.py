import math

import numpy as np
import pytest

from istn_sim.channel import (
    build_channel_state,
    geo_direct_gains,
    geo_gs_interference_gains,
    mean_terrestrial_gains,
    offaxis_gain_db,
    peak_rx_gain_db,
    resolve_interference_threshold,
    sample_satellite_gains,
    sample_terrestrial_gains,
    _rician_power_fades,
)
from istn_sim.scenario import (
    ConstellationConfig,
    NodePositions,
    Scenario,
    elevation_angle,
    generate_constellation,
    place_nodes,
    with_overrides,
)
from istn_sim.units import EARTH_RADIUS_M, SPEED_OF_LIGHT_M_S, friis_gain


def friis_db_oracle(d, f):
    """Independent Friis evaluation: (4 pi d f / c)^-2 in dB."""
    return -20.0 * math.log10(4.0 * math.pi * d * f / SPEED_OF_LIGHT_M_S)


class TestPathLoss:
    def test_friis_1km_cband(self):
        db = 10.0 * math.log10(friis_gain(1000.0, 4.9e9))
        assert db == pytest.approx(friis_db_oracle(1000.0, 4.9e9), abs=1e-9)
        assert db == pytest.approx(-106.25, abs=0.01)

    def test_friis_550km_kaband(self):
        db = 10.0 * math.log10(friis_gain(550e3, 30e9))
        assert db == pytest.approx(friis_db_oracle(550e3, 30e9), abs=1e-9)
        assert db == pytest.approx(-176.8, abs=0.1)

    def test_mean_gain_monotone_in_distance(self):
        s = with_overrides(Scenario(), n_tbs=1, n_gu=5)
        tbs = np.array([[EARTH_RADIUS_M, 0.0, 0.0]])
        gu = np.stack([[EARTH_RADIUS_M, d, 0.0] for d in (10, 100, 500, 1000, 2000)])
        nodes = NodePositions(tbs=tbs, gu=gu, geo_gs=gu[:1])
        mean = mean_terrestrial_gains(s, nodes)[0]
        assert (np.diff(mean) < 0).all()

    def test_equal_distance_equal_mean(self):
        s = with_overrides(Scenario(), n_tbs=1, n_gu=2)
        tbs = np.array([[EARTH_RADIUS_M, 0.0, 0.0]])
        gu = np.array([[EARTH_RADIUS_M, 400.0, 0.0],
                       [EARTH_RADIUS_M, 0.0, 400.0]])
        nodes = NodePositions(tbs=tbs, gu=gu, geo_gs=gu[:1])
        mean = mean_terrestrial_gains(s, nodes)[0]
        assert mean[0] == pytest.approx(mean[1], rel=1e-9)


class TestFading:
    def test_rayleigh_unit_mean_power(self):
        # 10^5 fades at one fixed distance; E|g|^2 = 1 within 1%.
        s = with_overrides(Scenario(), n_tbs=1, n_gu=1,
                           n_sc_terrestrial=100_000)
        tbs = np.array([[EARTH_RADIUS_M, 0.0, 0.0]])
        gu = np.array([[EARTH_RADIUS_M, 700.0, 0.0]])
        nodes = NodePositions(tbs=tbs, gu=gu, geo_gs=gu)
        h = sample_terrestrial_gains(s, nodes, t=0)
        mean_expected = mean_terrestrial_gains(s, nodes)[0, 0]
        assert h.mean() == pytest.approx(mean_expected, rel=0.01)

    def test_rician_unit_mean_and_los_limit(self, rng):
        fades = _rician_power_fades(rng, 10.0, 200_000)
        assert fades.mean() == pytest.approx(1.0, rel=0.01)
        assert np.all(_rician_power_fades(rng, math.inf, 100) == 1.0)

    def test_deterministic_per_seed_and_slot(self):
        s = with_overrides(Scenario(), n_tbs=2, n_gu=3, n_sc_terrestrial=4)
        nodes = place_nodes(s)
        h1 = sample_terrestrial_gains(s, nodes, t=5)
        h2 = sample_terrestrial_gains(s, nodes, t=5)
        h3 = sample_terrestrial_gains(s, nodes, t=6)
        assert np.array_equal(h1, h2)
        assert not np.array_equal(h1, h3)


class TestSatelliteGains:
    def test_visibility_mask_and_nan(self):
        s = with_overrides(Scenario(), n_tbs=2, constellation=ConstellationConfig(
            n_planes=8, sats_per_plane=8))
        nodes = place_nodes(s)
        const = generate_constellation(s)
        h, visible = sample_satellite_gains(s, const, t=0, nodes=nodes)
        el = elevation_angle(const.positions_at(0)[:, None, :],
                             nodes.tbs[None, :, :])
        assert np.array_equal(visible, el >= s.elevation_min_deg)
        assert np.isnan(h[~visible]).all()
        assert np.isfinite(h[visible]).all()
        assert (h[visible] > 0).all()

    def test_pure_los_matches_mean(self):
        from dataclasses import replace
        s = Scenario()
        s = with_overrides(s, channel=replace(s.channel, k_rice_db=math.inf))
        nodes = place_nodes(s)
        const = generate_constellation(s)
        h, visible = sample_satellite_gains(s, const, t=0, nodes=nodes)
        # all subchannels identical in the LoS limit
        assert np.allclose(h[visible][:, 0:1], h[visible], equal_nan=True)


class TestGeoGsPath:
    def make_stub(self, gs, geo, sats):
        class Stub:
            pass
        stub = Stub()
        stub.gs_positions = np.asarray(gs, dtype=float)
        stub.geo_position = np.asarray(geo, dtype=float)
        stub._pos = np.asarray(sats, dtype=float)
        stub.positions_at = lambda t: stub._pos
        stub.n_sats = len(sats)
        return stub

    def test_boresight_gets_peak_gain(self):
        s = Scenario()
        gs = np.array([[EARTH_RADIUS_M, 0.0, 0.0]])
        geo = np.array([EARTH_RADIUS_M + 35786e3, 0.0, 0.0])
        sat = np.array([[EARTH_RADIUS_M + 600e3, 0.0, 0.0]])   # collinear
        stub = self.make_stub(gs, geo, sat)
        h = geo_gs_interference_gains(s, stub, 0)[0, 0]
        peak = peak_rx_gain_db(s)
        expected = friis_gain(600e3, s.bands.f_ka_hz) * 10 ** (
            (s.powers.g_t_db + peak) / 10.0)
        assert h == pytest.approx(expected, rel=1e-9)
        assert peak == pytest.approx(18.5 + 10 * math.log10(290.0), abs=1e-9)

    def test_offaxis_mask_values(self):
        peak = 43.12
        # 32 - 25 log10(48) = -10.04 -> clamped at the -10 dBi floor
        assert offaxis_gain_db(48.0, peak) == pytest.approx(-10.0)
        assert offaxis_gain_db(0.0, peak) == pytest.approx(peak)
        assert offaxis_gain_db(1.0, peak) == pytest.approx(32.0)
        mid = float(offaxis_gain_db(5.0, peak))
        assert mid == pytest.approx(32.0 - 25.0 * math.log10(5.0), abs=1e-9)

    def test_doubling_range_costs_6db(self):
        s = Scenario()
        gs = np.array([[EARTH_RADIUS_M, 0.0, 0.0]])
        geo = np.array([EARTH_RADIUS_M + 35786e3, 0.0, 0.0])
        up = np.array([1.0, 0.0, 0.0])
        side = np.array([0.0, 1.0, 0.0])
        direction = np.cos(np.deg2rad(20)) * up + np.sin(np.deg2rad(20)) * side
        sats = np.stack([gs[0] + 600e3 * direction, gs[0] + 1200e3 * direction])
        stub = self.make_stub(gs, geo, sats)
        h = geo_gs_interference_gains(s, stub, 0)[:, 0]
        assert 10 * math.log10(h[0] / h[1]) == pytest.approx(6.02, abs=0.01)

    def test_collinearity_dominates_at_equal_range(self):
        s = Scenario()
        gs = np.array([[EARTH_RADIUS_M, 0.0, 0.0]])
        geo = np.array([EARTH_RADIUS_M + 35786e3, 0.0, 0.0])
        up = np.array([1.0, 0.0, 0.0])
        side = np.array([0.0, 1.0, 0.0])
        sats = []
        for phi_deg in (2.0, 5.0, 15.0, 40.0):
            d = np.cos(np.deg2rad(phi_deg)) * up + np.sin(np.deg2rad(phi_deg)) * side
            sats.append(gs[0] + 800e3 * d)
        stub = self.make_stub(gs, geo, np.stack(sats))
        h = geo_gs_interference_gains(s, stub, 0)[:, 0]
        assert (np.diff(h) < 0).all()

    def test_default_interference_threshold_is_cinr_zero(self):
        s = Scenario()
        nodes = place_nodes(s)
        const = generate_constellation(s)
        direct = geo_direct_gains(s, const)
        i_th = resolve_interference_threshold(s, direct)
        wanted = s.powers.p_geo_w * direct.min()
        # I <= I_th  <=>  wanted / (I + sigma^2) >= 1 (0 dB)
        assert wanted / (i_th + s.sigma2_ka_w) == pytest.approx(1.0, rel=1e-9)
        assert i_th > 0


def test_channel_state_shapes_and_determinism():
    s = with_overrides(Scenario(), n_tbs=2, n_gu=5, n_sc_terrestrial=3,
                       constellation=ConstellationConfig(n_planes=4,
                                                         sats_per_plane=5))
    nodes = place_nodes(s)
    const = generate_constellation(s)
    ch1 = build_channel_state(s, nodes, const, 2)
    ch2 = build_channel_state(s, nodes, const, 2)
    assert ch1.h_terr.shape == (2, 5, 3)
    assert ch1.h_sat.shape == (20, 2, s.n_sc_leo)
    assert ch1.h_geo_gs.shape == (20, s.n_geo_gs)
    assert np.array_equal(ch1.h_terr, ch2.h_terr)
    assert np.array_equal(ch1.h_sat, ch2.h_sat, equal_nan=True)
