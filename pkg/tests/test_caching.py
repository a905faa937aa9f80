import numpy as np
import pytest

from istn_sim.caching import (
    classify_gus,
    draw_requests,
    hit_matrix,
    place_and_request,
    place_caches,
    zipf_popularity,
)
from istn_sim.validate import toy_cache, toy_scenario


class TestZipf:
    def test_uniform_when_omega_zero(self):
        assert np.allclose(zipf_popularity(2, 0.0), [0.5, 0.5])

    def test_three_files_omega_half(self):
        # direct-summation oracle: Omega = 1 + 2^-0.5 + 3^-0.5
        omega_sum = 1.0 + 2.0 ** -0.5 + 3.0 ** -0.5
        expected = np.array([1.0, 2.0 ** -0.5, 3.0 ** -0.5]) / omega_sum
        assert np.allclose(zipf_popularity(3, 0.5), expected, atol=1e-12)
        assert zipf_popularity(3, 0.5) == pytest.approx(
            [0.4377, 0.3095, 0.2527], abs=1e-4)

    def test_normalization_and_monotonicity(self, rng):
        for _ in range(20):
            f = int(rng.integers(1, 500))
            omega = float(rng.uniform(0.0, 3.0))
            q = zipf_popularity(f, omega)
            assert abs(q.sum() - 1.0) < 1e-12
            assert (np.diff(q) <= 1e-15).all()


class TestPlacement:
    def test_full_cache_all_hits(self):
        s = toy_scenario(m=2, j=6)
        cache = toy_cache(s, all_local=True)
        assert cache.g.all()

    def test_empty_cache_all_backhaul(self):
        s = toy_scenario(m=2, j=6)
        cache = toy_cache(s, all_backhaul=True)
        assert not cache.g.any()

    def test_placement_sizes_and_determinism(self):
        s = toy_scenario(m=3, j=4)
        p1, p2 = place_caches(s), place_caches(s)
        assert p1.shape == (3, s.caching.cache_capacity)
        assert np.array_equal(p1, p2)
        for row in p1:
            assert len(set(row.tolist())) == s.caching.cache_capacity

    def test_requests_redrawn_per_slot(self):
        s = toy_scenario(m=2, j=50)
        r0, r1 = draw_requests(s, 0), draw_requests(s, 1)
        assert not np.array_equal(r0, r1)
        static = toy_scenario(m=2, j=50, static_requests=True)
        assert np.array_equal(draw_requests(static, 0), draw_requests(static, 5))

    def test_random_scheme_hit_probability(self):
        # Under random placement each file is cached w.p. capacity/F,
        # independent of the request; Monte-Carlo oracle at 10^5 draws.
        s = toy_scenario(m=1, j=1)   # F=50, capacity=40 from defaults
        rng = np.random.default_rng(3)
        trials = 100_000
        q = zipf_popularity(s.caching.n_files, s.caching.zipf_omega)
        requests = rng.choice(s.caching.n_files, size=trials, p=q)
        hits = 0
        batch = np.zeros((trials,), dtype=bool)
        for i in range(0, trials, 5000):
            placement = np.stack([
                rng.choice(s.caching.n_files, size=s.caching.cache_capacity,
                           replace=False) for _ in range(5000)])
            cached = np.zeros((5000, s.caching.n_files), dtype=bool)
            cached[np.arange(5000)[:, None], placement] = True
            batch[i:i + 5000] = cached[np.arange(5000), requests[i:i + 5000]]
        assert batch.mean() == pytest.approx(0.8, abs=0.01)


class TestClassify:
    def test_full_and_empty(self):
        s = toy_scenario(m=2, j=5)
        a = np.zeros((2, 5), dtype=bool)
        a[0, :3] = True
        a[1, 3:] = True
        local, backhaul = classify_gus(toy_cache(s, all_local=True), a)
        assert len(local) == 5 and len(backhaul) == 0
        local, backhaul = classify_gus(toy_cache(s, all_backhaul=True), a)
        assert len(local) == 0 and len(backhaul) == 5

    def test_handcrafted_partition(self):
        # 2 TBSs, 3 GUs: hand enumeration of the hit matrix.
        s = toy_scenario(m=2, j=3)
        cache = toy_cache(s, all_local=True)
        g = np.array([[True, False, True],
                      [False, False, True]])
        cache = type(cache)(placement=cache.placement, requests=cache.requests,
                            g=g)
        a = np.array([[True, True, False],
                      [False, False, True]])
        local, backhaul = classify_gus(cache, a)
        assert local.tolist() == [0, 2]
        assert backhaul.tolist() == [1]

    def test_partition_exhaustive(self, rng):
        s = toy_scenario(m=3, j=20)
        cache = place_and_request(s)
        a = np.zeros((3, 20), dtype=bool)
        a[rng.integers(0, 3, size=20), np.arange(20)] = True
        local, backhaul = classify_gus(cache, a)
        assert sorted(local.tolist() + backhaul.tolist()) == list(range(20))

    def test_missing_association_rejected(self):
        s = toy_scenario(m=2, j=3)
        cache = toy_cache(s, all_local=True)
        a = np.zeros((2, 3), dtype=bool)
        a[0, 0] = True
        a[1, 1] = True
        with pytest.raises(ValueError, match="GU 2"):
            classify_gus(cache, a)

    def test_hit_matrix_definition(self):
        s = toy_scenario(m=2, j=4)
        placement = np.array([[0, 1], [2, 3]])
        requests = np.array([0, 2, 3, 1])
        from istn_sim.scenario import with_overrides
        from dataclasses import replace
        s2 = with_overrides(s, caching=replace(s.caching, n_files=4,
                                               cache_capacity=2))
        g = hit_matrix(s2, placement, requests)
        assert g.tolist() == [[True, False, False, True],
                              [False, True, True, False]]
