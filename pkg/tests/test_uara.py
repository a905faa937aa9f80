import numpy as np
import pytest

from istn_sim.uara import (
    associate_gus,
    terr_blocking_pairs,
    terr_utility_full,
    theta_preference,
    uara_round,
    waterfill,
    _build_state,
    _init_phase,
)
from istn_sim.validate import toy_cache, toy_channels, toy_scenario


def waterfill_objective(p, n_eff):
    return float(np.sum(np.log2(1.0 + p / n_eff)))


class TestAssociate:
    def test_colocated_gu_takes_nearest(self):
        s = toy_scenario(m=3, j=1)
        channels = toy_channels(s)
        # make TBS 2 dominate by construction
        channels.mean_terr[:, 0] = [1e-15, 1e-15, 1e-12]
        a = associate_gus(channels, s)
        assert a[2, 0] and a.sum() == 1

    def test_tie_breaks_to_lowest_index(self):
        s = toy_scenario(m=2, j=1)
        channels = toy_channels(s)
        channels.mean_terr[:, 0] = [3e-13, 3e-13]
        a = associate_gus(channels, s)
        assert a[0, 0] and not a[1, 0]

    def test_matches_brute_force_argmax(self, rng):
        s = toy_scenario(m=4, j=5)
        channels = toy_channels(s, rng)
        a = associate_gus(channels, s)
        for j in range(5):
            best = max(range(4), key=lambda m: (channels.mean_terr[m, j], -m))
            assert a[best, j]


class TestThetaPreference:
    def test_rho_zero_is_interference_avoidance(self):
        assert theta_preference(123.0, 4.0, 0.0) == pytest.approx(0.25)
        assert theta_preference(9.0, 4.0, 0.0) == pytest.approx(0.25)

    def test_equal_gains_rho_one(self):
        assert theta_preference(2e-10, 2e-10, 1.0) == pytest.approx(1.0)

    def test_ranking_matches_hand_computation(self):
        own = np.array([4e-10, 1e-10, 9e-10])
        cross = np.array([2e-10, 1e-11, 3e-9])
        theta = theta_preference(own, cross, 1.0)
        # hand: 2.0, 10.0, 0.3 -> order candidate 1 > 0 > 2
        assert np.argsort(-theta).tolist() == [1, 0, 2]


class TestWaterfill:
    def test_single_channel_takes_all(self):
        assert waterfill(np.array([0.3]), 5.0) == pytest.approx([5.0])

    def test_equal_channels_split_evenly(self):
        p = waterfill(np.array([1.0, 1.0]), 4.0)
        assert p == pytest.approx([2.0, 2.0])

    def test_one_four_example(self):
        # mu - 1 + mu - 4 = 5  =>  mu = 5  =>  p = (4, 1)
        p = waterfill(np.array([1.0, 4.0]), 5.0)
        assert p == pytest.approx([4.0, 1.0], rel=1e-8)

    def test_weak_channel_shut_off(self):
        p = waterfill(np.array([1.0, 50.0]), 2.0)
        assert p[1] == 0.0
        assert p[0] == pytest.approx(2.0)

    def test_kkt_and_grid_oracle(self, rng):
        for _ in range(200):
            n_sc = int(rng.integers(1, 9))
            n_eff = rng.lognormal(0.0, 1.2, size=n_sc)
            total = float(rng.lognormal(0.5, 1.0))
            p = waterfill(n_eff, total)
            assert abs(p.sum() - total) <= 1e-9 * total + 1e-15
            active = p > 0
            levels = p[active] + n_eff[active]
            if active.any():
                assert (levels.max() - levels.min()) <= 1e-6 * levels.max()
                mu = levels.mean()
                assert (n_eff[~active] >= mu * (1 - 1e-6)).all()
            # random-search oracle over the simplex
            draws = rng.dirichlet(np.ones(n_sc), size=1000) * total
            best = np.max(np.sum(np.log2(1.0 + draws / n_eff), axis=1))
            assert waterfill_objective(p, n_eff) >= best - 1e-6


class TestMatching:
    def test_single_gu_gets_full_power(self):
        s = toy_scenario(m=1, j=1, c=1, n=1, k=1)
        channels = toy_channels(s)
        cache = toy_cache(s, all_local=True)
        matching, p = uara_round(channels, s, np.zeros(1), cache)
        assert matching.pairs == ((0, 0, 0),)
        assert p[0, 0, 0] == pytest.approx(s.powers.p_tbs_total_w)

    def test_negative_gain_backhaul_rejected(self):
        s = toy_scenario(m=1, j=1, c=1, n=1, k=1)
        channels = toy_channels(s)
        cache = toy_cache(s, all_backhaul=True)
        lam_huge = np.array([1e6])
        matching, _p = uara_round(channels, s, lam_huge, cache)
        assert matching.pairs == ()
        assert matching.unmatched == (0,)
        # same GU admitted when multipliers are zero
        matching0, _ = uara_round(channels, s, np.zeros(1), cache)
        assert matching0.pairs == ((0, 0, 0),)

    def test_counters_within_bounds(self, rng):
        for seed in range(5):
            s = toy_scenario(m=2, j=6, c=2, n=2, k=2, seed=seed)
            channels = toy_channels(s, np.random.default_rng(seed))
            cache = toy_cache(s, np.random.default_rng(seed))
            matching, _ = uara_round(channels, s, np.zeros(2), cache)
            assert matching.proposal_iterations <= s.n_gu

    def test_no_blocking_pairs_small_instances(self):
        for seed in range(8):
            s = toy_scenario(m=2, j=5, c=2, n=2, k=2, seed=seed)
            rng = np.random.default_rng(seed)
            channels = toy_channels(s, rng)
            cache = toy_cache(s, rng)
            lam = np.abs(rng.normal(0, 2, size=2))
            matching, _ = uara_round(channels, s, lam, cache)
            blocking = terr_blocking_pairs(matching, channels, s, lam, cache)
            assert not blocking, blocking

    def _pairs_after(self, state, changes):
        occ = [row[:] for row in state.occ]
        for (m, c), j_new in changes.items():
            occ[m][c] = -1
        for (m, c), j_new in changes.items():
            if j_new >= 0:
                occ[m][c] = j_new
        pairs = set()
        for m in range(state.n_tbs):
            for c in range(state.n_sc):
                if occ[m][c] >= 0:
                    pairs.add((int(occ[m][c]), m, c))
        return pairs

    def test_move_deltas_match_full_recompute(self, rng):
        """Every generic move delta agrees with a from-scratch utility sum."""
        s = toy_scenario(m=2, j=6, c=3, n=2, k=2, seed=3)
        channels = toy_channels(s, rng)
        cache = toy_cache(s, rng)
        lam = np.array([0.5, 1.5])
        a = associate_gus(channels, s)
        state = _build_state(channels, s, lam, cache, a)
        _init_phase(state)
        base_val = terr_utility_full(set(state.pairs()), channels, s, lam,
                                     cache, a)
        n_checked = 0
        for m in range(s.n_tbs):
            for c in range(s.n_sc_terrestrial):
                for changes, _tag in state.moves_for_unit(m, c):
                    full = terr_utility_full(self._pairs_after(state, changes),
                                             channels, s, lam, cache, a)
                    delta = state._delta_for(changes)
                    assert delta == pytest.approx(full - base_val, rel=1e-9,
                                                  abs=1e-3)
                    n_checked += 1
        assert n_checked > 10

    def test_fast_path_matches_generic_enumeration(self, rng):
        """best_move_for_unit returns the same optimum as brute enumeration."""
        for seed in range(4):
            s = toy_scenario(m=3, j=8, c=3, n=2, k=2, seed=seed)
            r = np.random.default_rng(seed)
            channels = toy_channels(s, r)
            cache = toy_cache(s, r)
            lam = np.abs(r.normal(0, 1, size=3))
            a = associate_gus(channels, s)
            state = _build_state(channels, s, lam, cache, a)
            _init_phase(state)
            for m in range(s.n_tbs):
                for c in range(s.n_sc_terrestrial):
                    fast_delta, _ = state.best_move_for_unit(m, c)
                    generic = [state._delta_for(ch)
                               for ch, _t in state.moves_for_unit(m, c)]
                    if fast_delta is None:
                        assert not generic
                        continue
                    assert fast_delta == pytest.approx(max(generic), rel=1e-9,
                                                       abs=1e-6)


class TestEsParity:
    def test_small_instance_close_to_exhaustive(self):
        from istn_sim.baselines import es_search

        for seed in (0, 1, 2):
            s = toy_scenario(m=2, j=4, c=2, n=2, k=2, seed=seed)
            rng = np.random.default_rng(seed)
            channels = toy_channels(s, rng)
            cache = toy_cache(s, all_local=True)
            lam = np.zeros(2)
            matching, p = uara_round(channels, s, lam, cache)
            a = matching.association
            uara_value = _achieved_rate(matching.pairs, p, channels, s, cache, a)
            _, es_value, _ = es_search(channels, s, cache)
            assert uara_value >= 0.99 * es_value


def _achieved_rate(pairs, p, channels, scenario, cache, association):
    from istn_sim.ciim import capped_link_rates

    x = np.zeros((scenario.n_tbs, scenario.n_gu, scenario.n_sc_terrestrial),
                 dtype=bool)
    for j, m, c in pairs:
        x[m, j, c] = True
    return float(capped_link_rates(x, p, channels, scenario, cache,
                                   association).sum())
