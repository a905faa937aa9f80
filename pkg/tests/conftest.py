import numpy as np
import pytest

from istn_sim.validate import toy_cache, toy_channels, toy_scenario


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_world():
    """Scenario + hand-built channels + cache for a 2x4x2 / 3x2 instance."""
    scenario = toy_scenario(m=2, j=4, c=2, n=3, k=2, seed=7)
    rng = np.random.default_rng(7)
    channels = toy_channels(scenario, rng)
    cache = toy_cache(scenario, rng)
    return scenario, channels, cache
