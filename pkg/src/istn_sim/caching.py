"""Zipf file popularity, random cache placement, per-slot requests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import Scenario


@dataclass(frozen=True)
class CacheState:
    """Cache placement plus this slot's requests and the derived hit matrix."""

    placement: np.ndarray   # [M, capacity] cached file ids per TBS
    requests: np.ndarray    # [J] requested file id per GU
    g: np.ndarray           # [M, J] bool, TBS m caches GU j's request


def zipf_popularity(n_files: int, omega: float) -> np.ndarray:
    """Request probabilities q_f = f^-omega / Omega, non-increasing in f."""
    if n_files < 1:
        raise ValueError("n_files must be >= 1")
    if omega < 0:
        raise ValueError("omega must be >= 0")
    ranks = np.arange(1, n_files + 1, dtype=float)
    weights = ranks ** (-omega)
    return weights / weights.sum()


def place_caches(scenario: Scenario) -> np.ndarray:
    """Random-scheme placement: each TBS caches a uniform random file subset."""
    cfg = scenario.caching
    rng = np.random.default_rng([scenario.rng_seed, 2])
    return np.stack([
        np.sort(rng.choice(cfg.n_files, size=cfg.cache_capacity, replace=False))
        for _ in range(scenario.n_tbs)
    ]) if cfg.cache_capacity else np.zeros((scenario.n_tbs, 0), dtype=int)


def draw_requests(scenario: Scenario, t: int, rng=None) -> np.ndarray:
    """One file request per GU, drawn from the Zipf popularity."""
    if scenario.static_requests:
        t = 0
    if rng is None:
        rng = np.random.default_rng([scenario.rng_seed, 5, t])
    q = zipf_popularity(scenario.caching.n_files, scenario.caching.zipf_omega)
    return rng.choice(scenario.caching.n_files, size=scenario.n_gu, p=q)


def hit_matrix(scenario: Scenario, placement: np.ndarray,
               requests: np.ndarray) -> np.ndarray:
    cached = np.zeros((scenario.n_tbs, scenario.caching.n_files), dtype=bool)
    for m in range(scenario.n_tbs):
        cached[m, placement[m]] = True
    return cached[:, requests]


def place_and_request(scenario: Scenario, rng=None, t: int = 0) -> CacheState:
    """Draw placement and requests; deterministic per (seed, t).

    When an explicit rng is supplied both draws consume it in order
    (placement first), which keeps small handcrafted tests simple.
    """
    if rng is not None:
        cfg = scenario.caching
        placement = np.stack([
            np.sort(rng.choice(cfg.n_files, size=cfg.cache_capacity, replace=False))
            for _ in range(scenario.n_tbs)
        ]) if cfg.cache_capacity else np.zeros((scenario.n_tbs, 0), dtype=int)
        requests = draw_requests(scenario, t, rng=rng)
    else:
        placement = place_caches(scenario)
        requests = draw_requests(scenario, t)
    return CacheState(placement=placement, requests=requests,
                      g=hit_matrix(scenario, placement, requests))


def classify_gus(cache_state: CacheState, association: np.ndarray):
    """Split GUs into local (request cached at their TBS) and backhaul sets.

    ``association`` is the [M, J] one-hot TBS assignment; every GU must have
    exactly one serving TBS.
    """
    a = np.asarray(association)
    per_gu = a.sum(axis=0)
    bad = np.flatnonzero(per_gu != 1)
    if bad.size:
        raise ValueError(f"GU {int(bad[0])} has {int(per_gu[bad[0]])} associations")
    tbs_of = np.argmax(a, axis=0)
    j = np.arange(a.shape[1])
    local_mask = cache_state.g[tbs_of, j]
    return np.flatnonzero(local_mask), np.flatnonzero(~local_mask)
