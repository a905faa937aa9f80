"""Downlink simulator and optimization library for integrated
satellite-terrestrial networks: coordinated interference management via
dual decomposition, satellite matching with handover, terrestrial matching
with water-filling, baselines, and an exhaustive-search oracle.
"""

from .caching import CacheState, classify_gus, place_and_request, zipf_popularity
from .channel import ChannelState, build_channel_state
from .ciim import DualState, SlotResult, ciim_slot, dual_value, run_simulation
from .imish import HandoverLog, SatMatching, imish_round, sic_preference
from .link_budget import (
    AssignmentB,
    AssignmentX,
    backhaul_capacity,
    check_constraints,
    geo_gs_interference,
    gu_rate,
    gu_sinr,
)
from .scenario import (
    ConfigError,
    ConstellationState,
    NodePositions,
    Scenario,
    build_scenario,
    elevation_angle,
    generate_constellation,
    place_nodes,
)
from .uara import TerrMatching, associate_gus, theta_preference, uara_round, waterfill

__version__ = "0.1.0"

__all__ = [
    "AssignmentB", "AssignmentX", "CacheState", "ChannelState", "ConfigError",
    "ConstellationState", "DualState", "HandoverLog", "NodePositions",
    "SatMatching", "Scenario", "SlotResult", "TerrMatching",
    "associate_gus", "backhaul_capacity", "build_channel_state",
    "build_scenario", "check_constraints", "ciim_slot", "classify_gus",
    "dual_value", "elevation_angle", "generate_constellation",
    "geo_gs_interference", "gu_rate", "gu_sinr", "imish_round",
    "place_and_request", "place_nodes", "run_simulation", "sic_preference",
    "theta_preference", "uara_round", "waterfill", "zipf_popularity",
]
