"""Configuration-space performance models and SLO search."""
from .offline import Grid, determine_q_min, interpolate, offline_model, pow2_grid
from .oracles import (AffineOracle, QueueDepthProfile, RandomMonotoneOracle, ReplayOracle, SimMeasuredOracle,
                      SyntheticOracle, measure_sim)
from .search import SearchResult, Verdict, scan_first, search, search_reference
from .tree import ConfigTree, PerfModel, PerfPoint, Source, build_tree, count_configs, enumerate_configs

__all__ = ["Grid", "determine_q_min", "interpolate", "offline_model", "pow2_grid", "AffineOracle",
           "QueueDepthProfile", "RandomMonotoneOracle", "ReplayOracle", "SimMeasuredOracle", "SyntheticOracle",
           "measure_sim", "SearchResult", "Verdict", "scan_first", "search", "search_reference", "ConfigTree",
           "PerfModel", "PerfPoint", "Source", "build_tree", "count_configs", "enumerate_configs"]
