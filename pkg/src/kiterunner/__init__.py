"""Language-guided outdoor navigation: landmark routing over a topology graph,
diffusion-sampled local trajectories and traversability-scored selection,
evaluated in a deterministic simulator."""
from __future__ import annotations

from .diffusion_lp import (CandidateSet, ConditioningContext, DiffusionLocalPlanner, SchedulerParams,
                           denoise_step, generate_candidates, make_schedule)
from .errors import KiteRunnerError
from .geo_raster import FeatureRaster, GeoRef, ProbabilityRaster, sample_prob
from .global_planner import (FocalLossParams, TraversabilityClassifier, WaypointWeightParams,
                             focal_loss, predict_map, score_path, select_best)
from .metrics_stats import (MetricSummary, build_report, execution_time, intervention_count,
                            path_efficiency, wilcoxon_signed_rank)
from .sim_env import Mode, PolicyConfig, TrialResult, World, generate_world, run_trial
from .topo_graph import TopologyGraph, TopoEdge, TopoNode, localize, shortest_distances
from .vlp import extract_landmarks_rulebased, plan_route, similarity_matrix

__version__ = "0.1.0"

__all__ = [
    "CandidateSet", "ConditioningContext", "DiffusionLocalPlanner", "FeatureRaster",
    "FocalLossParams", "GeoRef", "KiteRunnerError", "MetricSummary", "Mode", "PolicyConfig",
    "ProbabilityRaster", "SchedulerParams", "TopoEdge", "TopoNode", "TopologyGraph",
    "TraversabilityClassifier", "TrialResult", "WaypointWeightParams", "World", "build_report",
    "denoise_step", "execution_time", "extract_landmarks_rulebased", "focal_loss",
    "generate_candidates", "generate_world", "intervention_count", "localize", "make_schedule",
    "path_efficiency", "plan_route", "predict_map", "run_trial", "sample_prob", "score_path",
    "select_best", "shortest_distances", "similarity_matrix", "wilcoxon_signed_rank",
]
