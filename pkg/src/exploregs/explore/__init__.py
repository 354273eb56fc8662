"""Frontier-based exploration of a voxel world."""

from .grid import (FREE, OCCUPIED, UNKNOWN, FrontierCluster, OccupancyGrid, cluster_frontiers, detect_frontiers,
                   integrate_depth, read_grid, write_grid)
from .loop import ExplorationResult, Explorer, explore_loop, trajectory_poses
from .planning import (MotionGraph, TrajectoryPoint, UnreachableError, plan_path, plan_trajectory,
                       sample_trajectory)
from .tsp import build_tsp_matrix, held_karp, nearest_neighbor, path_cost, solve_atsp
from .viewpoints import ExplorationConfig, Viewpoint, generate_viewpoints, score_viewpoint

__all__ = [
    "FREE", "OCCUPIED", "UNKNOWN", "OccupancyGrid", "FrontierCluster", "integrate_depth", "detect_frontiers",
    "cluster_frontiers", "read_grid", "write_grid", "ExplorationConfig", "Viewpoint", "generate_viewpoints",
    "score_viewpoint", "build_tsp_matrix", "solve_atsp", "held_karp", "nearest_neighbor", "path_cost",
    "MotionGraph", "plan_path", "plan_trajectory", "sample_trajectory", "TrajectoryPoint", "UnreachableError",
    "Explorer", "ExplorationResult", "explore_loop", "trajectory_poses",
]
