"""Autonomous exploration of a synthetic voxel world, keyframe/pair selection, pointmap alignment and splat rendering."""

from .config import ConfigError, PipelineConfig, load_config, parse_config
from .geometry import CameraModel, Pose, backproject, project
from .pipeline import RunReport, StageError, eval_table1, run_pipeline
from .simworld import GroundTruthFrame, VoxelScene, WorldSpec, build_world, raycast_rgbd

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "Pose", "project", "backproject", "WorldSpec", "VoxelScene", "GroundTruthFrame",
    "build_world", "raycast_rgbd", "PipelineConfig", "ConfigError", "load_config", "parse_config",
    "RunReport", "StageError", "run_pipeline", "eval_table1",
]
