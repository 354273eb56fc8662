"""Candidate viewpoints from frontier PCA, and their coverage utility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraModel, Pose, wrap_angle
from ..voxels import VoxelMarch, segment_cells
from .grid import FREE, OCCUPIED, UNKNOWN, FrontierCluster, OccupancyGrid


@dataclass
class ExplorationConfig:
    v_max: float = 1.0
    yaw_max: float = 1.0
    sensor_max_range: float = 5.0
    min_cluster_size: int = 5
    viewpoint_standoff: float = 1.0
    capture_rate: float = 2.0
    max_viewpoints: int = 10
    max_cluster_spread: float = 0.5
    max_rounds: int = 200

    def __post_init__(self):
        if self.v_max <= 0 or self.yaw_max <= 0:
            raise ValueError("v_max and yaw_max must be positive")
        if self.sensor_max_range <= 0 or self.capture_rate <= 0:
            raise ValueError("sensor_max_range and capture_rate must be positive")
        if self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be >= 1")


@dataclass
class Viewpoint:
    position: np.ndarray
    yaw: float
    utility: float = 0.0
    source_cluster: int = -1

    @property
    def pose(self) -> Pose:
        return Pose.from_yaw(self.position, self.yaw)


def facing_yaw(position, target) -> float:
    d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    return wrap_angle(np.arctan2(d[1], d[0]))


# a level camera cannot look along a near-vertical normal
_STEEP = np.cos(np.deg2rad(45.0))


def candidate_directions(cluster: FrontierCluster) -> np.ndarray:
    n = cluster.normal
    if abs(n[2]) <= _STEEP:
        return np.array([n, -n])
    dirs = []
    for axis in cluster.principal_axes[:2]:
        h = np.array([axis[0], axis[1], 0.0])
        if np.linalg.norm(h) > 1e-9:
            h /= np.linalg.norm(h)
            dirs += [h, -h]
    return np.array(dirs).reshape(-1, 3)


def generate_viewpoints(cluster: FrontierCluster, grid: OccupancyGrid, cfg: ExplorationConfig) -> list[Viewpoint]:
    """Stand off from the cluster centroid along its plane normal.

    Only candidates in known-free cells with no occupied cell between them
    and the centroid survive; each faces the centroid.  For horizontal
    patches, which a level camera cannot face, the horizontal principal
    directions are used instead.
    """
    out = []
    c = cluster.centroid
    for d in candidate_directions(cluster):
        p = c + cfg.viewpoint_standoff * d
        if not grid.is_free(p):
            continue
        cells = segment_cells(p, c, grid.dims, grid.voxel_size, grid.origin)
        if np.any(grid.states[tuple(cells.T)] == OCCUPIED):
            continue
        out.append(Viewpoint(p, facing_yaw(p, c), 0.0, cluster.cluster_id))
    return out


def ring_viewpoints(cluster: FrontierCluster, grid: OccupancyGrid, cfg: ExplorationConfig,
                    n_angles: int = 12) -> list[Viewpoint]:
    """Fallback candidates on horizontal rings around the centroid, in known-free cells."""
    out = []
    c = cluster.centroid
    for scale in (0.5, 1.0, 1.5):
        r = scale * cfg.viewpoint_standoff
        for a in np.arange(n_angles) * 2 * np.pi / n_angles:
            p = c + r * np.array([np.cos(a), np.sin(a), 0.0])
            if grid.is_free(p):
                out.append(Viewpoint(p, facing_yaw(p, c), 0.0, cluster.cluster_id))
    return out


def frustum_mask(points, pose: Pose, cam: CameraModel, max_range: float) -> np.ndarray:
    pc = (np.asarray(points, dtype=float) - pose.translation) @ pose.rotation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    rng = np.linalg.norm(pc, axis=1)
    return (z > 0) & (u >= -0.5) & (u <= cam.width - 0.5) & (v >= -0.5) & (v <= cam.height - 0.5) & (rng <= max_range)


def visible_cells(grid: OccupancyGrid, position, cells) -> np.ndarray:
    """Whether each target cell centre is reached from ``position`` without crossing an occupied cell."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    visible = np.zeros(len(cells), dtype=bool)
    if len(cells) == 0:
        return visible
    targets = grid.center(cells)
    d = targets - position
    dist = np.linalg.norm(d, axis=1)
    here = dist == 0
    visible[here] = True
    todo = np.flatnonzero(~here)
    march = VoxelMarch(np.broadcast_to(position, (len(todo), 3)), d[todo] / dist[todo, None], grid.dims,
                       grid.voxel_size, grid.origin, t_max=dist[todo])
    goal = cells[todo]
    while march.active:
        at_goal = np.all(march.cell == goal[march.idx], axis=1)
        visible[todo[march.idx[at_goal]]] = True
        blocked = grid.states[tuple(march.cell.T)] == OCCUPIED
        march.retire(at_goal | blocked)
        march.advance()
    return visible


def score_viewpoint(grid: OccupancyGrid, vp: Viewpoint, cfg: ExplorationConfig, cam: CameraModel,
                    frontier_cells=None) -> float:
    """Unknown cells seen through free/unknown space plus source-cluster frontier cells in the frustum."""
    pose = vp.pose
    r = cfg.sensor_max_range
    lo = np.maximum(grid.cell_of(vp.position - r), 0)
    hi = np.minimum(grid.cell_of(vp.position + r) + 1, grid.dims)
    box = grid.states[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    unknown = np.argwhere(box == UNKNOWN) + lo
    in_view = unknown[frustum_mask(grid.center(unknown), pose, cam, r)]
    utility = int(visible_cells(grid, vp.position, in_view).sum())
    if frontier_cells is not None and len(frontier_cells):
        fc = np.asarray(frontier_cells).reshape(-1, 3)
        utility += int(frustum_mask(grid.center(fc), pose, cam, r).sum())
    return float(utility)


def is_viewpoint_valid(grid: OccupancyGrid, vp: Viewpoint) -> bool:
    return grid.state_at(vp.position) == FREE
