"""Occupancy grid, depth integration and frontier extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..geometry import CameraModel
from ..voxels import VoxelMarch, cell_centers, world_to_cell

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

_SIX = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


@dataclass
class OccupancyGrid:
    dims: tuple
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    states: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.states is None:
            self.states = np.zeros(self.dims, dtype=np.uint8)
        if self.states.shape != self.dims:
            raise ValueError("states shape does not match dims")

    @classmethod
    def like(cls, scene) -> "OccupancyGrid":
        """Empty grid covering a :class:`~exploregs.simworld.VoxelScene` cell for cell."""
        return cls(scene.dims, scene.voxel_size)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.dims, self.voxel_size, self.origin.copy(), self.states.copy())

    def cell_of(self, point) -> np.ndarray:
        return world_to_cell(point, self.voxel_size, self.origin)

    def center(self, cells) -> np.ndarray:
        return cell_centers(cells, self.voxel_size, self.origin)

    def contains(self, point) -> bool:
        c = self.cell_of(point)
        return bool(np.all(c >= 0) and np.all(c < self.dims))

    def state_at(self, point) -> int:
        if not self.contains(point):
            return OCCUPIED
        return int(self.states[tuple(self.cell_of(point))])

    def is_free(self, point) -> bool:
        return self.state_at(point) == FREE

    def count(self, state: int) -> int:
        return int(np.count_nonzero(self.states == state))


class GridBoundsError(ValueError):
    pass


def integrate_depth(grid: OccupancyGrid, frame, cam: CameraModel, sensor_max_range: float) -> OccupancyGrid:
    """Ray-march one depth frame into a copy of ``grid``.

    Depth is Euclidean range along each pixel ray.  Cells crossed before the
    hit become free and the cell containing the hit becomes occupied; pixels
    with no return (0) or a return beyond ``sensor_max_range`` free cells up to
    that range.  An occupied mark wins over free marks, so re-integrating a
    frame is idempotent.
    """
    pose = frame.pose
    if not grid.contains(pose.translation):
        raise GridBoundsError("frame pose outside the grid")
    d_cam = cam.ray_directions().reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ pose.rotation.T
    depth = np.asarray(frame.depth, dtype=float).reshape(-1)
    has_hit = (depth > 0) & (depth <= sensor_max_range)
    limit = np.where(has_hit, depth, sensor_max_range)
    tol = 1e-6 * grid.voxel_size

    march = VoxelMarch(np.broadcast_to(pose.translation, dirs.shape), dirs, grid.dims, grid.voxel_size,
                       grid.origin, t_max=limit + tol)
    free_cells, occ_cells = [], []
    while march.active:
        t_exit = march.t_exit
        ends_here = has_hit[march.idx] & (t_exit > depth[march.idx] + tol)
        occ_cells.append(march.cell[ends_here])
        free_cells.append(march.cell[~ends_here])
        march.retire(ends_here)
        march.advance()

    out = grid.copy()
    if free_cells:
        free = np.concatenate(free_cells)
        sel = tuple(free.T)
        out.states[sel] = np.where(out.states[sel] == OCCUPIED, OCCUPIED, FREE)
    if occ_cells:
        occ = np.concatenate(occ_cells)
        out.states[tuple(occ.T)] = OCCUPIED
    return out


def unknown_neighbor_mask(states: np.ndarray) -> np.ndarray:
    """True where at least one 6-neighbour (inside the grid) is unknown."""
    unk = np.pad(states == UNKNOWN, 1, constant_values=False)
    out = np.zeros(states.shape, dtype=bool)
    nx, ny, nz = states.shape
    for dx, dy, dz in _SIX:
        out |= unk[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz]
    return out


def detect_frontiers(grid: OccupancyGrid) -> np.ndarray:
    """Free cells with an unknown 6-neighbour, as an (M, 3) index array in C order."""
    mask = (grid.states == FREE) & unknown_neighbor_mask(grid.states)
    return np.argwhere(mask)


@dataclass
class FrontierCluster:
    cluster_id: int
    cells: np.ndarray
    centroid: np.ndarray
    principal_axes: np.ndarray  # rows, sorted by descending eigenvalue
    eigenvalues: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return self.principal_axes[2]

    def __len__(self):
        return len(self.cells)


def pca(points: np.ndarray):
    centroid = points.mean(axis=0)
    X = points - centroid
    cov = X.T @ X / len(points)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    return centroid, V[:, order].T, w


def _make_cluster(cid, cells, grid):
    centroid, axes, w = pca(grid.center(cells))
    return FrontierCluster(cid, cells, centroid, axes, w)


def cluster_frontiers(cells, min_cluster_size: int, grid: OccupancyGrid, max_spread: float | None = None
                      ) -> list[FrontierCluster]:
    """26-connected components of frontier cells with per-cluster PCA.

    Components smaller than ``min_cluster_size`` are dropped.  With
    ``max_spread`` set, a cluster whose largest principal variance (m^2)
    exceeds it is split in two across its centroid along the major axis,
    recursively.
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if len(cells) == 0:
        return []
    mask = np.zeros(grid.dims, dtype=bool)
    mask[tuple(cells.T)] = True
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    members = np.argwhere(mask)
    lab = labels[tuple(members.T)]
    out = []
    for k in range(1, n + 1):
        comp = members[lab == k]
        if len(comp) < min_cluster_size:
            continue
        pending = [comp]
        while pending:
            part = pending.pop(0)
            cl = _make_cluster(len(out), part, grid)
            if max_spread is not None and cl.eigenvalues[0] > max_spread and len(part) >= 2 * min_cluster_size:
                side = (grid.center(part) - cl.centroid) @ cl.principal_axes[0] >= 0
                halves = [part[~side], part[side]]
                if all(len(h) >= min_cluster_size for h in halves):
                    pending[:0] = halves
                    continue
            out.append(cl)
    return out


GRID_MAGIC = b"EGSG"


def write_grid(path, grid: OccupancyGrid):
    """``grid.bin``: magic, dims (3 x u32), voxel_size (f64), origin (3 x f64), one byte per cell (C order)."""
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<3I", *grid.dims))
        f.write(struct.pack("<4d", grid.voxel_size, *grid.origin))
        f.write(np.ascontiguousarray(grid.states, dtype=np.uint8).tobytes())


def read_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        if f.read(4) != GRID_MAGIC:
            raise ValueError("not a grid file")
        dims = struct.unpack("<3I", f.read(12))
        vs, ox, oy, oz = struct.unpack("<4d", f.read(32))
        states = np.frombuffer(f.read(), dtype=np.uint8).reshape(dims).copy()
    return OccupancyGrid(dims, vs, np.array([ox, oy, oz]), states)
