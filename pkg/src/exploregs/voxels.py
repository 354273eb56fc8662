"""Vectorised Amanatides-Woo voxel traversal shared by the renderer and the mapper."""

from __future__ import annotations

import numpy as np


class VoxelMarch:
    """Step a batch of rays through a regular grid, one cell per iteration.

    After construction, ``cell`` holds the start cell of every active ray and
    ``t_enter`` is 0.  Each :meth:`advance` moves every active ray into its next
    cell; ``t_enter`` is then the ray parameter at which that cell was entered
    and ``axis`` the axis that was crossed.  Ties between axes step the smaller
    axis index first.  Rays leaving the grid or passing ``t_max`` are dropped.

    ``dirs`` should be unit vectors when ``t`` is meant as a distance.
    """

    def __init__(self, origins, dirs, shape, voxel_size, grid_origin=(0.0, 0.0, 0.0), t_max=np.inf):
        origins = np.atleast_2d(np.asarray(origins, dtype=float))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        self.shape = np.asarray(shape, dtype=np.int64)
        self.voxel_size = float(voxel_size)
        g0 = np.asarray(grid_origin, dtype=float)
        n = len(origins)
        rel = (origins - g0) / self.voxel_size
        cell = np.floor(rel).astype(np.int64)
        step = np.sign(dirs).astype(np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            boundary = (cell + (step > 0)).astype(float)
            t_next = np.where(step != 0, (boundary - rel) * self.voxel_size / dirs, np.inf)
            t_delta = np.where(step != 0, self.voxel_size / np.abs(dirs), np.inf)
        self.t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()
        self.idx = np.arange(n)
        self.cell = cell
        self.t_enter = np.zeros(n)
        self.axis = np.full(n, -1)
        self._step = step
        self._t_next = t_next
        self._t_delta = t_delta
        self._keep(self._inside(cell))

    @property
    def active(self) -> bool:
        return self.idx.size > 0

    @property
    def t_exit(self) -> np.ndarray:
        """Ray parameter at which each active ray leaves its current cell."""
        return self._t_next.min(axis=1)

    @property
    def step_dir(self) -> np.ndarray:
        return self._step

    def _inside(self, cell):
        return np.all((cell >= 0) & (cell < self.shape), axis=1)

    def _keep(self, mask):
        self.idx = self.idx[mask]
        self.cell = self.cell[mask]
        self.t_enter = self.t_enter[mask]
        self.axis = self.axis[mask]
        self.t_max = self.t_max[mask]
        self._step = self._step[mask]
        self._t_next = self._t_next[mask]
        self._t_delta = self._t_delta[mask]

    def retire(self, mask):
        """Drop the active rays selected by ``mask``."""
        self._keep(~np.asarray(mask, dtype=bool))

    def advance(self):
        rows = np.arange(self.idx.size)
        axis = np.argmin(self._t_next, axis=1)
        t = self._t_next[rows, axis]
        self.cell = self.cell.copy()
        self.cell[rows, axis] += self._step[rows, axis]
        self._t_next[rows, axis] += self._t_delta[rows, axis]
        self.t_enter = t
        self.axis = axis
        self._keep(self._inside(self.cell) & np.isfinite(t) & (t <= self.t_max))


def cell_centers(cells, voxel_size, grid_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    return (np.asarray(cells, dtype=float) + 0.5) * voxel_size + np.asarray(grid_origin, dtype=float)


def world_to_cell(points, voxel_size, grid_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.floor((np.asarray(points, dtype=float) - grid_origin) / voxel_size).astype(np.int64)


def segment_cells(a, b, shape, voxel_size, grid_origin=(0.0, 0.0, 0.0)):
    """Cells crossed by the segment from ``a`` to ``b`` (in traversal order)."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    length = np.linalg.norm(d)
    start = world_to_cell(a, voxel_size, grid_origin)
    if length == 0:
        return start[None]
    march = VoxelMarch(a, d / length, shape, voxel_size, grid_origin, t_max=length)
    out = [march.cell[0].copy()] if march.active else []
    while march.active:
        march.advance()
        if march.active:
            out.append(march.cell[0].copy())
    return np.array(out, dtype=np.int64).reshape(-1, 3)
