"""Collision-free grid paths (A* + line-of-sight smoothing) and timed trajectories."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from ..geometry import wrap_angle
from ..voxels import segment_cells
from .grid import FREE, OccupancyGrid

OFFSETS = np.array([d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)])
STEP_COST = np.linalg.norm(OFFSETS, axis=1)


class UnreachableError(RuntimeError):
    pass


def _shift(mask, d):
    """``out[c] = mask[c + d]`` with False outside the grid."""
    out = np.zeros_like(mask)
    src = tuple(slice(max(k, 0), mask.shape[a] + min(k, 0)) for a, k in enumerate(d))
    dst = tuple(slice(max(-k, 0), mask.shape[a] + min(-k, 0)) for a, k in enumerate(d))
    out[dst] = mask[src]
    return out


def motion_mask(free: np.ndarray) -> np.ndarray:
    """``allowed[m, i, j, k]``: move ``OFFSETS[m]`` from cell (i, j, k) stays in free space.

    A diagonal move requires every cell of the box it spans to be free, so paths
    never cut corners of occupied or unknown cells.
    """
    allowed = np.empty((len(OFFSETS),) + free.shape, dtype=bool)
    for m, d in enumerate(OFFSETS):
        ok = free.copy()
        for sub in itertools.product(*[(0, k) if k else (0,) for k in d]):
            if any(sub):
                ok &= _shift(free, sub)
        allowed[m] = ok
    return allowed


class MotionGraph:
    """26-connected free-space graph of an occupancy grid, with Euclidean edge lengths."""

    def __init__(self, grid: OccupancyGrid):
        self.grid = grid
        self.free = grid.states == FREE
        self.allowed = motion_mask(self.free)
        self.shape = np.array(grid.dims)

    def neighbors(self, cell):
        i, j, k = cell
        ok = self.allowed[:, i, j, k]
        for m in np.flatnonzero(ok):
            d = OFFSETS[m]
            yield (i + d[0], j + d[1], k + d[2]), STEP_COST[m]

    def astar(self, start, goal):
        """Shortest cell path; returns (cells, length in metres)."""
        start, goal = tuple(int(c) for c in start), tuple(int(c) for c in goal)
        if not (self.free[start] and self.free[goal]):
            raise UnreachableError("endpoint not in free space")
        g_goal = np.array(goal, dtype=float)

        def h(c):
            return float(np.sqrt(((np.array(c) - g_goal) ** 2).sum()))

        counter = itertools.count()
        open_heap = [(h(start), next(counter), start)]
        g = {start: 0.0}
        parent = {start: None}
        closed = set()
        while open_heap:
            _, _, cur = heapq.heappop(open_heap)
            if cur in closed:
                continue
            if cur == goal:
                break
            closed.add(cur)
            gc = g[cur]
            for nb, w in self.neighbors(cur):
                if nb in closed:
                    continue
                ng = gc + w
                if ng < g.get(nb, np.inf) - 1e-12:
                    g[nb] = ng
                    parent[nb] = cur
                    heapq.heappush(open_heap, (ng + h(nb), next(counter), nb))
        else:
            raise UnreachableError(f"no free path from {start} to {goal}")
        path = [goal]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        return np.array(path[::-1], dtype=np.int64), g[goal] * self.grid.voxel_size

    def line_of_sight(self, a, b) -> bool:
        cells = segment_cells(a, b, self.grid.dims, self.grid.voxel_size, self.grid.origin)
        return bool(np.all(self.free[tuple(cells.T)]))


def _polyline_length(points) -> float:
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def smooth_path(graph: MotionGraph, waypoints):
    """Greedy shortcutting: from each kept waypoint jump to the farthest one in sight."""
    waypoints = np.asarray(waypoints, dtype=float)
    out = [waypoints[0]]
    i = 0
    while i < len(waypoints) - 1:
        j = len(waypoints) - 1
        while j > i + 1 and not graph.line_of_sight(waypoints[i], waypoints[j]):
            j -= 1
        out.append(waypoints[j])
        i = j
    return np.array(out)


def plan_path(grid: OccupancyGrid, a, b, graph: MotionGraph | None = None):
    """Smoothed collision-free path from ``a`` to ``b``; returns (waypoints, length)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (grid.is_free(a) and grid.is_free(b)):
        raise UnreachableError("endpoint not in free space")
    if np.array_equal(a, b):
        return a[None].copy(), 0.0
    graph = graph or MotionGraph(grid)
    cells, _ = graph.astar(grid.cell_of(a), grid.cell_of(b))
    raw = np.vstack([a, grid.center(cells[1:-1]), b]) if len(cells) > 1 else np.vstack([a, b])
    path = smooth_path(graph, raw)
    return path, _polyline_length(path)


@dataclass(frozen=True)
class TrajectoryPoint:
    time: float
    position: np.ndarray
    yaw: float


def plan_trajectory(tour, cfg, t0: float = 0.0) -> list[TrajectoryPoint]:
    """Piecewise-linear motion through ``tour`` = [(position, yaw), ...].

    Each segment lasts ``max(length / v_max, |dyaw| / yaw_max)`` so both rate
    limits hold at once.  Yaw is unwrapped along the tour (shortest turn per
    segment), so it is continuous across junctions.
    """
    if len(tour) == 0:
        raise ValueError("empty tour")
    p0, y0 = tour[0]
    pts = [TrajectoryPoint(float(t0), np.asarray(p0, dtype=float), float(y0))]
    for pos, yaw in tour[1:]:
        prev = pts[-1]
        pos = np.asarray(pos, dtype=float)
        dyaw = wrap_angle(yaw - prev.yaw)
        dist = float(np.linalg.norm(pos - prev.position))
        duration = max(dist / cfg.v_max, abs(dyaw) / cfg.yaw_max)
        if duration == 0.0:
            continue
        pts.append(TrajectoryPoint(prev.time + duration, pos, prev.yaw + dyaw))
    return pts


def sample_trajectory(traj: list[TrajectoryPoint], times):
    """Positions (N, 3) and yaws (N,) at ``times`` by linear interpolation."""
    ts = np.array([p.time for p in traj])
    P = np.array([p.position for p in traj])
    Y = np.array([p.yaw for p in traj])
    times = np.asarray(times, dtype=float)
    pos = np.column_stack([np.interp(times, ts, P[:, i]) for i in range(3)])
    return pos, np.interp(times, ts, Y)
