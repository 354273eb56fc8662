"""The autonomous exploration loop: map, find frontiers, pick a viewpoint, fly, repeat."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraModel, Pose, wrap_angle
from ..simworld import GroundTruthFrame, VoxelScene, default_start, raycast_rgbd
from .grid import FREE, UNKNOWN, OccupancyGrid, cluster_frontiers, detect_frontiers, integrate_depth
from .planning import MotionGraph, TrajectoryPoint, UnreachableError, plan_path, plan_trajectory, sample_trajectory
from .tsp import build_tsp_matrix, solve_atsp
from .viewpoints import ExplorationConfig, Viewpoint, generate_viewpoints, ring_viewpoints, score_viewpoint

log = logging.getLogger(__name__)

STALL_FRACTION = 1e-3


@dataclass
class ExplorationResult:
    grid: OccupancyGrid
    trajectory: list[TrajectoryPoint]
    frames: list[GroundTruthFrame]
    status: str
    rounds: int = 0
    unknown_history: list[int] = field(default_factory=list)


class Explorer:
    """Single-writer owner of the occupancy grid; frames are yielded in capture order."""

    def __init__(self, scene: VoxelScene, cam: CameraModel, cfg: ExplorationConfig | None = None,
                 grid: OccupancyGrid | None = None, start=None, start_yaw: float = 0.0):
        self.scene = scene
        self.cam = cam
        self.cfg = cfg or ExplorationConfig()
        self.grid = grid.copy() if grid is not None else OccupancyGrid.like(scene)
        start = default_start(scene) if start is None else np.asarray(start, dtype=float)
        self.trajectory = [TrajectoryPoint(0.0, start, float(start_yaw))]
        self.frames_emitted = 0
        self.status = "running"
        self.rounds = 0
        self.unknown_history = [self.grid.count(UNKNOWN)]

    @property
    def here(self) -> TrajectoryPoint:
        return self.trajectory[-1]

    def _capture(self, t: float, position, yaw: float) -> GroundTruthFrame:
        pose = Pose.from_yaw(position, yaw)
        rgb, depth = raycast_rgbd(self.scene, pose, self.cam)
        frame = GroundTruthFrame(self.frames_emitted, rgb, depth, pose, float(t))
        self.frames_emitted += 1
        self.grid = integrate_depth(self.grid, frame, self.cam, self.cfg.sensor_max_range)
        self.unknown_history.append(self.grid.count(UNKNOWN))
        return frame

    def _fly(self, leg: list[TrajectoryPoint]):
        """Append ``leg`` (starting at the current point), hover to the next sample tick, capture frames."""
        rate = self.cfg.capture_rate
        t_prev = self.here.time
        first_tick = 0 if self.frames_emitted == 0 else math.floor(t_prev * rate + 1e-9) + 1
        self.trajectory.extend(leg[1:])
        end = self.here
        t_end = math.ceil(end.time * rate - 1e-9) / rate
        if t_end > end.time:
            self.trajectory.append(TrajectoryPoint(t_end, end.position, end.yaw))
        ticks = np.arange(first_tick, int(round(t_end * rate)) + 1) / rate
        if len(ticks) == 0:
            return
        pos, yaw = sample_trajectory(self.trajectory, ticks)
        for t, p, y in zip(ticks, pos, yaw):
            yield self._capture(t, p, y)

    def _bootstrap(self):
        """Turn a full circle in place so the first map has free space."""
        h = self.here
        tour = [(h.position, h.yaw + q * math.pi / 2) for q in range(5)]
        yield from self._fly(plan_trajectory(tour, self.cfg, t0=h.time))

    def plan_round(self):
        """Pick the next viewpoint, or ``None`` (with ``status`` set) when done."""
        frontiers = detect_frontiers(self.grid)
        clusters = cluster_frontiers(frontiers, self.cfg.min_cluster_size, self.grid, self.cfg.max_cluster_spread)
        if not clusters:
            self.status = "complete"
            return None
        best = []
        for cl in clusters:
            for generate in (generate_viewpoints, ring_viewpoints):
                vps = generate(cl, self.grid, self.cfg)
                for vp in vps:
                    vp.utility = score_viewpoint(self.grid, vp, self.cfg, self.cam, cl.cells)
                vps = [vp for vp in vps if vp.utility > 0]
                if vps:
                    best.append(max(vps, key=lambda v: v.utility))
                    break
        if not best:
            self.status = "no_viewpoints"
            return None
        best.sort(key=lambda v: -v.utility)
        best = best[:self.cfg.max_viewpoints]
        h = self.here
        current = Viewpoint(h.position, wrap_angle(h.yaw))
        graph = MotionGraph(self.grid)
        M, _ = build_tsp_matrix(current, best, self.grid, self.cfg, graph)
        tour = solve_atsp(M)
        if len(tour) < 2:
            self.status = "unreachable"
            return None
        return best[tour[1] - 1], graph

    def run(self):
        """Generator over captured frames; the final state is left on the instance."""
        if self.grid.count(FREE) == 0:
            yield from self._bootstrap()
        stalls = 0
        while self.rounds < self.cfg.max_rounds:
            planned = self.plan_round()
            if planned is None:
                break
            target, graph = planned
            self.rounds += 1
            before = self.grid.states.copy()
            h = self.here
            try:
                path, _ = plan_path(self.grid, h.position, target.position, graph)
            except UnreachableError:
                self.status = "unreachable"
                break
            lengths = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))]
            frac = lengths / lengths[-1] if lengths[-1] > 0 else np.ones(len(path))
            dyaw = wrap_angle(target.yaw - h.yaw)
            tour = [(p, h.yaw + f * dyaw) for p, f in zip(path, frac)]
            leg = plan_trajectory(tour, self.cfg, t0=h.time)
            if len(leg) < 2:
                leg = [h, TrajectoryPoint(h.time + 1.0 / self.cfg.capture_rate, h.position, h.yaw)]
            yield from self._fly(leg)
            changed = np.count_nonzero(before != self.grid.states)
            stalls = stalls + 1 if changed < STALL_FRACTION * before.size else 0
            log.debug("round %d: target %s utility %.0f, %d cells changed", self.rounds, target.position,
                      target.utility, changed)
            if stalls >= 2:
                self.status = "stalled"
                break
        else:
            self.status = "max_rounds"

    def result(self, frames) -> ExplorationResult:
        return ExplorationResult(self.grid, self.trajectory, frames, self.status, self.rounds, self.unknown_history)


def explore_loop(scene: VoxelScene, cam: CameraModel, cfg: ExplorationConfig | None = None, **kwargs
                 ) -> ExplorationResult:
    explorer = Explorer(scene, cam, cfg, **kwargs)
    frames = list(explorer.run())
    return explorer.result(frames)


def trajectory_poses(traj: list[TrajectoryPoint]):
    from ..simworld import TimedPose
    return [TimedPose(p.time, Pose.from_yaw(p.position, p.yaw)) for p in traj]
