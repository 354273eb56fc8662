"""Synthetic voxel warehouse with a raycast RGB-D camera."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import CameraModel, Pose, orthonormalize, so3_exp, so3_log
from .voxels import VoxelMarch

# 8 albedo levels with luma spread evenly over (0, 1) so neighbouring cells contrast
PALETTE = np.array([
    [0.08, 0.08, 0.10],
    [0.35, 0.12, 0.10],
    [0.15, 0.35, 0.60],
    [0.80, 0.35, 0.25],
    [0.40, 0.75, 0.35],
    [0.55, 0.80, 0.90],
    [0.95, 0.85, 0.30],
    [0.97, 0.97, 0.95],
])
DEFAULT_LIGHT = np.array([0.3, 0.5, 0.81]) / np.linalg.norm([0.3, 0.5, 0.81])
BACKGROUND = np.zeros(3)
SHADE_RANGE = (0.2, 1.0)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    dims: tuple = (12, 12, 12)
    voxel_size: float = 0.25
    seed: int = 1
    obstacle_density: float = 0.0


@dataclass
class VoxelScene:
    """Dense voxel grid.  Cell ``(i, j, k)`` spans ``[i, i+1) * voxel_size`` etc."""

    solid: np.ndarray
    albedo: np.ndarray
    voxel_size: float
    seed: int = 0
    light_dir: np.ndarray = field(default_factory=lambda: DEFAULT_LIGHT.copy())

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.solid.shape)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims) * self.voxel_size

    def cell_of(self, point) -> np.ndarray:
        return np.floor(np.asarray(point, dtype=float) / self.voxel_size).astype(np.int64)

    def is_free(self, point) -> bool:
        c = self.cell_of(point)
        if np.any(c < 0) or np.any(c >= self.dims):
            return False
        return not bool(self.solid[tuple(c)])

    def free_interior(self) -> np.ndarray:
        interior = np.zeros_like(self.solid)
        interior[1:-1, 1:-1, 1:-1] = True
        return interior & ~self.solid


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def procedural_albedo(dims, seed: int) -> np.ndarray:
    """Per-cell colour from a hash of (flat cell index, seed), one of 8 palette entries."""
    flat = np.arange(int(np.prod(dims)), dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = flat * np.uint64(0x100000001B3) + np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x9E3779B1)
    h = _splitmix64(key)
    return PALETTE[(h % np.uint64(len(PALETTE))).astype(np.int64)].reshape(*dims, 3)


def _free_connected(solid: np.ndarray) -> bool:
    free = ~solid
    free[[0, -1], :, :] = False
    free[:, [0, -1], :] = False
    free[:, :, [0, -1]] = False
    _, n = ndimage.label(free)
    return n == 1


def build_world(spec: WorldSpec | None = None, **kwargs) -> VoxelScene:
    """Enclosed room with seeded box obstacles standing on the floor.

    Obstacles are redrawn until the free interior is one 6-connected region.
    """
    spec = spec or WorldSpec(**kwargs)
    dims = tuple(int(d) for d in spec.dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError("world dims must be >= 8 per axis")
    if not 0.0 <= spec.obstacle_density <= 0.3:
        raise ValueError("obstacle_density must lie in [0, 0.3]")
    if spec.voxel_size <= 0:
        raise ValueError("voxel_size must be positive")

    shell = np.ones(dims, dtype=bool)
    shell[1:-1, 1:-1, 1:-1] = False
    interior = int(np.prod([d - 2 for d in dims]))
    target = int(round(spec.obstacle_density * interior))
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    for _ in range(200):
        solid = shell.copy()
        count = 0
        while count < target:
            sx, sy = rng.integers(1, 3, size=2)
            x0 = rng.integers(1, dims[0] - 1 - sx + 1)
            y0 = rng.integers(1, dims[1] - 1 - sy + 1)
            h = rng.integers(1, max(2, dims[2] - 3))
            block = solid[x0:x0 + sx, y0:y0 + sy, 1:1 + h]
            count += int((~block).sum())
            block[...] = True
        if _free_connected(solid):
            break
    else:
        raise RuntimeError("could not place connected obstacles")

    return VoxelScene(solid=solid, albedo=procedural_albedo(dims, spec.seed), voxel_size=float(spec.voxel_size),
                      seed=int(spec.seed))


def default_start(scene: VoxelScene) -> np.ndarray:
    """Centre of the free interior cell nearest to the middle of the room."""
    free = np.argwhere(scene.free_interior())
    mid = (np.array(scene.dims) - 1) / 2.0
    d = np.sum((free - mid) ** 2, axis=1)
    order = np.lexsort((free[:, 2], free[:, 1], free[:, 0], d))
    return (free[order[0]] + 0.5) * scene.voxel_size


def shade(normals: np.ndarray, light_dir) -> np.ndarray:
    lo, hi = SHADE_RANGE
    return np.clip(normals @ np.asarray(light_dir), lo, hi)


def cast_rays(scene: VoxelScene, origins, dirs):
    """March unit rays; return (t_hit, hit_cell, hit_axis, step_sign).

    ``t_hit`` is 0 for rays that leave the grid; ``hit_cell`` is -1 there.
    """
    origins = np.atleast_2d(origins)
    n = len(dirs)
    t_hit = np.zeros(n)
    hit_cell = np.full((n, 3), -1, dtype=np.int64)
    hit_axis = np.full(n, -1)
    step_sign = np.zeros((n, 3), dtype=np.int64)
    march = VoxelMarch(origins, dirs, scene.dims, scene.voxel_size)
    if march.idx.size != n:
        raise GeometryError("camera outside the scene")
    if np.any(scene.solid[tuple(march.cell.T)]):
        raise GeometryError("camera embedded in geometry")
    while march.active:
        march.advance()
        if not march.active:
            break
        hit = scene.solid[tuple(march.cell.T)]
        if np.any(hit):
            ids = march.idx[hit]
            t_hit[ids] = march.t_enter[hit]
            hit_cell[ids] = march.cell[hit]
            hit_axis[ids] = march.axis[hit]
            step_sign[ids] = march.step_dir[hit]
            march.retire(hit)
    return t_hit, hit_cell, hit_axis, step_sign


def raycast_rgbd(scene: VoxelScene, pose: Pose, cam: CameraModel):
    """Render ``(rgb, depth)`` with depth as Euclidean range to the hit (0 = no hit).

    Colour is quantised to 8 bits like a real sensor, so a frame survives a PPM round trip unchanged.
    """
    d_cam = cam.ray_directions().reshape(-1, 3)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t_hit, cells, axis, step = cast_rays(scene, origins, dirs)
    hit = t_hit > 0
    rgb = np.tile(BACKGROUND, (len(dirs), 1))
    if np.any(hit):
        normals = np.zeros((hit.sum(), 3))
        rows = np.arange(hit.sum())
        normals[rows, axis[hit]] = -step[hit, axis[hit]]
        rgb[hit] = scene.albedo[tuple(cells[hit].T)] * shade(normals, scene.light_dir)[:, None]
    rgb = np.rint(rgb * 255.0) / 255.0
    return rgb.reshape(cam.height, cam.width, 3), t_hit.reshape(cam.height, cam.width)


@dataclass
class GroundTruthFrame:
    frame_id: int
    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    timestamp: float


@dataclass(frozen=True)
class TimedPose:
    time: float
    pose: Pose


def interpolate_pose(trajectory: list[TimedPose], times) -> list[Pose]:
    """Linear position and shortest-arc rotation interpolation, clamped at the ends."""
    ts = np.array([tp.time for tp in trajectory], dtype=float)
    out = []
    for t in np.atleast_1d(np.asarray(times, dtype=float)):
        if t <= ts[0]:
            out.append(trajectory[0].pose)
            continue
        if t >= ts[-1]:
            out.append(trajectory[-1].pose)
            continue
        j = int(np.searchsorted(ts, t, side="right"))
        a, b = trajectory[j - 1], trajectory[j]
        tau = (t - a.time) / (b.time - a.time)
        Ra, Rb = a.pose.rotation, b.pose.rotation
        if np.array_equal(Ra, Rb):
            R = Ra
        else:
            R = orthonormalize(Ra @ so3_exp(tau * so3_log(Ra.T @ Rb)))
        pa, pb = a.pose.translation, b.pose.translation
        out.append(Pose(R, pa + tau * (pb - pa)))
    return out


def sample_times(t0: float, t1: float, rate: float) -> np.ndarray:
    if rate <= 0:
        raise ValueError("rate must be positive")
    n = int(np.floor((t1 - t0) * rate + 1e-9))
    return t0 + np.arange(max(n, 0) + 1) / rate


def capture_sequence(scene: VoxelScene, trajectory: list[TimedPose], cam: CameraModel, rate: float,
                     first_id: int = 0) -> list[GroundTruthFrame]:
    """Sample frames at ``rate`` Hz over the trajectory, endpoints included."""
    if not trajectory:
        return []
    times = sample_times(trajectory[0].time, trajectory[-1].time, rate)
    frames = []
    for n, (t, pose) in enumerate(zip(times, interpolate_pose(trajectory, times))):
        rgb, depth = raycast_rgbd(scene, pose, cam)
        frames.append(GroundTruthFrame(first_id + n, rgb, depth, pose, float(t)))
    return frames
