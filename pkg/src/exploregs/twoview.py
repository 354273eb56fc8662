"""Two-view pointmap backends (synthetic oracle or external executable) and intrinsics recovery."""

from __future__ import annotations

import shutil
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Pose
from .simworld import GeometryError, raycast_rgbd

PRED_MAGIC = b"EGSP"
COINCIDE = 1e-12
MIN_INTRINSICS_PIXELS = 100


class BackendError(RuntimeError):
    pass


class IntrinsicsError(ValueError):
    pass


@dataclass
class PairPrediction:
    """Per-pixel output for pair ``(i, k)``; both pointmaps are in camera ``i`` coordinates.

    ``depth_i`` / ``depth_k`` are camera-frame Z of each view in its own camera.
    Channel 0 of ``confidence`` / ``valid`` belongs to view ``i``, channel 1 to view ``k``.
    """
    pair: tuple
    pointmap_i: np.ndarray
    pointmap_k: np.ndarray
    depth_i: np.ndarray
    depth_k: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.depth_i.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def check(self):
        v = self.valid
        for pm, ch in ((self.pointmap_i, 0), (self.pointmap_k, 1)):
            if not np.all(np.isfinite(pm[v[..., ch]])):
                raise ValueError("non-finite point at a valid pixel")
        if np.any(self.depth_i[v[..., 0]] <= 0) or np.any(self.depth_k[v[..., 1]] <= 0):
            raise ValueError("non-positive depth at a valid pixel")
        if np.any(self.confidence[~v] != 0):
            raise ValueError("confidence must be zero at invalid pixels")


def _camera_points(depth_range, cam: CameraModel) -> np.ndarray:
    """Camera-frame points from a Euclidean range image."""
    d = cam.ray_directions()
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return d * depth_range[..., None]


def _invalid_prediction(pair, shape) -> PairPrediction:
    H, W = shape
    z3 = np.zeros((H, W, 3))
    return PairPrediction(pair, z3, z3.copy(), np.zeros((H, W)), np.zeros((H, W)),
                          np.zeros((H, W, 2)), np.zeros((H, W, 2), dtype=bool))


class OracleBackend:
    """Ground-truth pointmaps by raycasting the scene at each frame's true pose.

    ``sigma`` adds isotropic Gaussian noise (metres) to every 3D point, with
    confidence ``exp(-r^2 / (2 sigma^2))`` for noise magnitude ``r``;
    ``dropout`` invalidates that fraction of pixels at random.
    """
    kind = "oracle"

    def __init__(self, scene, cam: CameraModel, sigma: float = 0.0, dropout: float = 0.0, seed: int = 0):
        if sigma < 0 or not 0 <= dropout <= 1:
            raise ValueError("need sigma >= 0 and dropout in [0, 1]")
        self.scene = scene
        self.cam = cam
        self.sigma = float(sigma)
        self.dropout = float(dropout)
        self.seed = int(seed)

    def _overlaps(self, pts_w, pose_i: Pose, depth_i) -> bool:
        """Does any world point land, unoccluded, inside view ``i``?"""
        cam = self.cam
        pc = (pts_w - pose_i.translation) @ pose_i.rotation
        z = pc[:, 2]
        front = z > 1e-9
        if not front.any():
            return False
        pc, z = pc[front], z[front]
        u = np.rint(cam.fx * pc[:, 0] / z + cam.cx).astype(np.int64)
        v = np.rint(cam.fy * pc[:, 1] / z + cam.cy).astype(np.int64)
        inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        if not inside.any():
            return False
        r = np.linalg.norm(pc[inside], axis=1)
        seen = depth_i[v[inside], u[inside]]
        return bool(np.any((seen > 0) & (np.abs(seen - r) < self.scene.voxel_size)))

    def infer(self, frame_i, frame_k) -> PairPrediction:
        pair = (frame_i.frame_id, frame_k.frame_id)
        cam = self.cam
        shape = (cam.height, cam.width)
        if frame_i.rgb.shape[:2] != shape or frame_k.rgb.shape[:2] != shape:
            raise ValueError("frames must match the backend camera dimensions")
        try:
            _, range_i = raycast_rgbd(self.scene, frame_i.pose, cam)
            _, range_k = raycast_rgbd(self.scene, frame_k.pose, cam)
        except GeometryError as e:
            raise BackendError(f"oracle raycast failed for pair {pair}: {e}") from e
        hit = np.stack([range_i > 0, range_k > 0], axis=-1)
        local_i = _camera_points(range_i, cam)
        local_k = _camera_points(range_k, cam)
        world_k = frame_k.pose.apply(local_k.reshape(-1, 3))
        if not self._overlaps(world_k[hit[..., 1].ravel()], frame_i.pose, range_i):
            return _invalid_prediction(pair, shape)
        rel = frame_i.pose.inverse().compose(frame_k.pose)   # camera k -> camera i
        pm_i = local_i.copy()
        pm_k = rel.apply(local_k.reshape(-1, 3)).reshape(local_k.shape)

        rng = np.random.Generator(np.random.PCG64([self.seed, pair[0], pair[1]]))
        conf = hit.astype(float)
        if self.sigma > 0:
            noise = rng.normal(0.0, self.sigma, size=(2,) + local_i.shape)
            pm_i = pm_i + noise[0]
            pm_k = pm_k + noise[1]
            r2 = np.sum(noise ** 2, axis=-1)
            conf = np.exp(-np.moveaxis(r2, 0, -1) / (2 * self.sigma ** 2)) * hit
        depth_i = pm_i[..., 2]
        # view k's depth is its own camera Z of the (possibly noisy) point
        depth_k = rel.inverse().apply(pm_k.reshape(-1, 3)).reshape(pm_k.shape)[..., 2]
        valid = hit & np.stack([depth_i > 0, depth_k > 0], axis=-1)
        if self.dropout > 0:
            valid &= rng.random(valid.shape) >= self.dropout
        conf = np.where(valid, conf, 0.0)
        pm_i[~valid[..., 0]] = 0.0
        pm_k[~valid[..., 1]] = 0.0
        depth_i = np.where(valid[..., 0], depth_i, 0.0)
        depth_k = np.where(valid[..., 1], depth_k, 0.0)
        return PairPrediction(pair, pm_i, pm_k, depth_i, depth_k, conf, valid)


class ExternalBackend:
    """Runs ``executable <workdir>`` on a directory holding ``a.ppm`` and ``b.ppm``.

    The executable must write ``pred.bin`` into the same directory.  Each pair
    gets its own directory, so concurrent invocations do not collide.
    """
    kind = "external"

    def __init__(self, executable, timeout: float = 600.0, workdir_root=None, keep_workdirs: bool = False):
        self.executable = str(executable)
        self.timeout = float(timeout)
        self.workdir_root = workdir_root
        self.keep_workdirs = keep_workdirs

    def infer(self, frame_i, frame_k) -> PairPrediction:
        from .formats import write_ppm
        pair = (frame_i.frame_id, frame_k.frame_id)
        if frame_i.rgb.shape != frame_k.rgb.shape:
            raise ValueError("frames must have identical dimensions")
        work = Path(tempfile.mkdtemp(prefix=f"pair_{pair[0]}_{pair[1]}_", dir=self.workdir_root))
        try:
            write_ppm(work / "a.ppm", frame_i.rgb)
            write_ppm(work / "b.ppm", frame_k.rgb)
            try:
                proc = subprocess.run([self.executable, str(work)], cwd=work, capture_output=True,
                                      text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as e:
                raise BackendError(f"backend timed out after {self.timeout:g} s on pair {pair}\n"
                                   f"stdout: {e.stdout}\nstderr: {e.stderr}") from e
            except OSError as e:
                raise BackendError(f"cannot run backend {self.executable!r}: {e}") from e
            if proc.returncode != 0:
                raise BackendError(f"backend exited with status {proc.returncode} on pair {pair}\n"
                                   f"stdout: {proc.stdout}\nstderr: {proc.stderr}")
            try:
                pred = read_prediction(work / "pred.bin", pair)
            except (OSError, ValueError) as e:
                raise BackendError(f"bad prediction file for pair {pair}: {e}\nstderr: {proc.stderr}") from e
            if pred.shape != frame_i.rgb.shape[:2]:
                raise BackendError(f"prediction size {pred.shape} does not match images for pair {pair}")
            return pred
        finally:
            if not self.keep_workdirs:
                shutil.rmtree(work, ignore_errors=True)


def infer_pointmaps(backend, frame_i, frame_k) -> PairPrediction:
    return backend.infer(frame_i, frame_k)


def write_prediction(path, pred: PairPrediction):
    H, W = pred.shape
    with open(path, "wb") as f:
        f.write(PRED_MAGIC)
        f.write(struct.pack("<2I", H, W))
        for arr in (pred.pointmap_i, pred.pointmap_k, pred.depth_i, pred.depth_k,
                    pred.confidence[..., 0], pred.confidence[..., 1]):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        bits = np.concatenate([pred.valid[..., 0].ravel(), pred.valid[..., 1].ravel()])
        f.write(np.packbits(bits).tobytes())


def read_prediction(path, pair=(0, 1)) -> PairPrediction:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != PRED_MAGIC:
        raise ValueError(f"{path}: not a prediction file")
    H, W = struct.unpack_from("<2I", data, 4)
    n = H * W
    need = 12 + 8 * (6 * n + 4 * n) + (2 * n + 7) // 8
    if len(data) < need:
        raise ValueError(f"{path}: truncated ({len(data)} of {need} bytes)")
    off = 12

    def take(count, shape):
        nonlocal off
        a = np.frombuffer(data, "<f8", count, off).reshape(shape).astype(float)
        off += 8 * count
        return a

    pm_i = take(3 * n, (H, W, 3))
    pm_k = take(3 * n, (H, W, 3))
    d_i = take(n, (H, W))
    d_k = take(n, (H, W))
    c_i = take(n, (H, W))
    c_k = take(n, (H, W))
    bits = np.unpackbits(np.frombuffer(data, np.uint8, (2 * n + 7) // 8, off))[:2 * n].astype(bool)
    valid = np.stack([bits[:n].reshape(H, W), bits[n:].reshape(H, W)], axis=-1)
    conf = np.stack([c_i, c_k], axis=-1) * valid
    return PairPrediction(tuple(pair), pm_i, pm_k, d_i, d_k, conf, valid)


def weiszfeld_objective(x, points, weights) -> float:
    return float(np.sum(weights * np.linalg.norm(points - x, axis=1)))


def weiszfeld_median(points, weights=None, tol: float = 1e-10, max_iter: int = 1000, history: list | None = None):
    """Weighted geometric median of ``points`` (n, d) by Weiszfeld iteration.

    When the iterate lands on data points (distance < 1e-12) it stays there if
    their weight is at least the pull of the others (the subgradient contains
    zero); otherwise it takes the modified step of Vardi and Zhang, which
    leaves the point along the descent direction.  The objective never
    increases; if ``history`` is given it receives the objective per iterate.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if len(P) == 0:
        raise ValueError("need at least one point")
    w = np.ones(len(P)) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    P, w = P[keep], w[keep]
    if len(P) == 0:
        raise ValueError("all weights are zero")
    x = (w[:, None] * P).sum(0) / w.sum()
    f = weiszfeld_objective(x, P, w)
    if history is not None:
        history.append(f)
    for _ in range(max_iter):
        d = np.linalg.norm(P - x, axis=1)
        at = d < COINCIDE
        far = ~at
        if not far.any():
            break
        inv = w[far] / d[far]
        T = (inv[:, None] * P[far]).sum(0) / inv.sum()
        if at.any():
            R = (inv[:, None] * (P[far] - x)).sum(0)
            r = np.linalg.norm(R)
            w_at = w[at].sum()
            if r <= w_at:
                break
            beta = w_at / r
            x_new = (1 - beta) * T + beta * x
        else:
            x_new = T
        f_new = weiszfeld_objective(x_new, P, w)
        if f_new > f * (1 + 1e-12) + 1e-300:
            # rounding noise at convergence; keep the better point
            break
        step = np.linalg.norm(x_new - x)
        x, f = x_new, f_new
        if history is not None:
            history.append(f)
        if step < tol * max(1.0, np.linalg.norm(x)):
            break
    return x


def focal_votes(pointmap, weights, valid, cam_size):
    """Per-pixel focal votes ``(u - cx) z / x`` and ``(v - cy) z / y`` with their weights."""
    W, H = cam_size
    cx, cy = W / 2.0, H / 2.0
    v, u = np.mgrid[0:H, 0:W].astype(float)
    x, y, z = pointmap[..., 0], pointmap[..., 1], pointmap[..., 2]
    ok = valid & (z > 0)
    votes, wts = [], []
    for offset, coord in ((u - cx, x), (v - cy, y)):
        m = ok & (np.abs(offset) >= 1.0) & (np.abs(coord) > 1e-12)
        votes.append(offset[m] * z[m] / coord[m])
        wts.append(weights[m])
    return np.concatenate(votes), np.concatenate(wts), int(ok.sum())


def estimate_intrinsics(pred: PairPrediction, image_size, view: int = 0) -> CameraModel:
    """Shared focal length from view ``i``'s pointmap, principal point at the image centre.

    ``image_size`` is ``(width, height)``; votes are weighted by confidence and
    combined with a 1-D Weiszfeld median.
    """
    if view != 0:
        raise ValueError("only view i's pointmap is expressed in its own camera frame")
    W, H = image_size
    votes, wts, n_valid = focal_votes(pred.pointmap_i, pred.confidence[..., 0], pred.valid[..., 0], (W, H))
    positive = (votes > 0) & (wts > 0)
    if n_valid < MIN_INTRINSICS_PIXELS or positive.sum() < 2:
        raise IntrinsicsError("underconstrained intrinsics")
    f = float(weiszfeld_median(votes[positive], wts[positive])[0])
    return CameraModel(W, H, f, f, W / 2.0, H / 2.0)
