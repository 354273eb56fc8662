"""3D Gaussian splats: initialisation from a point cloud, EWA projection, front-to-back compositing, PSNR."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraModel, Pose

SH_C0 = 0.28209479177387814
ALPHA_MAX = 0.999
T_MIN = 1e-4
# splats are evaluated wherever alpha * exp(-d^2 / 2) can still reach this value
CULL_EPS = 1e-6
COV2D_FLOOR = 0.3
NEAR = 1e-3
GUARD_BAND = 1.3  # cull centres outside this multiple of the half field of view
PSNR_CAP = 99.0
SCENE_MAGIC = b"EGSS"


def rgb_to_sh(rgb):
    return np.asarray(rgb, dtype=float) / SH_C0


def sh_to_rgb(sh):
    return np.asarray(sh, dtype=float) * SH_C0


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` to a rotation matrix; works on (..., 4)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


@dataclass
class SplatScene:
    means: np.ndarray      # (n, 3)
    scales: np.ndarray     # (n, 3) standard deviations along the local axes
    quats: np.ndarray      # (n, 4) w, x, y, z
    opacity: np.ndarray    # (n,)
    sh: np.ndarray         # (n, 3) degree-0 coefficients

    def __len__(self):
        return len(self.means)

    @property
    def covariances(self) -> np.ndarray:
        R = quat_to_matrix(self.quats)
        return R @ (self.scales[:, :, None] ** 2 * np.swapaxes(R, -1, -2))

    @property
    def colors(self) -> np.ndarray:
        return sh_to_rgb(self.sh)

    @property
    def bounds(self) -> tuple:
        return self.means.min(axis=0), self.means.max(axis=0)

    def check(self):
        if np.any(self.scales <= 0) or not np.all(np.isfinite(self.sh)):
            raise ValueError("splat scales must be positive and colours finite")
        if np.any(self.opacity <= 0) or np.any(self.opacity > 1):
            raise ValueError("opacity must lie in (0, 1]")


def init_gaussians(xyz, rgb, confidence, base_scale: float) -> SplatScene:
    """One isotropic splat per point.

    Size is the mean distance to the 3 nearest neighbours, clamped to
    ``[0.5, 3] * base_scale``; a lone point gets ``base_scale``.  Opacity is the
    confidence clamped to ``[0.05, 1]``.
    """
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    n = len(xyz)
    if n == 0:
        raise ValueError("cannot initialise splats from an empty cloud")
    if base_scale <= 0:
        raise ValueError("base_scale must be positive")
    if n == 1:
        s = np.array([base_scale])
    else:
        kk = min(3, n - 1)
        d, _ = cKDTree(xyz).query(xyz, k=kk + 1)
        s = np.clip(d[:, 1:].mean(axis=1), 0.5 * base_scale, 3.0 * base_scale)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    alpha = np.clip(np.asarray(confidence, dtype=float).ravel(), 0.05, 1.0)
    return SplatScene(xyz.copy(), np.repeat(s[:, None], 3, axis=1), quats, alpha, rgb_to_sh(rgb).reshape(-1, 3))


def eval_gaussian(mean, cov, x) -> np.ndarray:
    """Normalised 3D Gaussian density at ``x`` (..., 3)."""
    cov = np.asarray(cov, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise ValueError("covariance is not positive definite") from e
    d = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    z = np.linalg.solve(L, d.reshape(-1, 3).T)
    m2 = np.sum(z ** 2, axis=0).reshape(d.shape[:-1])
    norm = (2 * np.pi) ** -1.5 / np.prod(np.diag(L))
    return norm * np.exp(-0.5 * m2)


def _in_guard_band(x, y, z, cam: CameraModel):
    # near-plane splats far off-axis get a huge first-order footprint; drop them like a rasteriser would
    z = np.maximum(z, NEAR)
    lim_x = GUARD_BAND * max(cam.cx, cam.width - cam.cx) / cam.fx
    lim_y = GUARD_BAND * max(cam.cy, cam.height - cam.cy) / cam.fy
    return (np.abs(x / z) <= lim_x) & (np.abs(y / z) <= lim_y)


def project_splat(mean, cov, cam: CameraModel, pose: Pose):
    """``(mean2d, cov2d, depth)`` by first-order (EWA) projection, or ``None`` behind the camera."""
    xc = pose.rotation.T @ (np.asarray(mean, dtype=float) - pose.translation)
    x, y, z = xc
    if z <= NEAR or not _in_guard_band(x, y, z, cam):
        return None
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    Rc = pose.rotation
    cov2d = J @ Rc.T @ np.asarray(cov, dtype=float) @ Rc @ J.T
    cov2d = 0.5 * (cov2d + cov2d.T) + COV2D_FLOOR * np.eye(2)
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    return mean2d, cov2d, float(z)


def project_all(scene: SplatScene, cam: CameraModel, pose: Pose):
    """Vectorised :func:`project_splat`: ``(visible_idx, mean2d, cov2d, depth)``."""
    R = pose.rotation
    xc = (scene.means - pose.translation) @ R
    z = xc[:, 2]
    vis = np.flatnonzero((z > NEAR) & _in_guard_band(xc[:, 0], xc[:, 1], z, cam))
    xc, z = xc[vis], z[vis]
    J = np.zeros((len(vis), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * xc[:, 0] / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * xc[:, 1] / z ** 2
    cov_c = R.T @ scene.covariances[vis] @ R
    cov2d = J @ cov_c @ np.swapaxes(J, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2)) + COV2D_FLOOR * np.eye(2)
    mean2d = np.stack([cam.fx * xc[:, 0] / z + cam.cx, cam.fy * xc[:, 1] / z + cam.cy], axis=1)
    return vis, mean2d, cov2d, z


def _composite(scene: SplatScene, cam: CameraModel, pose: Pose, background=0.0, residual=None):
    """Front-to-back compositing; with ``residual`` also returns per-splat colour gradients."""
    H, W = cam.height, cam.width
    colors = scene.colors
    C = np.zeros((H, W, 3))
    T = np.ones((H, W))
    grad = np.zeros((len(scene), 3)) if residual is not None else None
    wsum = np.zeros(len(scene)) if residual is not None else None
    if len(scene):
        vis, m2, c2, z = project_all(scene, cam, pose)
        order = np.lexsort((vis, z))
        for j in order:
            idx = vis[j]
            a = scene.opacity[idx]
            if a < CULL_EPS:
                continue
            cov = c2[j]
            det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
            inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[0, 1], cov[0, 0]]]) / det
            r2 = max(9.0, 2.0 * np.log(a / CULL_EPS))
            ex, ey = np.sqrt(r2 * cov[0, 0]), np.sqrt(r2 * cov[1, 1])
            u0, u1 = int(np.ceil(m2[j, 0] - ex)), int(np.floor(m2[j, 0] + ex))
            v0, v1 = int(np.ceil(m2[j, 1] - ey)), int(np.floor(m2[j, 1] + ey))
            u0, v0 = max(u0, 0), max(v0, 0)
            u1, v1 = min(u1, W - 1), min(v1, H - 1)
            if u0 > u1 or v0 > v1:
                continue
            du = np.arange(u0, u1 + 1) - m2[j, 0]
            dv = np.arange(v0, v1 + 1) - m2[j, 1]
            d2 = (inv[0, 0] * du[None, :] ** 2 + 2 * inv[0, 1] * du[None, :] * dv[:, None]
                  + inv[1, 1] * dv[:, None] ** 2)
            alpha = np.minimum(a * np.exp(-0.5 * d2), ALPHA_MAX)
            Tw = T[v0:v1 + 1, u0:u1 + 1]
            alpha = np.where(Tw >= T_MIN, alpha, 0.0)
            w = alpha * Tw
            C[v0:v1 + 1, u0:u1 + 1] += w[..., None] * colors[idx]
            if residual is not None:
                grad[idx] += np.tensordot(w, residual[v0:v1 + 1, u0:u1 + 1], axes=([0, 1], [0, 1]))
                wsum[idx] += w.sum()
            T[v0:v1 + 1, u0:u1 + 1] = Tw * (1.0 - alpha)
    C += T[..., None] * np.asarray(background, dtype=float)
    return C, 1.0 - T, grad, wsum


def render(scene: SplatScene, cam: CameraModel, pose: Pose, background=0.0) -> np.ndarray:
    """RGB image; splats sorted by camera depth (ties by index), alpha capped at 0.999."""
    return _composite(scene, cam, pose, background)[0]


def render_with_alpha(scene: SplatScene, cam: CameraModel, pose: Pose, background=0.0):
    C, A, _, _ = _composite(scene, cam, pose, background)
    return C, A


def refine_colors(scene: SplatScene, views, steps: int = 50, lr: float = 1.0) -> SplatScene:
    """Colour-only least squares against ``views = [(cam, pose, rgb), ...]``.

    Rendering is linear in the colours, so each step moves every splat along
    its weighted residual, normalised by its total weight.
    """
    sh = scene.sh.copy()
    out = SplatScene(scene.means, scene.scales, scene.quats, scene.opacity, sh)
    for _ in range(steps):
        g = np.zeros_like(sh)
        ws = np.zeros(len(out))
        for cam, pose, rgb in views:
            img = _composite(out, cam, pose)[0]
            _, _, gi, wi = _composite(out, cam, pose, residual=img - rgb)
            g += gi
            ws += wi
        step = np.where(ws[:, None] > 1e-12, g / np.maximum(ws, 1e-12)[:, None], 0.0)
        out.sh = out.sh - lr * rgb_to_sh(step)
    return out


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def mean_color_baseline(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    return np.broadcast_to(rgb.reshape(-1, 3).mean(axis=0), rgb.shape).copy()


def write_scene(path, scene: SplatScene):
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<I", len(scene)))
        rows = np.concatenate([scene.means, scene.scales, scene.quats, scene.opacity[:, None], scene.sh], axis=1)
        f.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def read_scene(path) -> SplatScene:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != SCENE_MAGIC:
        raise ValueError(f"{path}: not a splat scene file")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + n * 14 * 8:
        raise ValueError(f"{path}: truncated scene file")
    rows = np.frombuffer(data, "<f8", n * 14, 8).reshape(n, 14).astype(float)
    return SplatScene(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:14])
