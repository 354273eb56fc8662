"""Global alignment of per-pair pointmaps: per-image scale and pose, then a fused world cloud.

Each image ``m`` carries ``(sigma_m, R_m, t_m)``; a camera-frame point ``a`` maps
to the world as ``R_m a / sigma_m + t_m``.  For an edge ``(i, k)`` every valid
pixel of view ``k`` gives one residual between its own back-projected point
(camera ``k``) and the edge's pointmap of the same pixel (camera ``i``):

    r = R_k a / sigma_k + t_k - R_i b / sigma_i - t_i

and the energy is ``sum q |r|^2`` (or ``sum q |r|`` with ``squared=False``).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, orthonormalize, so3_exp

log = logging.getLogger(__name__)

MIN_EDGE_POINTS = 3


class AlignError(RuntimeError):
    pass


@dataclass
class AlignOptions:
    max_iters: int = 500
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    squared: bool = True
    memory: int = 10
    armijo: float = 1e-4


@dataclass
class EdgeData:
    pair: tuple
    i: int            # index into AlignProblem.images
    k: int
    a: np.ndarray     # (n, 3) view-k points in camera k
    b: np.ndarray     # (n, 3) same pixels, edge pointmap in camera i
    q: np.ndarray     # (n,)


def camera_points(depth, cam: CameraModel) -> np.ndarray:
    """``K^-1 Z [u, v, 1]`` for every pixel: (H, W, 3)."""
    u, v = cam.pixel_grid()
    Z = np.asarray(depth, dtype=float)
    return np.stack([(u - cam.cx) / cam.fx * Z, (v - cam.cy) / cam.fy * Z, Z], axis=-1)


def edge_data(pred, cam: CameraModel, i: int, k: int) -> EdgeData:
    m = pred.valid[..., 1]
    a = camera_points(pred.depth_k, cam)[m]
    return EdgeData(tuple(pred.pair), i, k, a, pred.pointmap_k[m], pred.confidence[..., 1][m])


def connected_components(n: int, links) -> list[list[int]]:
    adj = [[] for _ in range(n)]
    for a, b in links:
        adj[a].append(b)
        adj[b].append(a)
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        comp, queue = [], deque([s])
        seen[s] = True
        while queue:
            x = queue.popleft()
            comp.append(x)
            for y in adj[x]:
                if not seen[y]:
                    seen[y] = True
                    queue.append(y)
        comps.append(sorted(comp))
    return comps


@dataclass
class AlignProblem:
    """Images are frame ids; the first image is the gauge (fixed pose, sigma = 1)."""
    images: list
    edges: list                      # EdgeData
    cam: CameraModel
    gauge_pose: Pose = field(default_factory=Pose.identity)
    excluded: list = field(default_factory=list)

    @classmethod
    def from_predictions(cls, predictions, cam: CameraModel, images=None, gauge_pose: Pose | None = None):
        """Build from ``PairPrediction`` objects; edges with fewer than 3 valid pixels are dropped.

        Images without any usable edge are listed in ``excluded``.
        """
        preds = [p for p in predictions if int(p.valid[..., 1].sum()) >= MIN_EDGE_POINTS]
        touched = sorted({f for p in preds for f in p.pair})
        wanted = sorted(set(images)) if images is not None else touched
        excluded = [f for f in wanted if f not in touched]
        used = [f for f in wanted if f in touched]
        index = {f: j for j, f in enumerate(used)}
        edges = [edge_data(p, cam, index[p.pair[0]], index[p.pair[1]]) for p in preds
                 if p.pair[0] in index and p.pair[1] in index]
        return cls(used, edges, cam, gauge_pose or Pose.identity(), excluded)

    def components(self) -> list[list]:
        comps = connected_components(len(self.images), [(e.i, e.k) for e in self.edges])
        return [[self.images[j] for j in c] for c in comps]

    def check_connected(self):
        if not self.edges:
            raise AlignError("alignment problem has no usable edges")
        comps = self.components()
        if len(comps) > 1:
            raise AlignError(f"edge graph is disconnected; components: {comps}")


@dataclass
class State:
    """Per-image variables: log-scales (n,), rotations (n, 3, 3), translations (n, 3)."""
    log_sigma: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def copy(self) -> "State":
        return State(self.log_sigma.copy(), self.R.copy(), self.t.copy())

    def retract(self, delta: np.ndarray, free: np.ndarray) -> "State":
        """Apply ``[d log_sigma, d rot (left axis-angle), d t]`` rows to the free images."""
        out = self.copy()
        for row, m in zip(delta.reshape(-1, 7), free):
            out.log_sigma[m] += row[0]
            out.R[m] = orthonormalize(so3_exp(row[1:4]) @ self.R[m])
            out.t[m] += row[4:7]
        return out

    @classmethod
    def from_poses(cls, poses, sigmas) -> "State":
        return cls(np.log(np.asarray(sigmas, dtype=float)),
                   np.array([p.rotation for p in poses]), np.array([p.translation for p in poses]))

    def pose(self, m: int) -> Pose:
        return Pose(self.R[m].copy(), self.t[m].copy())

    def sigma(self, m: int) -> float:
        return float(np.exp(self.log_sigma[m]))


def energy(problem: AlignProblem, state: State, squared: bool = True, with_grad: bool = False):
    """Energy and, optionally, its gradient as (n, 7) rows ``[d log_sigma, d rot, d t]``."""
    n = len(problem.images)
    E = 0.0
    G = np.zeros((n, 7)) if with_grad else None
    s = np.exp(-state.log_sigma)
    for e in problem.edges:
        uk = (e.a @ state.R[e.k].T) * s[e.k]
        ui = (e.b @ state.R[e.i].T) * s[e.i]
        r = uk + state.t[e.k] - ui - state.t[e.i]
        nr2 = np.einsum("ij,ij->i", r, r)
        if squared:
            E += float(np.dot(e.q, nr2))
            g = 2.0 * e.q
        else:
            nr = np.sqrt(nr2)
            E += float(np.dot(e.q, nr))
            g = np.where(nr > 0, e.q / np.where(nr > 0, nr, 1.0), 0.0)
        if with_grad:
            gr = g[:, None] * r
            sum_gr = gr.sum(0)
            G[e.k, 0] -= np.einsum("ij,ij->", gr, uk)
            G[e.i, 0] += np.einsum("ij,ij->", gr, ui)
            G[e.k, 1:4] += np.cross(uk, gr).sum(0)
            G[e.i, 1:4] -= np.cross(ui, gr).sum(0)
            G[e.k, 4:7] += sum_gr
            G[e.i, 4:7] -= sum_gr
    return (E, G) if with_grad else E


def umeyama(src, dst, weights=None, with_scale: bool = False):
    """Weighted similarity ``dst ~ c R src + t``; returns ``(c, R, t)``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    ms, md = w @ src, w @ dst
    xs, xd = src - ms, dst - md
    C = (xd * w[:, None]).T @ xs
    U, S, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    c = float(np.trace(np.diag(S) @ D) / (w @ np.sum(xs ** 2, axis=1))) if with_scale else 1.0
    return c, R, md - c * R @ ms


def initial_state(problem: AlignProblem) -> State:
    """Chain edge relative poses along a BFS spanning tree from image 0; all sigma = 1.

    Stronger edges (more total confidence) are preferred when several reach
    the same image in the same BFS layer.
    """
    n = len(problem.images)
    R = np.tile(np.eye(3), (n, 1, 1))
    t = np.zeros((n, 3))
    R[0] = problem.gauge_pose.rotation
    t[0] = problem.gauge_pose.translation
    adj = [[] for _ in range(n)]
    for e in sorted(problem.edges, key=lambda e: -float(e.q.sum())):
        adj[e.i].append(e)
        adj[e.k].append(e)
    done = [False] * n
    done[0] = True
    queue = deque([0])
    while queue:
        m = queue.popleft()
        for e in adj[m]:
            other = e.k if e.i == m else e.i
            if done[other]:
                continue
            # b ~ Q a + c maps camera k into camera i
            _, Q, c = umeyama(e.a, e.b, e.q)
            if e.i == m:
                R[e.k] = orthonormalize(R[m] @ Q)
                t[e.k] = t[m] + R[m] @ c
            else:
                R[e.i] = orthonormalize(R[m] @ Q.T)
                t[e.i] = t[m] - R[e.i] @ c
            done[other] = True
            queue.append(other)
    return State(np.zeros(n), R, t)


@dataclass
class AlignResult:
    images: list
    poses: dict          # frame_id -> Pose
    sigmas: dict         # frame_id -> float
    residual: float
    iterations: int
    status: str
    energy_history: list
    excluded: list = field(default_factory=list)
    state: State | None = None


def _lbfgs_direction(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def global_align(problem: AlignProblem, opts: AlignOptions | None = None, init: State | None = None) -> AlignResult:
    """Minimise the pointmap consistency energy over all non-gauge images.

    Limited-memory quasi-Newton directions built from gradients only, with
    backtracking (halving) until the Armijo condition holds; the energy is
    checked to be non-increasing at every accepted step.
    """
    opts = opts or AlignOptions()
    problem.check_connected()
    n = len(problem.images)
    state = init.copy() if init is not None else initial_state(problem)
    state.log_sigma[0] = 0.0
    state.R[0] = problem.gauge_pose.rotation
    state.t[0] = problem.gauge_pose.translation
    free = np.arange(1, n)

    E, G = energy(problem, state, opts.squared, with_grad=True)
    if not np.isfinite(E):
        raise AlignError("diverged: non-finite residual at initialisation")
    history = [E]
    mem = []
    status = "max_iters"
    it = 0
    g = G[free].ravel()
    while it < opts.max_iters:
        if len(free) == 0 or np.linalg.norm(g) < opts.grad_tol:
            status = "grad_tol"
            break
        d = _lbfgs_direction(g, mem)
        slope = float(np.dot(g, d))
        if not mem or slope >= 0:
            mem.clear()
            d = -g * (0.1 / max(np.linalg.norm(g), 1e-300)) if not mem else -g
            slope = float(np.dot(g, d))
        alpha = 1.0
        accepted = False
        while alpha * np.linalg.norm(d) >= opts.step_tol:
            cand = state.retract(alpha * d, free)
            E_new = energy(problem, cand, opts.squared)
            if not np.isfinite(E_new):
                raise AlignError("diverged: non-finite residual")
            if E_new <= E + opts.armijo * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "step_tol"
            break
        E_new, G_new = energy(problem, cand, opts.squared, with_grad=True)
        assert E_new <= E, "energy increased on an accepted step"
        g_new = G_new[free].ravel()
        s_vec, y_vec = alpha * d, g_new - g
        sy = float(np.dot(s_vec, y_vec))
        if sy > 1e-300:
            mem.append((s_vec, y_vec, 1.0 / sy))
            if len(mem) > opts.memory:
                mem.pop(0)
        state, E, g = cand, E_new, g_new
        history.append(E)
        it += 1
        if np.linalg.norm(s_vec) < opts.step_tol:
            status = "step_tol"
            break
    log.debug("global_align: %s after %d iterations, E = %.3e", status, it, E)
    return AlignResult(list(problem.images), {f: state.pose(j) for j, f in enumerate(problem.images)},
                       {f: state.sigma(j) for j, f in enumerate(problem.images)}, E, it, status,
                       history, list(problem.excluded), state)


@dataclass
class WorldPointCloud:
    xyz: np.ndarray          # (n, 3)
    rgb: np.ndarray          # (n, 3) in [0, 1]
    confidence: np.ndarray   # (n,)
    source: np.ndarray       # (n, 2): frame_id, flat pixel index

    def __len__(self):
        return len(self.xyz)


def voxel_downsample(xyz, confidence, voxel: float) -> np.ndarray:
    """Indices (ascending) of the highest-confidence point per voxel; earlier points win ties."""
    if voxel <= 0 or len(xyz) == 0:
        return np.arange(len(xyz))
    keys = np.floor(np.asarray(xyz) / voxel).astype(np.int64)
    order = np.lexsort((np.arange(len(xyz)), -np.asarray(confidence)))
    _, first = np.unique(keys[order], axis=0, return_index=True)
    return np.sort(order[first])


def merge_pointclouds(result: AlignResult, predictions, rgb_frames: dict, cam: CameraModel,
                      voxel_downsample_size: float = 0.0) -> WorldPointCloud:
    """One world point per (image, pixel): the most confident prediction of that pixel.

    Points are back-projected from each image's own depth, mapped by its
    ``(sigma, pose)``, coloured from its RGB frame and optionally voxel-deduplicated.
    """
    best = {}
    for pred in sorted(predictions, key=lambda p: tuple(p.pair)):
        for ch, fid, depth in ((0, pred.pair[0], pred.depth_i), (1, pred.pair[1], pred.depth_k)):
            if fid not in result.poses:
                continue
            conf = np.where(pred.valid[..., ch], pred.confidence[..., ch], -1.0)
            if fid not in best:
                best[fid] = (conf.copy(), np.where(pred.valid[..., ch], depth, 0.0))
            else:
                c0, d0 = best[fid]
                better = conf > c0
                best[fid] = (np.where(better, conf, c0), np.where(better, depth, d0))
    xyz, rgb, q, src = [], [], [], []
    for fid in sorted(best):
        conf, depth = best[fid]
        m = conf > 0
        if not m.any():
            continue
        pts = camera_points(depth, cam)[m]
        pose, sigma = result.poses[fid], result.sigmas[fid]
        xyz.append(pts @ pose.rotation.T / sigma + pose.translation)
        rgb.append(np.asarray(rgb_frames[fid], dtype=float)[m])
        q.append(conf[m])
        flat = np.flatnonzero(m.ravel())
        src.append(np.stack([np.full(len(flat), fid), flat], axis=1))
    if not xyz:
        return WorldPointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2), dtype=np.int64))
    cloud = WorldPointCloud(np.concatenate(xyz), np.concatenate(rgb), np.concatenate(q),
                            np.concatenate(src).astype(np.int64))
    keep = voxel_downsample(cloud.xyz, cloud.confidence, voxel_downsample_size)
    return WorldPointCloud(cloud.xyz[keep], cloud.rgb[keep], cloud.confidence[keep], cloud.source[keep])
