import numpy as np
import pytest

from exploregs.geometry import CameraModel, Pose
from exploregs.simworld import GroundTruthFrame, build_world, raycast_rgbd


@pytest.fixture(scope="session")
def room():
    return build_world()


@pytest.fixture(scope="session")
def cam():
    return CameraModel.centered(128, 96, 64.0)


def frames_at(scene, cam, poses, t0=0.0):
    out = []
    for j, pose in enumerate(poses):
        rgb, depth = raycast_rgbd(scene, pose, cam)
        out.append(GroundTruthFrame(j, rgb, depth, pose, t0 + j))
    return out


def ring_poses(n=6, center=(1.5, 1.5, 1.4), radius=0.3):
    """Cameras on a small loop in the default room, each turned a little further."""
    c = np.asarray(center, dtype=float)
    return [Pose.from_yaw(c + radius * np.array([np.cos(j), np.sin(j), 0.1 * j - 0.2]), 0.5 * j)
            for j in range(n)]


@pytest.fixture(scope="session")
def ring_frames(room, cam):
    return frames_at(room, cam, ring_poses())


def ring_pairs(n=6):
    """Consecutive pairs plus one skip edge (views 0 and 5 do not overlap)."""
    return [(j, j + 1) for j in range(n - 1)] + [(0, 2)]


@pytest.fixture(scope="session")
def ring_predictions(room, cam, ring_frames):
    from exploregs.twoview import OracleBackend
    backend = OracleBackend(room, cam)
    return [backend.infer(ring_frames[i], ring_frames[k]) for i, k in ring_pairs(len(ring_frames))]


def perturbed_state(state, seed=0, angle_deg=5.0, shift=0.2, scale=1.2):
    """Rotate every non-gauge image by ``angle_deg`` about a random axis, shift it by ``shift`` m, rescale."""
    from exploregs.geometry import so3_exp
    rng = np.random.default_rng(seed)
    out = state.copy()
    for m in range(1, len(out.t)):
        ax = rng.normal(size=3)
        out.R[m] = so3_exp(np.deg2rad(angle_deg) * ax / np.linalg.norm(ax)) @ out.R[m]
        dt = rng.normal(size=3)
        out.t[m] += shift * dt / np.linalg.norm(dt)
        out.log_sigma[m] = np.log(scale)
    return out


def fd_gradient(problem, state, h=1e-6, squared=True):
    """Central differences of the energy along every retraction coordinate, (n, 7)."""
    from exploregs.align import energy
    n = len(state.t)
    free = np.arange(n)
    out = np.zeros((n, 7))
    for j in range(7 * n):
        d = np.zeros(7 * n)
        d[j] = h
        out.flat[j] = (energy(problem, state.retract(d, free), squared)
                       - energy(problem, state.retract(-d, free), squared)) / (2 * h)
    return out


def small_problem(room, sigma=0.01):
    """Three 16x16 views joined by two noisy edges."""
    from exploregs.align import AlignProblem
    from exploregs.twoview import OracleBackend
    cam = CameraModel.centered(16, 16, 8.0)
    frames = frames_at(room, cam, ring_poses(3))
    backend = OracleBackend(room, cam, sigma=sigma, seed=1)
    preds = [backend.infer(frames[0], frames[1]), backend.infer(frames[1], frames[2])]
    return AlignProblem.from_predictions(preds, cam, gauge_pose=frames[0].pose), frames


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """One default end-to-end run, shared by the pipeline, CLI and acceptance tests."""
    from exploregs.config import PipelineConfig
    from exploregs.pipeline import run_pipeline
    out = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig()
    return run_pipeline(cfg, out), out, cfg
