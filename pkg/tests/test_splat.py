import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exploregs.geometry import CameraModel, Pose, so3_exp
from exploregs.splat import (ALPHA_MAX, COV2D_FLOOR, SH_C0, SplatScene, eval_gaussian, init_gaussians, mean_color_baseline,
                             project_splat, psnr, read_scene, render, render_with_alpha, rgb_to_sh, sh_to_rgb,
                             write_scene)

CAM32 = CameraModel.centered(32, 32, 32.0)


def make_scene(means, scales, opacity, rgb, quats=None):
    means = np.asarray(means, dtype=float)
    n = len(means)
    scales = np.broadcast_to(np.asarray(scales, dtype=float).reshape(-1, 1) if np.ndim(scales) <= 1 else scales,
                             (n, 3)).astype(float)
    quats = np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else np.asarray(quats, dtype=float)
    return SplatScene(means, scales.copy(), quats, np.asarray(opacity, dtype=float), rgb_to_sh(rgb))


def random_scene(rng, n=10):
    means = np.column_stack([rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n), rng.uniform(1.0, 3.0, n)])
    scales = rng.uniform(0.02, 0.2, (n, 3))
    quats = rng.normal(size=(n, 4))
    return make_scene(means, scales, rng.uniform(0.1, 1.0, n), rng.random((n, 3)), quats)


def naive_render(scene, cam, pose):
    """Every splat at every pixel, no culling, no early stop."""
    H, W = cam.height, cam.width
    proj = []
    for j in range(len(scene)):
        p = project_splat(scene.means[j], scene.covariances[j], cam, pose)
        if p is not None:
            proj.append((p[2], j, p[0], np.linalg.inv(p[1])))
    proj.sort(key=lambda x: (x[0], x[1]))
    out = np.zeros((H, W, 3))
    for v in range(H):
        for u in range(W):
            T = 1.0
            for _, j, m, inv in proj:
                d = np.array([u, v]) - m
                a = min(scene.opacity[j] * np.exp(-0.5 * d @ inv @ d), ALPHA_MAX)
                out[v, u] += T * a * scene.colors[j]
                T *= 1 - a
    return out


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_render_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng)
    pose = Pose(so3_exp(rng.normal(0, 0.05, 3)), rng.normal(0, 0.05, 3))
    assert np.abs(render(scene, CAM32, pose) - naive_render(scene, CAM32, pose)).max() <= 2e-4


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_accumulated_alpha_at_most_one(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 30)
    scene.opacity[:] = 1.0
    _, A = render_with_alpha(scene, CAM32, Pose.identity())
    assert A.max() <= 1.0 and A.min() >= 0.0


def test_single_splat_peak_colour():
    scene = make_scene([[0.0, 0.0, 2.0]], 0.05, [1.0], [[0.2, 0.4, 0.6]])
    img = render(scene, CAM32, Pose.identity())
    np.testing.assert_allclose(img[16, 16], ALPHA_MAX * np.array([0.2, 0.4, 0.6]), rtol=1e-12)


def test_two_splats_half_and_half():
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    scene = make_scene([[0.0, 0.0, 3.0], [0.0, 0.0, 1.0]], 0.05, [1.0, 0.5], [c2, c1])
    img = render(scene, CAM32, Pose.identity())
    # back alpha is capped, so its share is 0.5 * 0.999
    np.testing.assert_allclose(img[16, 16], 0.5 * c1 + 0.5 * ALPHA_MAX * c2, atol=1e-12)


def test_opaque_front_occludes_back():
    front = [[0.0, 0.0, 1.0]], [0.3], [1.0], [[1.0, 0, 0]]
    scene = make_scene([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]], [0.3, 0.1], [1.0, 1.0], [[1.0, 0, 0], [0, 1.0, 0]])
    img = render(scene, CAM32, Pose.identity())
    alone = render(make_scene(*front), CAM32, Pose.identity())
    shared = alone[..., 0] >= ALPHA_MAX - 1e-12     # pixels where the front splat is opaque
    assert shared.sum() >= 1
    assert np.all(img[shared, 1] < 0.002 * img[shared, 0])


def test_order_independent_when_disjoint():
    rng = np.random.default_rng(3)
    means = [[-0.3, -0.3, 2.0], [0.3, -0.3, 2.5], [-0.3, 0.3, 1.5], [0.3, 0.3, 2.0]]
    scene = make_scene(means, 0.02, rng.uniform(0.3, 1, 4), rng.random((4, 3)))
    perm = [2, 0, 3, 1]
    other = SplatScene(scene.means[perm], scene.scales[perm], scene.quats[perm], scene.opacity[perm], scene.sh[perm])
    np.testing.assert_array_equal(render(scene, CAM32, Pose.identity()), render(other, CAM32, Pose.identity()))


def test_background_fills_uncovered_pixels():
    scene = make_scene([[0.0, 0.0, 2.0]], 0.01, [0.5], [[1.0, 1.0, 1.0]])
    img = render(scene, CAM32, Pose.identity(), background=[0.1, 0.2, 0.3])
    np.testing.assert_allclose(img[0, 0], [0.1, 0.2, 0.3])


def test_on_axis_projection():
    f, s, z = 64.0, 0.05, 2.0
    cam = CameraModel.centered(128, 96, f)
    m2, c2, depth = project_splat([0, 0, z], s ** 2 * np.eye(3), cam, Pose.identity())
    np.testing.assert_allclose(m2, [64.0, 48.0])
    np.testing.assert_allclose(c2, ((f * s / z) ** 2 + COV2D_FLOOR) * np.eye(2), atol=1e-12)
    _, c2b, _ = project_splat([0, 0, 2 * z], s ** 2 * np.eye(3), cam, Pose.identity())
    np.testing.assert_allclose(c2b - COV2D_FLOOR * np.eye(2), (c2 - COV2D_FLOOR * np.eye(2)) / 4, atol=1e-12)
    assert project_splat([0, 0, -1.0], np.eye(3), cam, Pose.identity()) is None


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_projected_covariance_symmetric_pd(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    cov = A @ A.T + 1e-3 * np.eye(3)
    pose = Pose(so3_exp(rng.normal(0, 0.2, 3)), rng.normal(0, 0.1, 3))
    mean = pose.apply(np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(1, 4)]))
    _, c2, _ = project_splat(mean, cov, CAM32, pose)
    assert abs(c2[0, 1] - c2[1, 0]) <= 1e-12 * max(1.0, abs(c2).max())
    assert np.all(np.linalg.eigvalsh(c2) >= COV2D_FLOOR - 1e-9)


def test_eval_gaussian_values():
    peak = (2 * np.pi) ** -1.5
    assert eval_gaussian(np.zeros(3), np.eye(3), np.zeros(3)) == pytest.approx(peak, rel=1e-15)
    assert eval_gaussian(np.zeros(3), np.eye(3), [1.0, 0, 0]) == pytest.approx(peak * np.exp(-0.5), rel=1e-15)
    with pytest.raises(ValueError):
        eval_gaussian(np.zeros(3), np.diag([1.0, -1.0, 1.0]), np.zeros(3))


def test_eval_gaussian_integrates_to_one():
    rng = np.random.default_rng(0)
    R = so3_exp(rng.normal(size=3))
    cov = R @ np.diag([0.04, 0.09, 0.25]) @ R.T
    half = 6 * np.sqrt(np.diag(cov))
    n = 81
    axes = [np.linspace(-h, h, n) for h in half]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    dens = eval_gaussian(np.zeros(3), cov, X)
    cell = np.prod([a[1] - a[0] for a in axes])
    assert abs(dens.sum() * cell - 1.0) < 1e-3


def test_psnr_examples():
    a = np.full((4, 5, 3), 0.3)
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = np.random.default_rng(0).random(a.shape)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, a[:2])
    np.testing.assert_allclose(mean_color_baseline(b)[0, 0], b.reshape(-1, 3).mean(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_sh_roundtrip(rgb):
    np.testing.assert_allclose(sh_to_rgb(rgb_to_sh(rgb)), rgb, atol=1e-9)
    assert SH_C0 == pytest.approx(0.28209479177, abs=1e-11)


def test_init_single_point_and_grid():
    one = init_gaussians([[1.0, 2.0, 3.0]], [[0.5, 0.5, 0.5]], [0.01], 0.02)
    assert len(one) == 1
    np.testing.assert_allclose(one.covariances[0], 0.02 ** 2 * np.eye(3))
    assert one.opacity[0] == 0.05
    g = np.arange(7) * 0.03
    xyz = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    sc = init_gaussians(xyz, np.full_like(xyz, 0.5), np.full(len(xyz), 2.0), 0.02)
    interior = np.all((xyz > 0.01) & (xyz < 0.17), axis=1)
    np.testing.assert_allclose(sc.scales[interior], 0.03, rtol=1e-9)
    assert np.all(sc.opacity == 1.0)
    sparse = init_gaussians(xyz * 10, np.full_like(xyz, 0.5), np.ones(len(xyz)), 0.02)
    np.testing.assert_allclose(sparse.scales, 0.06)
    sc.check()
    with pytest.raises(ValueError):
        init_gaussians(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), 0.02)


def test_scene_roundtrip(tmp_path):
    scene = random_scene(np.random.default_rng(5), 12)
    write_scene(tmp_path / "s.egss", scene)
    back = read_scene(tmp_path / "s.egss")
    for name in ("means", "scales", "quats", "opacity", "sh"):
        np.testing.assert_array_equal(getattr(back, name), getattr(scene, name))
    (tmp_path / "bad.egss").write_bytes(b"EGSS\x05\x00\x00\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_scene(tmp_path / "bad.egss")
