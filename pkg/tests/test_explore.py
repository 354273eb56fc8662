import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from exploregs.explore import (FREE, OCCUPIED, UNKNOWN, ExplorationConfig, Explorer, MotionGraph, OccupancyGrid,
                               Viewpoint, build_tsp_matrix, cluster_frontiers, detect_frontiers, generate_viewpoints,
                               integrate_depth, nearest_neighbor, path_cost, plan_path, plan_trajectory, read_grid,
                               sample_trajectory, score_viewpoint, solve_atsp, write_grid)
from exploregs.explore.tsp import travel_cost
from exploregs.explore.viewpoints import facing_yaw, frustum_mask
from exploregs.geometry import CameraModel, Pose
from exploregs.simworld import GroundTruthFrame, build_world

SIX = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def brute_frontiers(states):
    out = []
    for c in itertools.product(*map(range, states.shape)):
        if states[c] != FREE:
            continue
        for d in SIX:
            n = tuple(np.add(c, d))
            if all(0 <= n[i] < states.shape[i] for i in range(3)) and states[n] == UNKNOWN:
                out.append(c)
                break
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def one_pixel_frame(pos, depth):
    cam = CameraModel(1, 1, 1.0, 1.0, 0.0, 0.0)
    return cam, GroundTruthFrame(0, np.zeros((1, 1, 3)), np.array([[depth]]), Pose.from_yaw(pos, 0.0), 0.0)


def test_integrate_single_ray():
    grid = OccupancyGrid((16, 3, 3), 0.25)
    cam, fr = one_pixel_frame([0.125, 0.375, 0.375], 2.0)
    out = integrate_depth(grid, fr, cam, 5.0)
    row = out.states[:, 1, 1]
    # camera cell, 7 free cells in front of it, then the hit cell
    assert list(row[:10]) == [FREE] * 8 + [OCCUPIED, UNKNOWN]
    assert out.count(FREE) == 8 and out.count(OCCUPIED) == 1
    assert grid.count(UNKNOWN) == grid.states.size  # input untouched


def test_integrate_no_hit_and_idempotence():
    grid = OccupancyGrid((16, 3, 3), 0.25)
    cam, fr = one_pixel_frame([0.125, 0.375, 0.375], 0.0)
    out = integrate_depth(grid, fr, cam, 1.0)
    assert out.count(OCCUPIED) == 0
    assert list(out.states[:7, 1, 1]) == [FREE] * 5 + [UNKNOWN] * 2
    cam, fr = one_pixel_frame([0.125, 0.375, 0.375], 2.0)
    once = integrate_depth(grid, fr, cam, 5.0)
    assert np.array_equal(once.states, integrate_depth(once, fr, cam, 5.0).states)


def test_integrate_outside_grid():
    grid = OccupancyGrid((4, 4, 4), 0.25)
    cam, fr = one_pixel_frame([5.0, 0.3, 0.3], 1.0)
    with pytest.raises(ValueError):
        integrate_depth(grid, fr, cam, 5.0)


def test_frontier_small_cases():
    assert len(detect_frontiers(OccupancyGrid((4, 4, 4), 1.0))) == 0
    g = OccupancyGrid((3, 3, 3), 1.0)
    g.states[1, 1, 1] = FREE
    assert detect_frontiers(g).tolist() == [[1, 1, 1]]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), p=st.floats(0.05, 0.9))
def test_frontiers_match_brute_force(seed, p):
    rng = np.random.default_rng(seed)
    states = rng.choice([UNKNOWN, FREE, OCCUPIED], size=(6, 7, 5), p=[p * 0.5, 1 - p, p * 0.5]).astype(np.uint8)
    g = OccupancyGrid(states.shape, 0.25, states=states)
    assert np.array_equal(detect_frontiers(g), brute_frontiers(states))


def test_cluster_rules():
    g = OccupancyGrid((12, 12, 12), 0.25)
    blob_a = np.array([[1, 1, 1], [1, 2, 1], [2, 1, 1], [2, 2, 1]])
    blob_b = blob_a + [6, 6, 6]
    tiny = np.array([[10, 1, 10], [10, 2, 10]])
    cl = cluster_frontiers(np.vstack([blob_a, blob_b, tiny]), 3, g)
    assert len(cl) == 2
    patch = np.array([[i, j, 5] for i in range(5) for j in range(5)])
    (c,) = cluster_frontiers(patch, 3, g)
    assert c.eigenvalues[2] < 1e-9
    assert abs(abs(c.normal[2]) - 1.0) < 1e-9


def wall_grid():
    """Closed box, explored up to a flat frontier at x = 7; unknown beyond it."""
    g = OccupancyGrid((12, 12, 12), 0.25)
    g.states[:] = OCCUPIED
    g.states[1:8, 1:11, 1:11] = FREE
    g.states[8:11, 1:11, 1:11] = UNKNOWN
    return g


def test_wall_frontier_gives_one_viewpoint_facing_it():
    g = wall_grid()
    cfg = ExplorationConfig()
    clusters = cluster_frontiers(detect_frontiers(g), 5, g)
    plane = [c for c in clusters if np.allclose(np.abs(c.normal), [1, 0, 0], atol=1e-9)]
    assert plane
    vps = generate_viewpoints(plane[0], g, cfg)
    assert len(vps) == 1
    assert vps[0].position[0] < plane[0].centroid[0]
    assert abs(vps[0].yaw) < 1e-9


def test_viewpoint_blocked_both_sides():
    g = wall_grid()
    cluster = [c for c in cluster_frontiers(detect_frontiers(g), 5, g)
               if np.allclose(np.abs(c.normal), [1, 0, 0], atol=1e-9)][0]
    g.states[g.states == FREE] = OCCUPIED
    g.states[7] = FREE
    assert generate_viewpoints(cluster, g, ExplorationConfig()) == []


def test_facing_yaw():
    assert abs(facing_yaw([0, -2, 0], [0, 0, 0]) - np.pi / 2) < 1e-15


def test_score_known_free_space_and_wider_frustum():
    cfg = ExplorationConfig()
    g = OccupancyGrid((12, 12, 12), 0.25)
    g.states[:] = FREE
    vp = Viewpoint(np.array([1.5, 1.5, 1.5]), 0.3)
    assert score_viewpoint(g, vp, cfg, CameraModel.centered(64, 48, 32.0)) == 0.0
    g.states[8:, :, :] = UNKNOWN
    narrow = score_viewpoint(g, vp, cfg, CameraModel.centered(64, 48, 64.0))
    wide = score_viewpoint(g, vp, cfg, CameraModel.centered(64, 48, 20.0))
    assert 0 < narrow <= wide


def test_score_matches_per_cell_count_without_occluders():
    cfg = ExplorationConfig(sensor_max_range=1.5)
    cam = CameraModel.centered(32, 24, 16.0)
    rng = np.random.default_rng(5)
    g = OccupancyGrid((10, 10, 6), 0.25)
    g.states[:] = rng.choice([UNKNOWN, FREE], size=g.dims)
    vp = Viewpoint(np.array([1.3, 1.2, 0.8]), 0.9)
    count = 0
    for c in np.argwhere(g.states == UNKNOWN):
        p = (c + 0.5) * 0.25
        pc = (p - vp.position) @ vp.pose.rotation
        if pc[2] <= 0 or np.linalg.norm(pc) > 1.5:
            continue
        u, v = 16.0 * pc[0] / pc[2] + cam.cx, 16.0 * pc[1] / pc[2] + cam.cy
        count += (-0.5 <= u <= 31.5) and (-0.5 <= v <= 23.5)
    assert score_viewpoint(g, vp, cfg, cam) == count


def test_travel_cost_examples():
    cfg = ExplorationConfig()
    assert travel_cost(0.0, 0.0, cfg) == 0.0
    assert travel_cost(2.0, 1.0, cfg) == 2.0
    assert travel_cost(0.5, np.pi, cfg) == np.pi


def test_tsp_matrix_properties():
    s = build_world()
    g = OccupancyGrid.like(s)
    g.states[s.free_interior()] = FREE
    g.states[s.solid] = OCCUPIED
    cfg = ExplorationConfig()
    nodes = [Viewpoint(np.array(p), y) for p, y in
             [((0.6, 0.6, 1.0), 0.0), ((2.2, 0.6, 1.0), 3.0), ((2.2, 2.2, 1.5), -2.0), ((0.6, 2.0, 2.0), 1.0)]]
    M, unreachable = build_tsp_matrix(nodes[0], nodes[1:], g, cfg)
    assert unreachable == []
    assert np.all(np.diag(M) == 0) and np.all(M >= 0)
    assert np.all(M[1:, 0] == 0)
    assert solve_atsp(M)[0] == 0


def brute_open_path(M):
    n = len(M)
    return min(path_cost(M, (0,) + p) for p in itertools.permutations(range(1, n)))


def test_atsp_small_cases():
    assert solve_atsp(np.array([[0.0, 3.0], [0.0, 0.0]])) == [0, 1]
    pts = np.array([0.0, 1.0, 2.0])
    M = np.abs(pts[:, None] - pts[None, :])
    assert solve_atsp(M, "exact") == [0, 1, 2]
    assert solve_atsp(M, "heuristic") == [0, 1, 2]
    assert solve_atsp(np.zeros((1, 1))) == [0]
    assert solve_atsp(np.array([[0.0, np.inf], [1.0, 0.0]])) == [0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(2, 8))
def test_atsp_exact_and_heuristic(seed, n):
    M = np.random.default_rng(seed).uniform(0, 10, (n, n))
    np.fill_diagonal(M, 0)
    best = brute_open_path(M)
    exact = solve_atsp(M, "exact")
    heur = solve_atsp(M, "heuristic")
    assert sorted(exact) == list(range(n)) and sorted(heur) == list(range(n))
    assert abs(path_cost(M, exact) - best) < 1e-12
    assert path_cost(M, heur) >= best - 1e-12
    assert path_cost(M, heur) <= path_cost(M, nearest_neighbor(M)) + 1e-12


def test_plan_path_trivial_and_corridor():
    g = OccupancyGrid((24, 3, 3), 0.25)
    g.states[:] = OCCUPIED
    g.states[1:23, 1, 1] = FREE
    a = np.array([0.375, 0.375, 0.375])
    path, length = plan_path(g, a, a)
    assert length == 0.0 and len(path) == 1
    _, length = plan_path(g, a, a + [4.0, 0.0, 0.0])
    assert abs(length - 4.0) <= 0.25


def dijkstra_length(g, a, b):
    graph = MotionGraph(g)
    cells = [tuple(c) for c in np.argwhere(graph.free)]
    index = {c: j for j, c in enumerate(cells)}
    rows, cols, vals = [], [], []
    for c in cells:
        for nb, w in graph.neighbors(c):
            rows.append(index[c])
            cols.append(index[nb])
            vals.append(w)
    A = csr_matrix((vals, (rows, cols)), shape=(len(cells), len(cells)))
    d = dijkstra(A, indices=index[tuple(g.cell_of(a))])
    return d[index[tuple(g.cell_of(b))]] * g.voxel_size


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_astar_matches_dijkstra(seed):
    rng = np.random.default_rng(seed)
    g = OccupancyGrid((9, 9, 3), 0.25)
    g.states[:] = np.where(rng.random(g.dims) < 0.25, OCCUPIED, FREE)
    free = np.argwhere(g.states == FREE)
    a, b = (free[rng.choice(len(free), 2, replace=False)] + 0.5) * 0.25
    ref = dijkstra_length(g, a, b)
    graph = MotionGraph(g)
    if not np.isfinite(ref):
        with pytest.raises(RuntimeError):
            graph.astar(g.cell_of(a), g.cell_of(b))
        return
    _, raw = graph.astar(g.cell_of(a), g.cell_of(b))
    assert abs(raw - ref) < 1e-9


def test_trajectory_durations():
    cfg = ExplorationConfig()
    t = plan_trajectory([(np.zeros(3), 0.0), (np.array([2.0, 0, 0]), 0.0)], cfg)
    assert t[-1].time == 2.0
    t = plan_trajectory([(np.zeros(3), 0.0), (np.array([0.5, 0, 0]), np.pi)], cfg)
    assert abs(t[-1].time - np.pi) < 1e-12
    t = plan_trajectory([(np.zeros(3), 3.0), (np.ones(3), -3.0), (2 * np.ones(3), 3.0)], cfg)
    yaws = [p.yaw for p in t]
    assert max(abs(np.diff(yaws))) < np.pi


def test_known_grid_terminates_immediately():
    s = build_world()
    g = OccupancyGrid.like(s)
    g.states[:] = FREE
    g.states[s.solid] = OCCUPIED
    ex = Explorer(s, CameraModel.centered(64, 48, 32.0), grid=g)
    assert list(ex.run()) == [] and ex.status == "complete"


def test_grid_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    g = OccupancyGrid((5, 6, 7), 0.3, np.array([0.1, -0.2, 0.5]))
    g.states[:] = rng.integers(0, 3, g.dims)
    write_grid(tmp_path / "grid.bin", g)
    h = read_grid(tmp_path / "grid.bin")
    assert h.dims == g.dims and h.voxel_size == g.voxel_size
    assert np.array_equal(h.origin, g.origin) and np.array_equal(h.states, g.states)


@pytest.fixture(scope="module")
def explored():
    s = build_world()
    ex = Explorer(s, CameraModel.centered(128, 96, 64.0))
    frames = list(ex.run())
    return s, ex.result(frames)


def test_unknown_count_never_increases(explored):
    _, res = explored
    assert np.all(np.diff(res.unknown_history) <= 0)


def test_exploration_deterministic(explored):
    s, res = explored
    ex = Explorer(s, CameraModel.centered(128, 96, 64.0))
    frames = list(ex.run())
    again = ex.result(frames)
    assert len(again.trajectory) == len(res.trajectory)
    for a, b in zip(again.trajectory, res.trajectory):
        assert a.time == b.time and a.yaw == b.yaw and np.array_equal(a.position, b.position)


def test_frames_in_frustum_mask_helper():
    pose = Pose.from_yaw([0.0, 0.0, 0.0], 0.0)
    cam = CameraModel.centered(32, 32, 16.0)
    m = frustum_mask(np.array([[1.0, 0, 0], [-1.0, 0, 0], [10.0, 0, 0]]), pose, cam, 5.0)
    assert m.tolist() == [True, False, False]


def test_sampled_trajectory_hits_waypoints():
    cfg = ExplorationConfig()
    t = plan_trajectory([(np.zeros(3), 0.0), (np.array([1.0, 0, 0]), 0.0)], cfg)
    pos, yaw = sample_trajectory(t, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(pos[:, 0], [0.0, 0.5, 1.0])
