"""Viewpoint ordering as an open asymmetric TSP starting at the current pose."""

from __future__ import annotations

import numpy as np

from ..geometry import yaw_difference
from .planning import MotionGraph, UnreachableError, plan_path

EXACT_LIMIT = 10
_EPS = 1e-12


def travel_cost(dis: float, dyaw: float, cfg) -> float:
    """Time to move between two viewpoints: the slower of translation and rotation."""
    return max(dis / cfg.v_max, dyaw / cfg.yaw_max)


def build_tsp_matrix(current, candidates, grid, cfg, graph: MotionGraph | None = None):
    """Cost matrix over ``[current] + candidates``.

    Returns ``(M, unreachable)`` where ``unreachable`` lists candidate indices
    (into ``candidates``) with no free path; their rows and columns are +inf.
    Column 0 is zero so the tour is open (no return to the start).
    """
    nodes = [current] + list(candidates)
    n = len(nodes)
    graph = graph or MotionGraph(grid)
    dis = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            try:
                _, length = plan_path(grid, nodes[a].position, nodes[b].position, graph)
            except UnreachableError:
                length = np.inf
            dis[a, b] = dis[b, a] = length
    M = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                M[a, b] = travel_cost(dis[a, b], yaw_difference(nodes[a].yaw, nodes[b].yaw), cfg)
    unreachable = [j - 1 for j in range(1, n) if not np.isfinite(dis[0, j])]
    for j in unreachable:
        M[j + 1, :] = np.inf
        M[:, j + 1] = np.inf
        M[j + 1, j + 1] = 0.0
    M[1:, 0] = np.where(np.isfinite(M[1:, 0]), 0.0, np.inf)
    return M, unreachable


def path_cost(M, path) -> float:
    return float(sum(M[a, b] for a, b in zip(path[:-1], path[1:])))


def held_karp(M) -> list[int]:
    """Exact minimum-cost open path from node 0 through every other node."""
    M = np.asarray(M, dtype=float)
    n = len(M)
    if n <= 2:
        return list(range(n))
    m = n - 1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    C = M[1:, 1:]
    for j in range(m):
        dp[1 << j, j] = M[0, j + 1]
    bits = np.array([1 << j for j in range(m)])
    for mask in range(1, full):
        row = dp[mask]
        if not np.isfinite(row).any():
            continue
        # cand[i, j] = cost of ending at i then stepping to j
        cand = row[:, None] + C
        best_i = np.argmin(cand, axis=0)
        best = cand[best_i, np.arange(m)]
        for j in np.flatnonzero((mask & bits) == 0):
            nm = mask | bits[j]
            if best[j] < dp[nm, j] - _EPS:
                dp[nm, j] = best[j]
                parent[nm, j] = best_i[j]
    last = int(np.argmin(dp[full - 1]))
    path = []
    mask = full - 1
    while last >= 0:
        path.append(last + 1)
        prev = parent[mask, last]
        mask ^= 1 << last
        last = int(prev)
    return [0] + path[::-1]


def nearest_neighbor(M) -> list[int]:
    n = len(M)
    path = [0]
    left = list(range(1, n))
    while left:
        costs = [M[path[-1], j] for j in left]
        k = int(np.argmin(costs))
        path.append(left.pop(k))
    return path


def _best_move(M, path):
    """Best improving 2-opt or or-opt move on an open path fixed at node 0."""
    n = len(path)
    base = path_cost(M, path)
    best_gain, best_path = _EPS, None
    # 2-opt: reverse path[i:j+1]
    for i in range(1, n - 1):
        for j in range(i + 1, n):
            cand = path[:i] + path[i:j + 1][::-1] + path[j + 1:]
            gain = base - path_cost(M, cand)
            if gain > best_gain:
                best_gain, best_path = gain, cand
    # or-opt: move a segment of 1-3 nodes elsewhere
    for seg in (1, 2, 3):
        for i in range(1, n - seg + 1):
            segment = path[i:i + seg]
            rest = path[:i] + path[i + seg:]
            for k in range(1, len(rest) + 1):
                if k == i:
                    continue
                cand = rest[:k] + segment + rest[k:]
                gain = base - path_cost(M, cand)
                if gain > best_gain:
                    best_gain, best_path = gain, cand
    return best_path


def local_search(M, path) -> list[int]:
    path = list(path)
    while True:
        nxt = _best_move(M, path)
        if nxt is None:
            return path
        path = nxt


def solve_atsp(M, method: str = "auto") -> list[int]:
    """Open tour from node 0 over every node reachable from it (just ``[0]`` if there is none).

    ``method``: ``"exact"`` (Held-Karp), ``"heuristic"`` (nearest neighbour then
    2-opt / or-opt to a local optimum) or ``"auto"`` (exact up to 10 nodes).
    Returned indices refer to the input matrix.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
        raise ValueError("cost matrix must be square and nonempty")
    keep = [0] + [j for j in range(1, len(M)) if np.isfinite(M[0, j])]
    if len(keep) == 1:
        return [0]
    sub = M[np.ix_(keep, keep)]
    if method == "auto":
        method = "exact" if len(keep) <= EXACT_LIMIT else "heuristic"
    if method == "exact":
        order = held_karp(sub)
    elif method == "heuristic":
        order = local_search(sub, nearest_neighbor(sub))
    elif method == "nearest":
        order = nearest_neighbor(sub)
    else:
        raise ValueError(f"unknown method {method!r}")
    return [keep[i] for i in order]
