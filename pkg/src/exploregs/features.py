"""FAST-16 corners and BRIEF-256 binary descriptors on 8-bit grayscale images."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

# radius-3 Bresenham circle, clockwise from the top, as (dx, dy)
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
ARC_LENGTH = 12
MIN_SIZE = 32
BOX_RADIUS = 2

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass(frozen=True)
class FeatureConfig:
    fast_threshold: int = 5
    max_keypoints: int = 500
    brief_window: int = 31
    brief_tests: int = 256
    pattern_seed: int = 0

    def __post_init__(self):
        if self.fast_threshold <= 0:
            raise ValueError("fast_threshold must be positive")
        if self.brief_window % 2 != 1:
            raise ValueError("brief_window must be odd")
        if self.brief_tests % 8 != 0:
            raise ValueError("brief_tests must be a multiple of 8")


class Keypoint(NamedTuple):
    x: int
    y: int
    score: float


def to_gray(rgb) -> np.ndarray:
    """Luma (0.299 R + 0.587 G + 0.114 B) of an RGB image in [0, 1], rounded to uint8."""
    rgb = np.asarray(rgb, dtype=float)
    luma = 255.0 * (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or min(img.shape) < MIN_SIZE:
        raise ValueError(f"grayscale image must be 2-D and at least {MIN_SIZE}x{MIN_SIZE}")
    return img.astype(np.int32)


def fast_corners(img, threshold: int):
    """Corner mask and arc score before non-maximum suppression.

    A pixel is a corner when at least 12 cyclically contiguous circle pixels
    are all brighter than ``I_p + t`` or all darker than ``I_p - t``.  Its score
    is the sum of ``|I - I_p|`` over that contiguous arc.  Pixels within 3 of
    the border are never corners.
    """
    I = _check_image(img)
    H, W = I.shape
    center = I[3:H - 3, 3:W - 3]
    ring = np.stack([I[3 + dy:H - 3 + dy, 3 + dx:W - 3 + dx] for dx, dy in CIRCLE])
    diff = np.abs(ring - center)
    score = np.zeros(center.shape)
    corner = np.zeros(center.shape, dtype=bool)
    for mask in (ring > center + threshold, ring < center - threshold):
        run = np.zeros(center.shape, dtype=np.int32)
        acc = np.zeros(center.shape, dtype=np.int64)
        best_run = np.zeros(center.shape, dtype=np.int32)
        best_sum = np.zeros(center.shape, dtype=np.int64)
        for k in range(32):
            m = mask[k % 16]
            run = np.where(m, run + 1, 0)
            acc = np.where(m, acc + diff[k % 16], 0)
            better = run > best_run
            best_run = np.where(better, run, best_run)
            best_sum = np.where(better, acc, best_sum)
        full = best_run >= 16
        best_sum = np.where(full, diff.sum(axis=0), best_sum)
        hit = best_run >= ARC_LENGTH
        corner |= hit
        score = np.where(hit, best_sum, score)
    out_mask = np.zeros((H, W), dtype=bool)
    out_score = np.zeros((H, W))
    out_mask[3:H - 3, 3:W - 3] = corner
    out_score[3:H - 3, 3:W - 3] = score
    return out_mask, out_score


def _nms(mask, score):
    """3x3 suppression; equal scores go to the raster-earlier pixel."""
    S = np.where(mask, score, -1.0)
    P = np.pad(S, 1, constant_values=-1.0)
    H, W = S.shape
    keep = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nb = P[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (S > nb) if earlier else (S >= nb)
    return keep


def fast_detect(img, cfg: FeatureConfig = FeatureConfig()) -> list[Keypoint]:
    mask, score = fast_corners(img, cfg.fast_threshold)
    keep = _nms(mask, score)
    ys, xs = np.nonzero(keep)
    s = score[ys, xs]
    order = np.lexsort((xs, ys, -s))[:cfg.max_keypoints]
    return [Keypoint(int(xs[i]), int(ys[i]), float(s[i])) for i in order]


@lru_cache(maxsize=16)
def brief_pattern(window: int = 31, n_tests: int = 256, seed: int = 0) -> np.ndarray:
    """Canonical test pairs as an (N, 4) int array of ``(x1, y1, x2, y2)`` offsets.

    Offsets are isotropic Gaussian (sigma = window / 5) draws from PCG64(seed),
    rounded and redrawn until inside the window.  Pairs sharing a column are
    redrawn and each pair is ordered left-to-right, so an image that increases
    strictly with x sets every bit.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    half = (window - 1) // 2
    sigma = window / 5.0
    pairs = []
    while len(pairs) < n_tests:
        p = np.rint(rng.normal(0.0, sigma, size=4)).astype(int)
        if np.any(np.abs(p) > half) or p[0] == p[2]:
            continue
        if p[0] > p[2]:
            p = p[[2, 3, 0, 1]]
        pairs.append(p)
    out = np.array(pairs, dtype=np.int64)
    out.setflags(write=False)
    return out


def box_sums(img, radius: int = BOX_RADIUS) -> np.ndarray:
    """Integer (2r+1)^2 window sums with edge replication (an unnormalised box filter)."""
    I = np.pad(np.asarray(img, dtype=np.int64), radius + 1, mode="edge")
    S = I.cumsum(0).cumsum(1)
    k = 2 * radius + 1
    H, W = np.asarray(img).shape
    return S[k:k + H, k:k + W] - S[:H, k:k + W] - S[k:k + H, :W] + S[:H, :W]


def brief_describe(img, keypoints, cfg: FeatureConfig = FeatureConfig()):
    """Return ``(kept_keypoints, descriptors)``; descriptors are (M, N/8) packed uint8.

    Bit ``i`` is 1 iff the smoothed intensity at the first point of test pair
    ``i`` is strictly below the second.  Keypoints closer than
    ``(S - 1) / 2`` to the border are dropped, order preserved.
    """
    I = _check_image(img)
    H, W = I.shape
    half = (cfg.brief_window - 1) // 2
    kept = [kp for kp in keypoints if half <= kp.x < W - half and half <= kp.y < H - half]
    nbytes = cfg.brief_tests // 8
    if not kept:
        return kept, np.zeros((0, nbytes), dtype=np.uint8)
    smooth = box_sums(I)
    pat = brief_pattern(cfg.brief_window, cfg.brief_tests, cfg.pattern_seed)
    xs = np.array([kp.x for kp in kept])[:, None]
    ys = np.array([kp.y for kp in kept])[:, None]
    a = smooth[ys + pat[:, 1], xs + pat[:, 0]]
    b = smooth[ys + pat[:, 3], xs + pat[:, 2]]
    return kept, np.packbits(a < b, axis=1)


def hamming(a, b) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError("descriptor length mismatch")
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(A, B) -> np.ndarray:
    """All-pairs Hamming distances between rows of two packed descriptor arrays."""
    A = np.unpackbits(np.asarray(A, dtype=np.uint8), axis=1).astype(np.float64)
    B = np.unpackbits(np.asarray(B, dtype=np.uint8), axis=1).astype(np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError("descriptor length mismatch")
    d = A.sum(1)[:, None] + B.sum(1)[None, :] - 2.0 * (A @ B.T)
    return np.rint(d).astype(np.int64)


def extract(rgb_or_gray, cfg: FeatureConfig = FeatureConfig()):
    """FAST + BRIEF on one frame; returns ``(keypoints, descriptors)``."""
    img = np.asarray(rgb_or_gray)
    gray = to_gray(img) if img.ndim == 3 else img
    return brief_describe(gray, fast_detect(gray, cfg), cfg)


def write_features(path, records):
    """``features.txt``: ``frame_id x y score hex(descriptor)`` per keypoint."""
    with open(path, "w") as f:
        for frame_id, kps, desc in records:
            for kp, d in zip(kps, desc):
                f.write(f"{frame_id} {kp.x} {kp.y} {kp.score:g} {bytes(d).hex()}\n")


def read_features(path):
    out = {}
    with open(path) as f:
        for line in f:
            fid, x, y, score, hx = line.split()
            kps, descs = out.setdefault(int(fid), ([], []))
            kps.append(Keypoint(int(x), int(y), float(score)))
            descs.append(np.frombuffer(bytes.fromhex(hx), dtype=np.uint8))
    return {k: (v[0], np.array(v[1])) for k, v in out.items()}
