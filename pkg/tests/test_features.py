import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exploregs.features import (CIRCLE, FeatureConfig, Keypoint, box_sums, brief_describe, brief_pattern, extract,
                                fast_corners, fast_detect, hamming, hamming_matrix, read_features, to_gray,
                                write_features)

CFG20 = FeatureConfig(fast_threshold=20)


def naive_arc_mask(img, t):
    """Enumerate all 16 start positions and both polarities per pixel."""
    I = img.astype(int)
    H, W = I.shape
    out = np.zeros((H, W), dtype=bool)
    for y in range(3, H - 3):
        for x in range(3, W - 3):
            ring = [I[y + dy, x + dx] for dx, dy in CIRCLE]
            p = I[y, x]
            for test in (lambda v: v > p + t, lambda v: v < p - t):
                if any(all(test(ring[(s + j) % 16]) for j in range(12)) for s in range(16)):
                    out[y, x] = True
    return out


def test_constant_image_has_no_corners():
    assert fast_detect(np.full((40, 40), 128, np.uint8), CFG20) == []


def test_bright_square_no_edge_responses():
    img = np.full((64, 64), 30, np.uint8)
    img[22:42, 22:42] = 200
    mask, _ = fast_corners(img, 20)
    assert np.array_equal(mask, naive_arc_mask(img, 20))
    corners = np.array([[22, 22], [22, 41], [41, 22], [41, 41]])
    for kp in fast_detect(img, CFG20):
        assert np.min(np.abs(corners - [kp.y, kp.x]).max(axis=1)) <= 3


def test_triangle_corners_detected_only_at_tips():
    yy, xx = np.mgrid[0:64, 0:64]
    tri = (yy >= 16) & (yy <= 48) & (np.abs(xx - 32) <= (yy - 16) * 0.35)
    img = np.where(tri, 200, 30).astype(np.uint8)
    kps = fast_detect(img, CFG20)
    tips = np.array([[32, 16], [21, 48], [43, 48]])
    assert len(kps) == 3
    for kp in kps:
        assert np.min(np.abs(tips - [kp.x, kp.y]).max(axis=1)) <= 1


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), t=st.integers(1, 60))
def test_fast_matches_arc_oracle(seed, t):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (34, 36)).astype(np.uint8)
    img = np.where(rng.random(img.shape) < 0.5, img // 4, img)  # mixed contrast
    mask, score = fast_corners(img, t)
    assert np.array_equal(mask, naive_arc_mask(img, t))
    assert np.all(score[~mask] == 0) and np.all(score[mask] > 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), dx=st.integers(-4, 4), dy=st.integers(-4, 4), c=st.integers(0, 100))
def test_fast_translation_and_offset_invariance(seed, dx, dy, c):
    rng = np.random.default_rng(seed)
    base = np.full((48, 48), 60, np.int64)
    base[14:34, 14:34] = rng.integers(0, 150, (20, 20))
    shifted = np.full_like(base, 60)
    shifted[14 + dy:34 + dy, 14 + dx:34 + dx] = base[14:34, 14:34]
    k1 = {(k.x, k.y, k.score) for k in fast_detect(base.astype(np.uint8), CFG20)}
    k2 = {(k.x - dx, k.y - dy, k.score) for k in fast_detect(shifted.astype(np.uint8), CFG20)}
    assert k1 == k2
    k3 = {(k.x, k.y, k.score) for k in fast_detect((base + c).astype(np.uint8), CFG20)}
    assert k1 == k3


def test_nms_and_cap():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
    kps = fast_detect(img, FeatureConfig(fast_threshold=10, max_keypoints=7))
    assert len(kps) == 7
    scores = [k.score for k in kps]
    assert scores == sorted(scores, reverse=True)
    full = fast_detect(img, FeatureConfig(fast_threshold=10, max_keypoints=10 ** 6))
    pts = {(k.x, k.y) for k in full}
    for k in full:
        assert not any((k.x + a, k.y + b) in pts for a in (-1, 0, 1) for b in (-1, 0, 1) if a or b)


def test_pattern_properties():
    pat = brief_pattern(31, 256, 0)
    assert pat.shape == (256, 4)
    assert np.all(np.abs(pat) <= 15) and np.all(pat[:, 0] < pat[:, 2])
    assert np.array_equal(pat, brief_pattern(31, 256, 0))
    assert not np.array_equal(pat, brief_pattern(31, 256, 1))


def test_ramp_sets_every_bit():
    img = np.tile((2 * np.arange(64) + 20).astype(np.uint8), (64, 1))
    kept, desc = brief_describe(img, [Keypoint(32, 32, 1.0)])
    assert len(kept) == 1 and np.all(desc == 255)


def test_inversion_flips_all_but_ties():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
    img[::3, ::3] = 128
    kps = [Keypoint(x, y, 1.0) for x in (20, 32, 40) for y in (18, 30, 45)]
    _, d1 = brief_describe(img, kps)
    _, d2 = brief_describe(255 - img, kps)
    S = box_sums(img)
    pat = brief_pattern()
    for j, kp in enumerate(kps):
        a = S[kp.y + pat[:, 1], kp.x + pat[:, 0]]
        b = S[kp.y + pat[:, 3], kp.x + pat[:, 2]]
        tie = a == b
        b1, b2 = np.unpackbits(d1[j]).astype(bool), np.unpackbits(d2[j]).astype(bool)
        assert np.all(b1[~tie] != b2[~tie])
        assert not b1[tie].any() and not b2[tie].any()


def test_border_keypoints_dropped_in_order():
    img = np.random.default_rng(0).integers(0, 256, (64, 64)).astype(np.uint8)
    kps = [Keypoint(5, 30, 1.0), Keypoint(30, 30, 2.0), Keypoint(48, 48, 3.0), Keypoint(49, 30, 4.0)]
    kept, desc = brief_describe(img, kps)
    assert kept == [kps[1], kps[2]] and desc.shape == (2, 32)


def test_brief_locality_and_determinism():
    rng = np.random.default_rng(4)
    a = rng.integers(0, 256, (80, 80)).astype(np.uint8)
    b = rng.integers(0, 256, (80, 80)).astype(np.uint8)
    b[10:50, 20:60] = a[30:70, 30:70]   # same patch at a different place
    _, da = brief_describe(a, [Keypoint(50, 50, 1.0)])
    _, db = brief_describe(b, [Keypoint(40, 30, 1.0)])
    assert np.array_equal(da, db)
    _, again = brief_describe(a, [Keypoint(50, 50, 1.0)])
    assert np.array_equal(da, again)


def naive_hamming(a, b):
    return sum(((int(x) >> k) & 1) != ((int(y) >> k) & 1) for x, y in zip(a, b) for k in range(8))


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
def test_hamming_oracle_and_metric(a, b, c):
    a, b, c = (np.frombuffer(x, np.uint8) for x in (a, b, c))
    assert hamming(a, b) == naive_hamming(a, b) == hamming(b, a)
    assert hamming(a, a) == 0
    assert hamming(a, ~a) == 256
    assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
    assert hamming_matrix(a[None], np.stack([b, c]))[0].tolist() == [hamming(a, b), hamming(a, c)]


def test_hamming_length_mismatch():
    with pytest.raises(ValueError):
        hamming(np.zeros(32, np.uint8), np.zeros(16, np.uint8))


def test_gray_and_config_validation():
    assert to_gray(np.ones((2, 2, 3)))[0, 0] == 255
    assert to_gray(np.array([[[1.0, 0.0, 0.0]]]))[0, 0] == 76
    for bad in (dict(fast_threshold=0), dict(brief_window=30), dict(brief_tests=100)):
        with pytest.raises(ValueError):
            FeatureConfig(**bad)
    with pytest.raises(ValueError):
        fast_detect(np.zeros((20, 20), np.uint8))


def test_features_file_roundtrip(tmp_path, room, cam):
    from exploregs.simworld import raycast_rgbd
    from exploregs.geometry import Pose
    rgb, _ = raycast_rgbd(room, Pose.from_yaw([1.5, 1.4, 1.3], 0.8), cam)
    kps, desc = extract(rgb)
    assert len(kps) > 10
    write_features(tmp_path / "features.txt", [(3, kps, desc)])
    back = read_features(tmp_path / "features.txt")
    assert back[3][0] == kps and np.array_equal(back[3][1], desc)
