"""Readers and writers for the on-disk artifacts: images, depths, poses, trajectories, clouds."""

from __future__ import annotations

import re

import numpy as np

from .geometry import Pose

DEPTH_SCALE = 1000.0  # PGM depth unit: millimetres


def _read_pnm(path, magic: bytes):
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval, separated by whitespace (comments allowed)
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(t) for t in tokens[1:])
    return w, h, maxval, data[pos + 1:]


def write_ppm(path, rgb):
    """Binary P6, maxval 255; input floats in [0, 1] or uint8."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path, as_float: bool = True):
    w, h, maxval, body = _read_pnm(path, b"P6")
    img = np.frombuffer(body, np.uint8, w * h * 3).reshape(h, w, 3)
    return img / float(maxval) if as_float else img.copy()


def write_depth_pgm(path, depth):
    """Binary P5, maxval 65535, millimetre quantisation (big-endian, as PGM requires)."""
    depth = np.asarray(depth, dtype=float)
    mm = np.clip(np.rint(depth * DEPTH_SCALE), 0, 65535).astype(">u2")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(mm.tobytes())


def read_depth_pgm(path):
    w, h, maxval, body = _read_pnm(path, b"P5")
    if maxval < 256:
        return np.frombuffer(body, np.uint8, w * h).reshape(h, w) / DEPTH_SCALE
    return np.frombuffer(body, ">u2", w * h).reshape(h, w).astype(float) / DEPTH_SCALE


def write_poses(path, poses, scales=None):
    """One line per frame: ``frame_id r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz scale``.

    ``poses`` is a mapping or an iterable of ``(frame_id, Pose)``.
    """
    items = sorted(poses.items()) if isinstance(poses, dict) else list(poses)
    scales = scales or {}
    with open(path, "w") as f:
        for fid, pose in items:
            M = pose.matrix()[:3]
            nums = " ".join(repr(float(x)) for x in M.ravel())
            f.write(f"{fid} {nums} {float(scales.get(fid, 1.0))!r}\n")


def read_poses(path):
    """Returns ``(poses, scales)`` dicts keyed by frame id."""
    poses, scales = {}, {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 14:
                raise ValueError(f"{path}: pose line needs 14 fields, got {len(parts)}")
            fid = int(parts[0])
            M = np.array([float(x) for x in parts[1:13]]).reshape(3, 4)
            poses[fid] = Pose(M[:, :3], M[:, 3])
            scales[fid] = float(parts[13])
    return poses, scales


def write_trajectory(path, traj):
    with open(path, "w") as f:
        for p in traj:
            x, y, z = (float(c) for c in p.position)
            f.write(f"{p.time!r} {x!r} {y!r} {z!r} {float(p.yaw)!r}\n")


def read_trajectory(path):
    from .explore.planning import TrajectoryPoint
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                t, x, y, z, yaw = (float(v) for v in line.split())
                out.append(TrajectoryPoint(t, np.array([x, y, z]), yaw))
    return out


def write_ply(path, xyz, rgb, confidence):
    """ASCII PLY with ``x y z red green blue confidence``; rgb in [0, 1] is stored as uchar."""
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(np.asarray(rgb, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    conf = np.asarray(confidence, dtype=float).ravel()
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(xyz)}\n")
        for name in ("x", "y", "z"):
            f.write(f"property double {name}\n")
        for name in ("red", "green", "blue"):
            f.write(f"property uchar {name}\n")
        f.write("property double confidence\nend_header\n")
        for p, c, q in zip(xyz, rgb.reshape(-1, 3), conf):
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]} {q:.17g}\n")


def read_ply(path):
    """Returns ``(xyz, rgb_uint8, confidence)``."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        props = []
        for line in f:
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[:1] == ["property"]:
                props.append(parts[-1])
            elif parts[:1] == ["format"] and parts[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            elif parts[:1] == ["end_header"]:
                break
        rows = [f.readline().split() for _ in range(n or 0)]
    table = np.array(rows, dtype=float).reshape(-1, len(props))
    col = {name: table[:, i] for i, name in enumerate(props)}
    xyz = np.stack([col["x"], col["y"], col["z"]], axis=1)
    rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.uint8)
    return xyz, rgb, col.get("confidence", np.ones(len(xyz)))


def frame_stem(frame_id: int) -> str:
    return f"frame_{frame_id:05d}"


def write_frames(out_dir, frames):
    """Each frame as ``frame_XXXXX.ppm`` / ``.pgm`` plus ``poses.txt`` and ``timestamps.txt``."""
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fr in frames:
        write_ppm(out_dir / f"{frame_stem(fr.frame_id)}.ppm", fr.rgb)
        write_depth_pgm(out_dir / f"{frame_stem(fr.frame_id)}.pgm", fr.depth)
    write_poses(out_dir / "poses.txt", [(fr.frame_id, fr.pose) for fr in frames])
    with open(out_dir / "timestamps.txt", "w") as f:
        for fr in frames:
            f.write(f"{fr.frame_id} {float(fr.timestamp)!r}\n")


def read_frames(in_dir):
    """Reload frames written by :func:`write_frames` (depth is millimetre-quantised)."""
    from pathlib import Path
    from .simworld import GroundTruthFrame
    in_dir = Path(in_dir)
    poses, _ = read_poses(in_dir / "poses.txt")
    times = {}
    ts = in_dir / "timestamps.txt"
    if ts.exists():
        for line in ts.read_text().split("\n"):
            if line.strip():
                fid, t = line.split()
                times[int(fid)] = float(t)
    frames = []
    for fid in sorted(poses):
        stem = in_dir / frame_stem(fid)
        rgb = read_ppm(f"{stem}.ppm")
        pgm = f"{stem}.pgm"
        depth = read_depth_pgm(pgm) if Path(pgm).exists() else np.zeros(rgb.shape[:2])
        frames.append(GroundTruthFrame(fid, rgb, depth, poses[fid], times.get(fid, 0.0)))
    return frames
