"""End-to-end run: explore -> select pairs -> infer -> align -> splat render -> evaluate."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bow, features, formats
from .align import AlignProblem, AlignResult, connected_components, global_align, merge_pointclouds
from .config import PipelineConfig, resolve
from .explore import Explorer, write_grid
from .geometry import CameraModel, Pose
from .simworld import GroundTruthFrame, TimedPose, VoxelScene, build_world, capture_sequence, raycast_rgbd
from .splat import init_gaussians, mean_color_baseline, psnr, refine_colors, render, write_scene
from .twoview import (BackendError, ExternalBackend, IntrinsicsError, OracleBackend, estimate_intrinsics,
                      write_prediction)

log = logging.getLogger(__name__)

TABLE1_SIZES = (20, 40, 60)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunReport:
    frames_captured: int = 0
    keyframes_selected: int = 0
    pairs_emitted: int = 0
    complete_pairs: int = 0
    reduction_percent: float = 0.0
    align_iterations: int = 0
    final_residual: float = 0.0
    mean_psnr: float = 0.0
    wall_times: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if key in ("wall_times", "extra"):
                continue
            lines.append(f"{key} = {float(value)!r}" if isinstance(value, float) else f"{key} = {value}")
        for stage, secs in self.wall_times.items():
            lines.append(f"wall_time_{stage} = {secs:.3f}")
        for key, value in self.extra.items():
            lines.append(f"{key} = {float(value)!r}" if isinstance(value, float) else f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunReport":
        rep = cls()
        names = {f for f in asdict(rep) if f not in ("wall_times", "extra")}
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key in names:
                setattr(rep, key, int(value) if isinstance(getattr(rep, key), int) else float(value))
            elif key.startswith("wall_time_"):
                rep.wall_times[key[len("wall_time_"):]] = float(value)
            else:
                rep.extra[key] = _parse_scalar(value)
        return rep


def _parse_scalar(value: str):
    for kind in (int, float):
        try:
            return kind(value)
        except ValueError:
            pass
    return value


def survey_frames(scene: VoxelScene, cam: CameraModel, n_positions: int = 4, n_yaws: int = 8):
    """Turn-in-place views from a few free positions, used only to train the vocabulary."""
    free = scene.free_interior()
    cells = np.argwhere(free)
    # keep away from walls so the views are not filled by a single face
    from scipy import ndimage
    clearance = ndimage.distance_transform_cdt(free, metric="chessboard")
    roomy = cells[clearance[tuple(cells.T)] >= max(1, int(clearance.max()) // 2)]
    if len(roomy) == 0:
        roomy = cells
    pick = roomy[np.linspace(0, len(roomy) - 1, n_positions).round().astype(int)]
    frames = []
    for cell in pick:
        pos = (cell + 0.5) * scene.voxel_size
        for j in range(n_yaws):
            pose = Pose.from_yaw(pos, 0.3 + 2 * np.pi * j / n_yaws)
            rgb, depth = raycast_rgbd(scene, pose, cam)
            frames.append(GroundTruthFrame(len(frames), rgb, depth, pose, float(len(frames))))
    return frames


def train_scene_vocabulary(scene, cam, sel) -> bow.Vocabulary:
    fcfg = sel.features()
    desc = [features.extract(f.rgb, fcfg)[1] for f in survey_frames(scene, cam, sel.survey_positions, sel.survey_yaws)]
    return bow.train_vocabulary(desc, sel.vocab_k, sel.vocab_depth, sel.vocab_seed, fcfg.pattern_seed)


class SelectorStream:
    """Consumes frames in capture order and makes each keyframe / pair decision immediately."""

    def __init__(self, vocab: bow.Vocabulary, fcfg: features.FeatureConfig, params: bow.SelectorParams):
        if vocab.pattern_seed != fcfg.pattern_seed or vocab.n_bits != fcfg.brief_tests:
            raise ValueError("vocabulary was trained with a different descriptor pattern")
        self.vocab = vocab
        self.fcfg = fcfg
        self.db = bow.MatchDatabase(params)
        self.pairs: list[bow.ImagePair] = []
        self.feature_records = []

    def push(self, frame):
        kps, desc = features.extract(frame.rgb, self.fcfg)
        self.feature_records.append((frame.frame_id, kps, desc))
        v = bow.quantize(self.vocab, desc)
        selected, pairs = self.db.process(frame.frame_id, v, frame.timestamp)
        self.pairs.extend(pairs)
        return selected, pairs

    @property
    def keyframes(self):
        return self.db.keyframes


def make_backend(cfg: PipelineConfig, scene, cam, base_dir=None):
    b = cfg.backend
    if b.kind == "oracle":
        return OracleBackend(scene, cam, b.sigma, b.dropout, b.seed)
    return ExternalBackend(resolve(b.executable, base_dir), b.timeout)


def run_inference(backend, frames_by_id, pairs, out_dir=None):
    """Predictions for every pair; all-invalid predictions are dropped and counted."""
    preds, dropped = [], 0
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for p in pairs:
        pred = backend.infer(frames_by_id[p.i], frames_by_id[p.k])
        if pred.n_valid == 0:
            dropped += 1
            continue
        if out_dir is not None:
            write_prediction(Path(out_dir) / f"pair_{p.i:05d}_{p.k:05d}.bin", pred)
        preds.append(pred)
    return preds, dropped


def largest_component(predictions):
    """Frame ids of the largest connected set of images (ties go to the one holding the smallest id)."""
    ids = sorted({f for p in predictions for f in p.pair})
    if not ids:
        return []
    index = {f: j for j, f in enumerate(ids)}
    comps = connected_components(len(ids), [(index[p.pair[0]], index[p.pair[1]]) for p in predictions])
    best = max(comps, key=lambda c: (len(c), -c[0]))
    return [ids[j] for j in best]


def recover_intrinsics(predictions, cam: CameraModel) -> CameraModel:
    """Focal length from the prediction with the most valid view-i pixels."""
    best = max(predictions, key=lambda p: int(p.valid[..., 0].sum()))
    return estimate_intrinsics(best, (cam.width, cam.height))


def align_predictions(predictions, frames_by_id, cam: CameraModel, cfg: PipelineConfig):
    """Align the largest component, anchored at its first image's true pose.

    Returns ``(result, cloud, camera_used)``.
    """
    comp = largest_component(predictions)
    if len(comp) < 2:
        raise ValueError("no image pair with valid predictions to align")
    keep = set(comp)
    preds = [p for p in predictions if p.pair[0] in keep and p.pair[1] in keep]
    cam_used = cam
    if cfg.align.estimate_intrinsics:
        try:
            cam_used = recover_intrinsics(preds, cam)
        except IntrinsicsError as e:
            log.warning("keeping configured intrinsics: %s", e)
    problem = AlignProblem.from_predictions(preds, cam_used, images=comp, gauge_pose=frames_by_id[comp[0]].pose)
    result = global_align(problem, cfg.align.options())
    rgb = {f: frames_by_id[f].rgb for f in result.images}
    cloud = merge_pointclouds(result, preds, rgb, cam_used, cfg.align.voxel_downsample)
    return result, cloud, cam_used


def evaluate_renders(scene_splats, frames, cam: CameraModel, render_dir=None):
    """Per-frame PSNR of the render at the true pose, and of the frame's mean-colour image."""
    rows = []
    for fr in frames:
        img = render(scene_splats, cam, fr.pose)
        if render_dir is not None:
            formats.write_ppm(Path(render_dir) / f"{formats.frame_stem(fr.frame_id)}.ppm", np.clip(img, 0, 1))
        rows.append((fr.frame_id, psnr(img, fr.rgb), psnr(mean_color_baseline(fr.rgb), fr.rgb)))
    return rows


def write_metrics(path, rows):
    with open(path, "w") as f:
        f.write("# frame_id psnr baseline_psnr\n")
        for fid, p, b in rows:
            f.write(f"{fid} {float(p)!r} {float(b)!r}\n")


def read_metrics(path):
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip() and not line.startswith("#"):
                fid, p, b = line.split()
                rows.append((int(fid), float(p), float(b)))
    return rows


def run_pipeline(cfg: PipelineConfig, out_dir, base_dir=None) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    cam = cfg.camera.model()
    stage = "explore"
    t_stage = time.perf_counter()

    def lap(name):
        nonlocal t_stage
        now = time.perf_counter()
        report.wall_times[name] = report.wall_times.get(name, 0.0) + now - t_stage
        t_stage = now

    try:
        scene = build_world(cfg.world)
        sel = cfg.selector
        stage = "select-pairs"
        if sel.vocabulary:
            vocab = bow.read_vocabulary(resolve(sel.vocabulary, base_dir))
        else:
            vocab = train_scene_vocabulary(scene, cam, sel)
        bow.write_vocabulary(out / "vocab.egsv", vocab)
        stream = SelectorStream(vocab, sel.features(), sel.params())
        lap("select-pairs")

        # the selector sees each frame as soon as the explorer emits it
        stage = "explore"
        explorer = Explorer(scene, cam, cfg.explore)
        frames = []
        t_select = 0.0
        for frame in explorer.run():
            frames.append(frame)
            t0 = time.perf_counter()
            stream.push(frame)
            t_select += time.perf_counter() - t0
        exploration = explorer.result(frames)
        lap("explore")
        report.wall_times["explore"] -= t_select
        report.wall_times["select-pairs"] += t_select
        formats.write_frames(out / "frames", frames)
        write_grid(out / "grid.bin", exploration.grid)
        formats.write_trajectory(out / "trajectory.txt", exploration.trajectory)

        stage = "select-pairs"
        bow.write_pairs(out / "pairs.txt", stream.pairs)
        with open(out / "keyframes.txt", "w") as f:
            f.writelines(f"{k}\n" for k in stream.keyframes)
        report.frames_captured = len(frames)
        report.keyframes_selected = len(stream.keyframes)
        report.pairs_emitted = len(stream.pairs)
        report.complete_pairs = bow.complete_pair_count(len(frames))
        report.reduction_percent = bow.reduction_percent(len(stream.pairs), len(frames))
        free = scene.free_interior()
        known = exploration.grid.states[free] != 0
        report.extra["exploration_status"] = exploration.status
        report.extra["known_fraction"] = float(known.mean()) if known.size else 0.0
        lap("select-pairs")

        stage = "infer"
        frames_by_id = {f.frame_id: f for f in frames}
        backend = make_backend(cfg, scene, cam, base_dir)
        preds, dropped = run_inference(backend, frames_by_id, stream.pairs, out / "preds")
        report.extra["edges_dropped"] = dropped
        lap("infer")

        stage = "align"
        result, cloud, cam_used = align_predictions(preds, frames_by_id, cam, cfg)
        formats.write_ply(out / "cloud.ply", cloud.xyz, cloud.rgb, cloud.confidence)
        formats.write_poses(out / "poses_est.txt", result.poses, result.sigmas)
        report.align_iterations = result.iterations
        report.final_residual = result.residual
        report.extra["aligned_images"] = len(result.images)
        report.extra["align_status"] = result.status
        report.extra["cloud_points"] = len(cloud)
        report.extra["focal_estimate"] = float(cam_used.fx)
        lap("align")

        stage = "render"
        splats = init_gaussians(cloud.xyz, cloud.rgb, cloud.confidence, cfg.splat.base_scale)
        eval_frames = [frames_by_id[f] for f in result.images]
        if cfg.splat.refine_steps > 0:
            splats = refine_colors(splats, [(cam, f.pose, f.rgb) for f in eval_frames], cfg.splat.refine_steps)
        write_scene(out / "scene.egss", splats)
        render_dir = out / "renders"
        render_dir.mkdir(exist_ok=True)
        rows = evaluate_renders(splats, eval_frames, cam, render_dir)
        lap("render")

        stage = "eval"
        write_metrics(out / "metrics.txt", rows)
        report.mean_psnr = float(np.mean([r[1] for r in rows]))
        report.extra["mean_baseline_psnr"] = float(np.mean([r[2] for r in rows]))
        report.extra["min_psnr_margin"] = float(min(r[1] - r[2] for r in rows))
        lap("eval")
    except (ValueError, RuntimeError, OSError, BackendError) as e:
        (out / "report.txt").write_text(report.to_text() + f"failed_stage = {stage}\n")
        raise StageError(stage, e) from e
    (out / "report.txt").write_text(report.to_text())
    return report


def patrol_trajectory(scene: VoxelScene, duration: float = 30.0, v_max: float = 1.0, yaw_max: float = 1.0,
                      inset: float = 0.75) -> list[TimedPose]:
    """Counter-clockwise laps of a rectangle inside the room, facing the direction of travel.

    Straight legs run at ``v_max``; corners are turns in place at ``yaw_max``.
    """
    lo = np.full(3, scene.voxel_size) + inset
    hi = np.asarray(scene.solid.shape) * scene.voxel_size - scene.voxel_size - inset
    if np.any(hi[:2] <= lo[:2]):
        raise ValueError("room too small for a patrol loop")
    z = 0.5 * (lo[2] + hi[2]) if hi[2] > lo[2] else 0.5 * scene.solid.shape[2] * scene.voxel_size
    corners = [np.array([lo[0], lo[1], z]), np.array([hi[0], lo[1], z]),
               np.array([hi[0], hi[1], z]), np.array([lo[0], hi[1], z])]
    t, yaw, k = 0.0, 0.0, 0
    traj = [TimedPose(t, Pose.from_yaw(corners[0], yaw))]
    while t < duration:
        a, b = corners[k % 4], corners[(k + 1) % 4]
        t += float(np.linalg.norm(b - a)) / v_max
        traj.append(TimedPose(t, Pose.from_yaw(b, yaw)))
        yaw += np.pi / 2
        t += (np.pi / 2) / yaw_max
        traj.append(TimedPose(t, Pose.from_yaw(b, yaw)))
        k += 1
    return traj


def record_sequence(scene: VoxelScene, cam: CameraModel, n_frames: int = 60, rate: float = 2.0,
                    v_max: float = 1.0, yaw_max: float = 1.0):
    """At least ``n_frames`` frames captured at ``rate`` Hz along :func:`patrol_trajectory`."""
    duration = (n_frames - 1) / rate
    traj = patrol_trajectory(scene, duration, v_max, yaw_max)
    frames = capture_sequence(scene, traj, cam, rate)
    return frames[:max(n_frames, 1)]


def sequence_vectors(frames, vocab, fcfg):
    return [bow.quantize(vocab, features.extract(f.rgb, fcfg)[1]) for f in frames]


def eval_table1(vectors, times, params: bow.SelectorParams | None = None, sizes=TABLE1_SIZES):
    """Pair counts on prefixes of a recorded sequence: complete, window-5 and the selector's own.

    Rows are dicts with keys ``n, complete, swin, ours, bound, ok``.
    """
    if len(vectors) < max(sizes):
        raise ValueError(f"need at least {max(sizes)} frames, have {len(vectors)}")
    rows = []
    for n in sizes:
        _, pairs = bow.select_pairs(vectors[:n], times[:n], params)
        ours = len(pairs)
        rows.append(dict(n=n, complete=bow.complete_pair_count(n), swin=len(bow.window_pairs(n)),
                         ours=ours, bound=3 * n, ok=ours < 3 * n))
    bad = [r["n"] for r in rows if not r["ok"]]
    if bad:
        raise AssertionError(f"selector emitted >= 3n pairs for n = {bad}")
    return rows


def format_table1(rows) -> str:
    lines = [f"{'n':>4} {'Complete':>9} {'Swin':>6} {'Ours':>6} {'reduction%':>11}"]
    for r in rows:
        red = 100.0 * (1 - r["ours"] / r["complete"])
        lines.append(f"{r['n']:>4} {r['complete']:>9} {r['swin']:>6} {r['ours']:>6} {red:>11.1f}")
    return "\n".join(lines) + "\n"
