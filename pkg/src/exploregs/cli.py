"""Command-line entry point; every stage reads and writes files so it can be rerun on its own."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import bow, features, formats
from .config import ConfigError, PipelineConfig, load_config, resolve
from .explore import Explorer, write_grid
from .pipeline import (StageError, align_predictions, evaluate_renders, eval_table1, format_table1,
                       make_backend, record_sequence, run_inference, run_pipeline, sequence_vectors,
                       train_scene_vocabulary, write_metrics)
from .simworld import build_world
from .splat import init_gaussians, mean_color_baseline, psnr, read_scene, render, write_scene
from .twoview import BackendError, read_prediction

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("exploregs")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _config(args) -> tuple[PipelineConfig, str | None]:
    path = getattr(args, "config", None)
    if not path:
        return PipelineConfig(), None
    cfg = load_config(path)
    return cfg, str(Path(path).resolve().parent)


def _need_dir(path, what):
    if not Path(path).is_dir():
        raise ConfigError(f"{what} directory not found: {path}")


def _need_file(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")


def cmd_pipeline(args):
    cfg, base = _config(args)
    report = run_pipeline(cfg, args.out_dir, base)
    print(report.to_text(), end="")


def cmd_explore(args):
    cfg, _ = _config(args)
    scene = build_world(cfg.world)
    explorer = Explorer(scene, cfg.camera.model(), cfg.explore)
    frames = list(explorer.run())
    result = explorer.result(frames)
    out = Path(args.out_dir)
    formats.write_frames(out, frames)
    write_grid(out / "grid.bin", result.grid)
    formats.write_trajectory(out / "trajectory.txt", result.trajectory)
    print(f"{len(frames)} frames, status {result.status}")


def _vocabulary(args, cfg, base, frames):
    fcfg = cfg.selector.features()
    if args.vocab and Path(args.vocab).is_file():
        return bow.read_vocabulary(args.vocab)
    if not args.train_vocab:
        raise ConfigError(f"vocabulary file not found: {args.vocab} (pass --train-vocab to build one)")
    sel = cfg.selector
    if args.train_from_images:
        vocab = bow.train_vocabulary([features.extract(f.rgb, fcfg)[1] for f in frames],
                                     sel.vocab_k, sel.vocab_depth, sel.vocab_seed, fcfg.pattern_seed)
    else:
        vocab = train_scene_vocabulary(build_world(cfg.world), cfg.camera.model(), sel)
    if args.vocab:
        bow.write_vocabulary(args.vocab, vocab)
    return vocab


def cmd_select_pairs(args):
    cfg, base = _config(args)
    _need_dir(args.images, "images")
    sel = cfg.selector
    if args.tau is not None:
        sel.tau = args.tau
    if args.thr_in is not None:
        sel.thr_in = args.thr_in
    try:
        params = sel.params()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    frames = formats.read_frames(args.images)
    vocab = _vocabulary(args, cfg, base, frames)
    vectors = sequence_vectors(frames, vocab, sel.features())
    keyframes, pairs = bow.select_pairs(vectors, [f.timestamp for f in frames], params,
                                        [f.frame_id for f in frames])
    bow.write_pairs(args.out, pairs)
    if args.keyframes:
        Path(args.keyframes).write_text("".join(f"{k}\n" for k in keyframes))
    print(f"{len(keyframes)} keyframes, {len(pairs)} pairs, "
          f"reduction {bow.reduction_percent(len(pairs), len(frames)):.1f}%")


def cmd_infer(args):
    cfg, base = _config(args)
    if args.backend:
        cfg.backend.kind = args.backend
    if args.executable:
        cfg.backend.executable = args.executable
    if cfg.backend.kind == "external" and not Path(resolve(cfg.backend.executable, base)).exists():
        raise ConfigError(f"external backend executable not found: {cfg.backend.executable!r}")
    _need_dir(args.images, "images")
    _need_file(args.pairs, "pairs")
    frames = {f.frame_id: f for f in formats.read_frames(args.images)}
    pairs = bow.read_pairs(args.pairs)
    missing = sorted({f for p in pairs for f in (p.i, p.k)} - frames.keys())
    if missing:
        raise ConfigError(f"pairs reference frames not in {args.images}: {missing[:5]}")
    backend = make_backend(cfg, build_world(cfg.world), cfg.camera.model(), base)
    preds, dropped = run_inference(backend, frames, pairs, args.out_dir)
    print(f"{len(preds)} predictions written, {dropped} without overlap dropped")


_PAIR_FILE = re.compile(r"pair_(\d+)_(\d+)\.bin$")


def cmd_align(args):
    cfg, _ = _config(args)
    _need_dir(args.preds, "predictions")
    _need_dir(args.images, "images")
    wanted = None
    if args.pairs:
        _need_file(args.pairs, "pairs")
        wanted = {(p.i, p.k) for p in bow.read_pairs(args.pairs)}
    preds = []
    for path in sorted(Path(args.preds).glob("pair_*.bin")):
        m = _PAIR_FILE.search(path.name)
        pair = (int(m.group(1)), int(m.group(2)))
        if wanted is None or pair in wanted:
            preds.append(read_prediction(path, pair))
    frames = {f.frame_id: f for f in formats.read_frames(args.images)}
    result, cloud, cam_used = align_predictions(preds, frames, cfg.camera.model(), cfg)
    formats.write_ply(args.out, cloud.xyz, cloud.rgb, cloud.confidence)
    formats.write_poses(args.poses, result.poses, result.sigmas)
    if args.scene:
        write_scene(args.scene, init_gaussians(cloud.xyz, cloud.rgb, cloud.confidence, cfg.splat.base_scale))
    print(f"aligned {len(result.images)} images in {result.iterations} iterations "
          f"({result.status}), residual {result.residual:.3g}, {len(cloud)} points, focal {cam_used.fx:.3f}")


def cmd_render(args):
    cfg, _ = _config(argparse.Namespace(config=args.cam))
    _need_file(args.scene, "scene")
    _need_file(args.poses, "poses")
    splats = read_scene(args.scene)
    poses, _ = formats.read_poses(args.poses)
    cam = cfg.camera.model()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fid, pose in sorted(poses.items()):
        formats.write_ppm(out / f"{formats.frame_stem(fid)}.ppm", np.clip(render(splats, cam, pose), 0, 1))
    print(f"rendered {len(poses)} views")


def cmd_eval(args):
    _need_dir(args.renders, "renders")
    _need_dir(args.truth, "truth")
    rows = []
    for path in sorted(Path(args.renders).glob("frame_*.ppm")):
        truth = Path(args.truth) / path.name
        if not truth.exists():
            continue
        img, gt = formats.read_ppm(path), formats.read_ppm(truth)
        rows.append((int(path.stem.split("_")[1]), psnr(img, gt), psnr(mean_color_baseline(gt), gt)))
    if not rows:
        raise ValueError("no rendered frame has a matching ground-truth frame")
    write_metrics(args.report, rows)
    worst = min(p - b for _, p, b in rows)
    print(f"{len(rows)} frames, mean PSNR {np.mean([r[1] for r in rows]):.2f} dB, "
          f"mean baseline {np.mean([r[2] for r in rows]):.2f} dB, worst margin {worst:+.2f} dB")


def cmd_table1(args):
    cfg, _ = _config(args)
    cam = cfg.camera.model()
    scene = None
    if args.images:
        _need_dir(args.images, "images")
        frames = formats.read_frames(args.images)
    else:
        scene = build_world(cfg.world)
        frames = record_sequence(scene, cam, args.frames, cfg.explore.capture_rate,
                                 cfg.explore.v_max, cfg.explore.yaw_max)
        if args.record:
            formats.write_frames(args.record, frames)
    sel = cfg.selector
    if sel.vocabulary:
        vocab = bow.read_vocabulary(sel.vocabulary)
    else:
        vocab = train_scene_vocabulary(scene or build_world(cfg.world), cam, sel)
    vectors = sequence_vectors(frames, vocab, sel.features())
    rows = eval_table1(vectors, [f.timestamp for f in frames], sel.params())
    text = format_table1(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(prog="exploregs", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    s = sub.add_parser("pipeline", help="run every stage")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("explore", help="autonomous exploration of the synthetic world")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_explore)

    s = sub.add_parser("select-pairs", help="keyframe and image-pair selection")
    s.add_argument("--images", required=True, help="directory written by 'explore'")
    s.add_argument("--vocab", help="vocabulary file (written when training)")
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("--thr-in", type=float)
    s.add_argument("--config")
    s.add_argument("--keyframes", help="also write the admitted keyframe ids")
    s.add_argument("--train-vocab", action="store_true", help="train a vocabulary if --vocab is missing")
    s.add_argument("--train-from-images", action="store_true",
                   help="train on the input images instead of a survey of the configured world")
    s.set_defaults(func=cmd_select_pairs)

    s = sub.add_parser("infer", help="two-view pointmap prediction per pair")
    s.add_argument("--backend", choices=["oracle", "external"])
    s.add_argument("--executable", help="external backend program")
    s.add_argument("--pairs", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("align", help="global alignment and point-cloud fusion")
    s.add_argument("--preds", required=True)
    s.add_argument("--pairs")
    s.add_argument("--images", required=True, help="frames directory (colours and gauge pose)")
    s.add_argument("--out", required=True, help="output PLY")
    s.add_argument("--poses", required=True, help="output estimated poses")
    s.add_argument("--scene", help="also write the initial splat scene")
    s.add_argument("--config")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("render", help="render a splat scene at given poses")
    s.add_argument("--scene", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--cam", help="config file whose [camera] section is used")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR of renders against ground truth")
    s.add_argument("--renders", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("table1", help="pair counts for 20/40/60-frame prefixes")
    s.add_argument("--images", help="recorded frames (default: record a patrol sequence)")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--record", help="write the recorded sequence here")
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_table1)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"exploregs: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"exploregs: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"exploregs: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, RuntimeError, OSError, BackendError, AssertionError) as e:
        print(f"exploregs: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
