import os
import sys

import numpy as np
import pytest

from exploregs import bow, formats
from exploregs.config import PipelineConfig
from exploregs.pipeline import (RunReport, StageError, eval_table1, patrol_trajectory, read_metrics,
                                record_sequence, run_pipeline, sequence_vectors)
from exploregs.simworld import build_world, interpolate_pose
from exploregs.geometry import yaw_difference


def test_report_fields(pipeline_run):
    rep, out, _ = pipeline_run
    assert rep.frames_captured > 20 and rep.keyframes_selected >= 2
    assert rep.complete_pairs == rep.frames_captured * (rep.frames_captured - 1)
    assert rep.extra["exploration_status"] == "complete"
    assert rep.extra["focal_estimate"] == pytest.approx(64.0, rel=1e-3)
    for name in ("frames", "pairs.txt", "keyframes.txt", "cloud.ply", "poses_est.txt", "scene.egss",
                 "renders", "metrics.txt", "report.txt", "vocab.egsv", "grid.bin", "trajectory.txt"):
        assert (out / name).exists(), name


def test_report_text_roundtrip(pipeline_run):
    rep, out, _ = pipeline_run
    back = RunReport.from_text((out / "report.txt").read_text())
    for name in ("frames_captured", "keyframes_selected", "pairs_emitted", "complete_pairs",
                 "reduction_percent", "align_iterations", "final_residual", "mean_psnr"):
        assert getattr(back, name) == getattr(rep, name)
    assert back.extra == rep.extra
    assert back.wall_times == pytest.approx(rep.wall_times, abs=1e-3)


def test_reduction_recomputed_from_pairs_file(pipeline_run):
    rep, out, _ = pipeline_run
    pairs = bow.read_pairs(out / "pairs.txt")
    assert len(pairs) == rep.pairs_emitted
    n = rep.frames_captured
    assert rep.reduction_percent == 100.0 * (1 - len(pairs) / (n * (n - 1)))
    keys = [int(x) for x in (out / "keyframes.txt").read_text().split()]
    assert len(keys) == rep.keyframes_selected
    assert all(p.i in keys and p.k in keys for p in pairs)


def test_replay_from_disk_matches_live_selection(pipeline_run):
    rep, out, cfg = pipeline_run
    frames = formats.read_frames(out / "frames")
    vocab = bow.read_vocabulary(out / "vocab.egsv")
    vecs = sequence_vectors(frames, vocab, cfg.selector.features())
    keys, pairs = bow.select_pairs(vecs, [f.timestamp for f in frames], cfg.selector.params())
    assert pairs == bow.read_pairs(out / "pairs.txt")
    assert keys == [int(x) for x in (out / "keyframes.txt").read_text().split()]


def test_metrics_beat_baseline(pipeline_run):
    rep, out, _ = pipeline_run
    rows = read_metrics(out / "metrics.txt")
    assert len(rows) == rep.extra["aligned_images"]
    assert all(p > b for _, p, b in rows)
    assert np.mean([r[1] for r in rows]) == pytest.approx(rep.mean_psnr)


def test_pipeline_is_deterministic(pipeline_run, tmp_path):
    rep, out, cfg = pipeline_run
    again = run_pipeline(cfg, tmp_path)
    assert (again.frames_captured, again.keyframes_selected, again.pairs_emitted) == \
        (rep.frames_captured, rep.keyframes_selected, rep.pairs_emitted)
    assert (tmp_path / "pairs.txt").read_text() == (out / "pairs.txt").read_text()
    assert (tmp_path / "cloud.ply").read_bytes() == (out / "cloud.ply").read_bytes()


def test_stage_failure_names_the_stage(tmp_path):
    exe = tmp_path / "fail.sh"
    exe.write_text("#!/bin/sh\nexit 1\n")
    os.chmod(exe, 0o755)
    cfg = PipelineConfig()
    cfg.backend.kind = "external"
    cfg.backend.executable = str(exe)
    with pytest.raises(StageError) as err:
        run_pipeline(cfg, tmp_path / "out")
    assert err.value.stage == "infer"
    assert "failed_stage = infer" in (tmp_path / "out" / "report.txt").read_text()


def test_patrol_respects_limits(room):
    traj = patrol_trajectory(room, 20.0)
    ts = np.arange(0.0, traj[-1].time, 0.01)
    poses = interpolate_pose(traj, ts)
    pos = np.array([p.translation for p in poses])
    yaw = np.array([p.yaw for p in poses])
    assert np.max(np.linalg.norm(np.diff(pos, axis=0), axis=1)) / 0.01 <= 1.0 + 1e-9
    assert max(abs(yaw_difference(a, b)) for a, b in zip(yaw[:-1], yaw[1:])) / 0.01 <= 1.0 + 1e-9
    assert room.free_interior()[tuple((pos / room.voxel_size).astype(int).T)].all()


def test_table1_needs_enough_frames(room, cam):
    frames = record_sequence(room, cam, 10)
    assert len(frames) == 10 and frames[-1].timestamp == 4.5
    with pytest.raises(ValueError, match="at least 60"):
        eval_table1([{}] * 10, list(range(10)))
