"""CLI tests: synth fixtures, run exit codes and report, eval metrics."""

import shutil

import numpy as np
import pytest

from monovo.cli import main
from monovo.evaluation import load_trajectory
from monovo.imageproc import save_pgm, GrayImage


@pytest.fixture(scope="module")
def planar_fixture(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture") / "planar"
    code = main(["synth", "planar", "--out", str(out), "--seed", "9",
                 "--frames", "60", "--landmarks", "400"])
    assert code == 0
    return out


def mini_dataset(planar_fixture, dst, n=12):
    dst.mkdir()
    for p in sorted((planar_fixture / "images").glob("*.pgm"))[:n]:
        shutil.copy(p, dst / p.name)
    return dst


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_outputs_complete(planar_fixture):
    assert (planar_fixture / "scene.txt").exists()
    assert (planar_fixture / "gt.txt").exists()
    assert (planar_fixture / "calib.txt").exists()
    assert (planar_fixture / "times.txt").exists()
    images = sorted((planar_fixture / "images").glob("*.pgm"))
    assert len(images) == 60
    assert (planar_fixture / "images" / "times.txt").exists()


def test_synth_byte_identical(planar_fixture, tmp_path):
    out2 = tmp_path / "again"
    assert main(["synth", "planar", "--out", str(out2), "--seed", "9",
                 "--frames", "60", "--landmarks", "400"]) == 0
    for rel in ("scene.txt", "gt.txt", "calib.txt", "times.txt",
                "images/000000.pgm", "images/000059.pgm"):
        a = (planar_fixture / rel).read_bytes()
        b = (out2 / rel).read_bytes()
        assert a == b, rel


def test_synth_loop_gt_closes(tmp_path):
    out = tmp_path / "loop"
    assert main(["synth", "loop", "--out", str(out), "--seed", "4",
                 "--frames", "80", "--landmarks", "350"]) == 0
    gt = load_trajectory(out / "gt.txt")
    p = gt.positions()
    assert np.linalg.norm(p[0] - p[-1]) < 1e-9
    assert not (out / "images").exists()


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_run_planar_fixture_and_eval(planar_fixture, tmp_path):
    traj = tmp_path / "est.txt"
    code = main(["run", str(planar_fixture / "images"),
                 "--calib", str(planar_fixture / "calib.txt"),
                 "--traj", str(traj)])
    assert code == 0
    report = (tmp_path / "est.txt.report.txt").read_text()
    assert "max_features = 250" in report
    assert "frames = 60" in report
    assert "lost_episodes = 0" in report
    est = load_trajectory(traj)
    lines = [
        ln for ln in traj.read_text().splitlines()
        if ln.strip() and not ln.startswith("#")
    ]
    assert len(lines) == len(est.timestamps)
    frames_with_pose = int(report.split("frames_with_pose = ")[1].split("\n")[0])
    assert len(lines) == frames_with_pose

    metrics = tmp_path / "metrics.csv"
    per_frame = tmp_path / "per_frame.csv"
    code = main(["eval", str(traj), str(planar_fixture / "gt.txt"),
                 "--out", str(metrics), "--per-frame", str(per_frame)])
    assert code == 0
    header, row = metrics.read_text().splitlines()
    assert header == "ate_rmse,ate_pct,drift_pct"
    ate_rmse, ate_pct, drift_pct = map(float, row.split(","))
    assert ate_pct < 2.0
    pf = per_frame.read_text().splitlines()
    assert pf[0] == "timestamp,error"
    assert len(pf) - 1 == len(est.timestamps)


def test_run_config_precedence(planar_fixture, tmp_path):
    dataset = mini_dataset(planar_fixture, tmp_path / "mini")
    cfg = tmp_path / "vo.cfg"
    cfg.write_text("# tuning\nmax_features = 180\nseed = 7\n")
    calib = str(planar_fixture / "calib.txt")

    main(["run", str(dataset), "--calib", calib,
          "--traj", str(tmp_path / "a.txt"), "--config", str(cfg)])
    report = (tmp_path / "a.txt.report.txt").read_text()
    assert "max_features = 180" in report and "seed = 7" in report

    main(["run", str(dataset), "--calib", calib,
          "--traj", str(tmp_path / "b.txt"), "--config", str(cfg),
          "--max-features", "120"])
    report = (tmp_path / "b.txt.report.txt").read_text()
    assert "max_features = 120" in report and "seed = 7" in report

    main(["run", str(dataset), "--calib", calib,
          "--traj", str(tmp_path / "c.txt")])
    report = (tmp_path / "c.txt.report.txt").read_text()
    assert "max_features = 250" in report


def test_run_unknown_config_key(planar_fixture, tmp_path):
    dataset = mini_dataset(planar_fixture, tmp_path / "mini")
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("max_speed = 9\n")
    code = main(["run", str(dataset), "--calib", str(planar_fixture / "calib.txt"),
                 "--traj", str(tmp_path / "t.txt"), "--config", str(cfg)])
    assert code == 2


def test_run_invalid_calibration(planar_fixture, tmp_path):
    calib = tmp_path / "calib.txt"
    calib.write_text("pinhole_radtan -450.0 450.0 320.0 240.0 0 0 0 0 640 480\n")
    code = main(["run", str(planar_fixture / "images"), "--calib", str(calib),
                 "--traj", str(tmp_path / "t.txt")])
    assert code == 2


def test_run_missing_dataset(planar_fixture, tmp_path):
    code = main(["run", str(tmp_path / "nowhere"),
                 "--calib", str(planar_fixture / "calib.txt"),
                 "--traj", str(tmp_path / "t.txt")])
    assert code == 2


def test_run_times_length_mismatch(planar_fixture, tmp_path):
    dataset = mini_dataset(planar_fixture, tmp_path / "mini")
    (dataset / "times.txt").write_text("0.0\n0.1\n")
    code = main(["run", str(dataset), "--calib", str(planar_fixture / "calib.txt"),
                 "--traj", str(tmp_path / "t.txt")])
    assert code == 2


def test_run_blank_dataset_lost(planar_fixture, tmp_path):
    dataset = tmp_path / "blank"
    dataset.mkdir()
    blank = GrayImage.from_array(np.zeros((480, 640)))
    for k in range(12):
        save_pgm(blank, dataset / f"{k:04d}.pgm")
    traj = tmp_path / "t.txt"
    code = main(["run", str(dataset), "--calib", str(planar_fixture / "calib.txt"),
                 "--traj", str(traj)])
    assert code == 3
    lines = [
        ln for ln in traj.read_text().splitlines()
        if ln.strip() and not ln.startswith("#")
    ]
    assert lines == []


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_identical_is_zero(planar_fixture, tmp_path, capsys):
    gt = str(planar_fixture / "gt.txt")
    metrics = tmp_path / "m.csv"
    code = main(["eval", gt, gt, "--out", str(metrics)])
    assert code == 0
    out = capsys.readouterr().out
    assert "ate_rmse = 0.000000" in out
    row = metrics.read_text().splitlines()[1]
    assert all(float(v) < 1e-12 for v in row.split(","))


def test_eval_association_failure(planar_fixture, tmp_path):
    gt = planar_fixture / "gt.txt"
    shifted = tmp_path / "shifted.txt"
    rows = []
    for ln in gt.read_text().splitlines():
        if ln.startswith("#") or not ln.strip():
            continue
        parts = ln.split()
        parts[0] = repr(float(parts[0]) + 1000.0)
        rows.append(" ".join(parts))
    shifted.write_text("\n".join(rows) + "\n")
    code = main(["eval", str(shifted), str(gt)])
    assert code == 2
