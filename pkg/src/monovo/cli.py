"""Command-line entry points.

Subcommands: `run` executes the odometry pipeline on a directory of
grayscale images and writes a trajectory plus a run report, `eval`
compares an estimated trajectory against ground truth, and `synth`
generates deterministic synthetic fixtures (scene, ground truth,
calibration, rendered images for planar scenes).

Exit codes: 0 success, 2 input or validation error, 3 tracking
permanently lost before half the frames, 4 internal numeric failure.
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, synthetic
from .errors import AssociationError, NumericError, VoError
from .geometry import CameraModel, inverse
from .imageproc import load_image, save_pgm
from .pipeline import VisualOdometry, VoConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_LOST = 3
EXIT_NUMERIC = 4

# config-file keys (flat key=value); flags override these, which override
# the VoConfig defaults
CONFIG_KEYS = {
    "max_features": int,
    "fb_threshold_px": float,
    "parallax_kf_px": float,
    "kf_survival_ratio": float,
    "retrack_window": int,
    "ba_window": int,
    "ba_mutable": int,
    "huber_delta_px": float,
    "cull_threshold_px": float,
    "ransac_confidence": float,
    "seed": int,
}

IMAGE_SUFFIXES = (".pgm", ".png")


def load_calibration(path) -> CameraModel:
    """Parse `pinhole_radtan fx fy cx cy k1 k2 p1 p2 width height`."""
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append(line)
    if len(rows) != 1:
        raise ValueError(f"{path}: expected exactly one calibration line, got {len(rows)}")
    parts = rows[0].split()
    if parts[0] != "pinhole_radtan":
        raise ValueError(f"{path}: unknown camera model {parts[0]!r}")
    if len(parts) != 11:
        raise ValueError(f"{path}: expected 10 values after the model tag, got {len(parts) - 1}")
    v = [float(x) for x in parts[1:]]
    return CameraModel(fx=v[0], fy=v[1], cx=v[2], cy=v[3], dist=tuple(v[4:8]),
                       width=int(v[8]), height=int(v[9]))


def load_config_file(path) -> dict:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = CONFIG_KEYS[key](value.strip())
    return out


def effective_config(args) -> VoConfig:
    overrides = {}
    if args.config is not None:
        overrides.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            overrides[key] = flag
    overrides["ba_async"] = bool(args.ba_async)
    return replace(VoConfig(), **overrides)


def list_images(dataset: Path) -> list:
    if not dataset.is_dir():
        raise ValueError(f"{dataset} is not a directory")
    paths = sorted(
        p for p in dataset.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise ValueError(f"{dataset} contains no {'/'.join(IMAGE_SUFFIXES)} images")
    return paths


def load_timestamps(dataset: Path, n_images: int, rate: float) -> np.ndarray:
    times_file = dataset / "times.txt"
    if not times_file.exists():
        return np.arange(n_images) / rate
    ts = []
    with open(times_file) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                ts.append(float(line))
    if len(ts) != n_images:
        raise ValueError(
            f"{times_file}: {len(ts)} timestamps for {n_images} images"
        )
    return np.array(ts)


def write_report(path, stats: dict, config: VoConfig) -> None:
    with open(path, "w") as f:
        f.write("# run report\n")
        for key, value in stats.items():
            f.write(f"{key} = {value}\n")
        f.write("[config]\n")
        for key in CONFIG_KEYS:
            f.write(f"{key} = {getattr(config, key)}\n")
        f.write(f"ba_async = {config.ba_async}\n")


def cmd_run(args) -> int:
    try:
        cam = load_calibration(args.calib)
        config = effective_config(args)
        dataset = Path(args.dataset)
        paths = list_images(dataset)
        timestamps = load_timestamps(dataset, len(paths), args.rate)
        images = [load_image(p) for p in paths]
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    vo = VisualOdometry(cam, config)
    n_keyframes = 0
    t0 = time.perf_counter()
    try:
        for img, ts in zip(images, timestamps):
            result = vo.process_frame(img, float(ts))
            n_keyframes += result.keyframe
    except NumericError as exc:
        print(f"error: numeric failure at frame {vo.frame_id}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    elapsed = time.perf_counter() - t0

    stats = {
        "frames": len(images),
        "frames_with_pose": len(vo._samples),
        "keyframes": n_keyframes,
        "landmarks_live": len(vo.landmarks),
        "landmarks_created": vo._next_landmark,
        "mean_ms_per_frame": round(1000.0 * elapsed / max(len(images), 1), 2),
        "lost_episodes": vo.lost_episodes,
        "final_mode": vo.mode,
    }
    if vo._samples:
        evaluation.save_trajectory(vo.trajectory(), args.traj)
    else:
        with open(args.traj, "w") as f:
            f.write("# timestamp tx ty tz qx qy qz qw\n")
    report_path = args.report if args.report else str(args.traj) + ".report.txt"
    write_report(report_path, stats, config)
    for key, value in stats.items():
        print(f"{key} = {value}")

    tracked_half = len(vo._samples) >= 0.5 * len(images)
    if vo.mode == "lost" and not tracked_half:
        return EXIT_LOST
    if not vo._samples:
        return EXIT_LOST
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = evaluation.load_trajectory(args.est)
        gt = evaluation.load_trajectory(args.gt)
        rmse, ate_pct = evaluation.ate_rmse(est, gt, max_dt=args.max_dt)
        drift_pct = evaluation.final_drift_pct(est, gt, max_dt=args.max_dt)
    except (OSError, ValueError, AssociationError, VoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"ate_rmse = {rmse:.6f}")
    print(f"ate_pct = {ate_pct:.4f}")
    print(f"drift_pct = {drift_pct:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("ate_rmse,ate_pct,drift_pct\n")
            f.write(f"{rmse!r},{ate_pct!r},{drift_pct!r}\n")
    if args.per_frame:
        ei, gi = evaluation.associate(est, gt, max_dt=args.max_dt)
        p_est = est.positions()[ei]
        p_gt = gt.positions()[gi]
        sim = evaluation.umeyama_align(p_est, p_gt)
        err = np.linalg.norm(sim.apply(p_est) - p_gt, axis=1)
        with open(args.per_frame, "w") as f:
            f.write("timestamp,error\n")
            for k, i in enumerate(ei):
                f.write(f"{est.timestamps[i]!r},{err[k]!r}\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cam = synthetic.default_camera(distorted=False)
        scene = synthetic.generate_scene(
            args.kind, args.landmarks, args.frames, seed=args.seed, cam=cam
        )
        synthetic.dump_scene(scene, out / "scene.txt")
        gt = evaluation.Trajectory(
            timestamps=np.asarray(scene.timestamps),
            poses=tuple(inverse(p) for p in scene.trajectory),
        )
        evaluation.save_trajectory(gt, out / "gt.txt")
        with open(out / "calib.txt", "w") as f:
            f.write("# pinhole_radtan fx fy cx cy k1 k2 p1 p2 width height\n")
            f.write(
                "pinhole_radtan "
                + " ".join(repr(float(v)) for v in
                           (cam.fx, cam.fy, cam.cx, cam.cy, *cam.dist))
                + f" {cam.width} {cam.height}\n"
            )
        with open(out / "times.txt", "w") as f:
            for ts in scene.timestamps:
                f.write(f"{float(ts)!r}\n")
        if args.kind == "planar":
            # the image directory is a run-ready dataset: frames + times.txt
            img_dir = out / "images"
            img_dir.mkdir(exist_ok=True)
            frames = synthetic.render_plane_sequence(scene, texture_seed=args.seed)
            for k, img in enumerate(frames):
                save_pgm(img, img_dir / f"{k:06d}.pgm")
            with open(img_dir / "times.txt", "w") as f:
                for ts in scene.timestamps:
                    f.write(f"{float(ts)!r}\n")
    except (OSError, ValueError, VoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"wrote {args.kind} fixture (seed {args.seed}, {args.frames} frames) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monovo", description="monocular keyframe visual odometry"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline on an image directory")
    run.add_argument("dataset", help="directory of lexicographically ordered images")
    run.add_argument("--calib", required=True, help="calibration file")
    run.add_argument("--traj", required=True, help="output trajectory path")
    run.add_argument("--report", default=None,
                     help="output report path (default: <traj>.report.txt)")
    run.add_argument("--config", default=None, help="key=value config file")
    run.add_argument("--rate", type=float, default=16.0,
                     help="frame rate when times.txt is absent (default 16)")
    run.add_argument("--ba-async", action="store_true",
                     help="run bundle adjustment in a background thread")
    run.add_argument("--max-features", dest="max_features", type=int)
    run.add_argument("--fb-threshold-px", dest="fb_threshold_px", type=float)
    run.add_argument("--parallax-kf-px", dest="parallax_kf_px", type=float)
    run.add_argument("--kf-survival-ratio", dest="kf_survival_ratio", type=float)
    run.add_argument("--retrack-window", dest="retrack_window", type=int)
    run.add_argument("--ba-window", dest="ba_window", type=int)
    run.add_argument("--ba-mutable", dest="ba_mutable", type=int)
    run.add_argument("--huber-delta-px", dest="huber_delta_px", type=float)
    run.add_argument("--cull-threshold-px", dest="cull_threshold_px", type=float)
    run.add_argument("--ransac-confidence", dest="ransac_confidence", type=float)
    run.add_argument("--seed", dest="seed", type=int)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="compare a trajectory against ground truth")
    ev.add_argument("est", help="estimated trajectory file")
    ev.add_argument("gt", help="ground-truth trajectory file")
    ev.add_argument("--out", default=None, help="write metrics CSV here")
    ev.add_argument("--per-frame", dest="per_frame", default=None,
                    help="write per-frame aligned error CSV here")
    ev.add_argument("--max-dt", dest="max_dt", type=float, default=0.02,
                    help="association time tolerance in seconds")
    ev.set_defaults(func=cmd_eval)

    sy = sub.add_parser("synth", help="generate synthetic fixtures")
    sy.add_argument("kind", choices=("planar", "volumetric", "loop"))
    sy.add_argument("--out", required=True, help="output directory")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--frames", type=int, default=200)
    sy.add_argument("--landmarks", type=int, default=400)
    sy.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
