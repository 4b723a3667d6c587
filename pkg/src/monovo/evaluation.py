"""Trajectory metrics: similarity alignment, ATE RMSE, final drift.

Trajectories hold camera-in-world poses with strictly increasing
timestamps.  Error metrics first associate samples by nearest timestamp,
then align the estimate onto the ground truth with a closed-form
least-squares similarity, so they are invariant to the gauge freedom of
monocular odometry (global rotation, translation, and scale).

Drift and the percentage form of ATE are normalized by the ground-truth
path length; the raw RMSE in length units is reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssociationError, DegenerateConfigError
from .geometry import Pose


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered camera-in-world poses."""

    timestamps: np.ndarray  # (n,) seconds, strictly increasing
    poses: tuple            # n Pose, p_world = R p_cam + t (camera center = t)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(ts) < 1:
            raise ValueError("trajectory needs >= 1 sample")
        if len(ts) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        ts.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True)
class Similarity:
    """p -> scale * rotation @ p + translation."""

    scale: float
    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(r) - 1) > 1e-10:
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation


def path_length(positions: np.ndarray) -> float:
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(positions, axis=0), axis=1).sum())


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """One-to-one nearest-timestamp pairing with |dt| <= max_dt.

    Returns (est indices, gt indices) as parallel int arrays ordered by
    est time.  Raises AssociationError when nothing pairs up.
    """
    cand = []
    gt_ts = gt.timestamps
    for i, t in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt_ts - t)))
        dt = abs(gt_ts[j] - t)
        if dt <= max_dt:
            cand.append((dt, i, j))
    cand.sort()
    used_i, used_j = set(), set()
    pairs = []
    for dt, i, j in cand:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    if not pairs:
        raise AssociationError(
            f"no sample pairs within {max_dt}s "
            f"(est spans {est.timestamps[0]:.3f}..{est.timestamps[-1]:.3f}, "
            f"gt spans {gt.timestamps[0]:.3f}..{gt.timestamps[-1]:.3f})"
        )
    pairs.sort()
    idx = np.array(pairs, dtype=int)
    return idx[:, 0], idx[:, 1]


def umeyama_align(source: np.ndarray, target: np.ndarray) -> Similarity:
    """Least-squares similarity minimizing sum ||target - (s R source + t)||^2."""
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) != len(target):
        raise ValueError("source and target differ in length")
    if len(source) < 3:
        raise ValueError("alignment needs >= 3 point pairs")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    sc = source - mu_s
    tc = target - mu_t
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfigError("source points are collinear")
    cov = tc.T @ sc / len(source)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.sign(np.linalg.det(u @ vt))
    flip = np.array([1.0, 1.0, sgn])
    rot = u @ np.diag(flip) @ vt
    var_s = (sc**2).sum() / len(source)
    scale = float((d * flip).sum() / var_s)
    trans = mu_t - scale * rot @ mu_s
    return Similarity(scale=scale, rotation=rot, translation=trans)


def _aligned_pairs(est: Trajectory, gt: Trajectory, max_dt: float):
    ei, gi = associate(est, gt, max_dt)
    p_est = est.positions()[ei]
    p_gt = gt.positions()[gi]
    sim = umeyama_align(p_est, p_gt)
    return sim.apply(p_est), p_gt


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """(RMSE in length units, RMSE as % of ground-truth path length)."""
    aligned, p_gt = _aligned_pairs(est, gt, max_dt)
    rmse = float(np.sqrt(np.mean(np.sum((aligned - p_gt) ** 2, axis=1))))
    gt_len = path_length(gt.positions())
    if gt_len <= 0:
        raise ValueError("ground-truth path length is zero")
    return rmse, 100.0 * rmse / gt_len


def final_drift_pct(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> float:
    """Endpoint error after alignment as % of ground-truth path length."""
    aligned, p_gt = _aligned_pairs(est, gt, max_dt)
    gt_len = path_length(gt.positions())
    if gt_len <= 0:
        raise ValueError("ground-truth path length is zero")
    return float(100.0 * np.linalg.norm(aligned[-1] - p_gt[-1]) / gt_len)


# ---------------------------------------------------------------------------
# trajectory files: `timestamp tx ty tz qx qy qz qw`, '#' comments
# ---------------------------------------------------------------------------


def save_trajectory(traj: Trajectory, path):
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in zip(traj.timestamps, traj.poses):
            vals = [ts, *pose.t, *pose.q]
            f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_trajectory(path) -> Trajectory:
    timestamps = []
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(
                    f"{path}:{lineno}: expected 8 fields "
                    f"(timestamp tx ty tz qx qy qz qw), got {len(parts)}"
                )
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            timestamps.append(vals[0])
            poses.append(Pose(q=np.array(vals[4:8]), t=np.array(vals[1:4])))
    if not poses:
        raise ValueError(f"{path}: no trajectory samples")
    return Trajectory(timestamps=np.array(timestamps), poses=tuple(poses))
