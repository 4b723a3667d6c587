"""
Two-view relative pose: essential matrix and planar homography
==============================================================

Estimates the relative motion between two views twice: once from a
volumetric point cloud with the 5-point essential solver, once from a
planar scene where the essential route degenerates and the homography
decomposition takes over.
"""

import numpy as np

from monovo.geometry import quat_normalize, quat_to_matrix
from monovo.multiview import (
    decompose_essential,
    decompose_homography,
    epipolar_angular_residual,
    essential_5pt,
    homography_4pt,
    homography_transfer_residual,
    ransac,
    refit_essential,
    refit_homography,
)

rng = np.random.default_rng(4)

R_true = quat_to_matrix(quat_normalize(np.array([0.02, -0.04, 0.01, 1.0])))
t_true = np.array([0.6, 0.05, 0.1])
t_unit = t_true / np.linalg.norm(t_true)


def bearings_of(P):
    return P / np.linalg.norm(P, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# volumetric scene: essential matrix with outliers
# ---------------------------------------------------------------------------

Pa = np.column_stack([
    rng.uniform(-2, 2, 120), rng.uniform(-1.5, 1.5, 120), rng.uniform(3, 9, 120),
])
ba = bearings_of(Pa)
bb = bearings_of(Pa @ R_true.T + t_true)
bb[:15] = bearings_of(rng.normal(size=(15, 3)) + [0, 0, 5])  # 15 bad matches

res = ransac(
    (ba, bb), solver=lambda s: essential_5pt(s[0], s[1]),
    residual=epipolar_angular_residual, threshold=1.5e-3, sample_size=5,
    confidence=0.999, rng_seed=7, refit=refit_essential,
)
pose, support = decompose_essential(res.model, ba[res.inliers], bb[res.inliers])
print(f"essential: {len(res.inliers)}/120 inliers, {support} pass cheirality")
print(f"  rotation error {np.max(np.abs(pose.rotation_matrix() - R_true)):.2e}")
print(f"  direction error {np.max(np.abs(pose.t - t_unit)):.2e}")

# ---------------------------------------------------------------------------
# planar scene: the homography route
# ---------------------------------------------------------------------------

# points on the plane n.x = d with n = (0.1, -0.05, 1), d = 4
n = np.array([0.1, -0.05, 1.0])
n /= np.linalg.norm(n)
d = 4.0
Pa = np.column_stack([
    rng.uniform(-2, 2, 120), rng.uniform(-1.5, 1.5, 120), np.zeros(120),
])
Pa[:, 2] = (d - Pa[:, :2] @ n[:2]) / n[2]
ba = bearings_of(Pa)
bb = bearings_of(Pa @ R_true.T + t_true)

res = ransac(
    (ba, bb), solver=lambda s: homography_4pt(s[0], s[1]),
    residual=homography_transfer_residual, threshold=1.5e-3, sample_size=4,
    confidence=0.999, rng_seed=8, refit=refit_homography,
)
cands = decompose_homography(res.model, ba[res.inliers], bb[res.inliers], 3e-3)
print(f"\nhomography: {len(res.inliers)}/120 inliers, "
      f"{len(cands)} decomposition candidate(s)")
for pose, normal, sup in cands:
    dr = np.max(np.abs(pose.rotation_matrix() - R_true))
    dt = np.max(np.abs(pose.t / np.linalg.norm(pose.t) - t_unit))
    dn = np.max(np.abs(normal - n))
    print(f"  support {sup:3d}  rot err {dr:.1e}  dir err {dt:.1e}  normal err {dn:.1e}")
print("the true motion is the full-support candidate; scale |t|/d is"
      f" {np.linalg.norm(cands[0][0].t):.4f} (expected"
      f" {np.linalg.norm(t_true) / d:.4f})")
