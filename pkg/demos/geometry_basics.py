"""
Poses, projection, triangulation, and P3P
=========================================

Round-trips a handful of world points through two cameras: project,
triangulate back, then recover the second camera's pose from three
point correspondences with P3P.
"""

import numpy as np

from monovo.geometry import CameraModel, Pose, inverse, project, triangulate
from monovo.multiview import p3p

rng = np.random.default_rng(0)
cam = CameraModel(fx=450.0, fy=450.0, cx=320.0, cy=240.0, width=640, height=480)

# two cameras looking down +z, the second shifted right by 0.4
pose_a = Pose.identity()
pose_b = Pose.from_rt(np.eye(3), np.array([-0.4, 0.0, 0.0]))

# world points in the shared field of view
X = np.column_stack([
    rng.uniform(-1.0, 1.0, 8), rng.uniform(-0.7, 0.7, 8), rng.uniform(3.0, 6.0, 8),
])

print("point -> pixel a -> pixel b -> triangulated round trip")
worst = 0.0
for x in X:
    ua = project(pose_a, cam, x)
    ub = project(pose_b, cam, x)
    back = triangulate(pose_a, pose_b, cam, ua, ub)
    err = np.max(np.abs(back - x))
    worst = max(worst, err)
    print(f"  {x.round(3)}  a={ua.round(1)}  b={ub.round(1)}  err={err:.2e}")
print(f"worst round-trip error: {worst:.2e}\n")

# P3P: bearings of three points in camera b against their world positions
pc = pose_b.apply(X[:3])
bearings = pc / np.linalg.norm(pc, axis=1, keepdims=True)
solutions = p3p(bearings, X[:3])
print(f"P3P returned {len(solutions)} pose(s); distance to the true pose:")
for p in solutions:
    dr = np.max(np.abs(p.rotation_matrix() - pose_b.rotation_matrix()))
    dt = np.max(np.abs(p.t - pose_b.t))
    print(f"  rotation {dr:.2e}  translation {dt:.2e}")

# poses compose like transforms: camera center is the inverse-applied origin
center_b = inverse(pose_b).apply(np.zeros(3))
print(f"\ncamera b center in the world: {center_b.round(3)}")
