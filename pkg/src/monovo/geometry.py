"""Core 3D types and projective operations.

Conventions used throughout the library:

- Quaternions are stored scalar-last, ``[qx, qy, qz, qw]``, unit norm.
- ``Pose`` maps world coordinates to camera coordinates:
  ``p_cam = R @ p_world + t``.  Trajectory export inverts this to
  camera-in-world.
- All pipeline pixel coordinates are undistorted; distortion is compensated
  once at ingestion, so ``project`` applies the pinhole model only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, CheiralityError, LowParallaxError, NumericError

# ---------------------------------------------------------------------------
# quaternion helpers (scalar-last, vectorized over leading axes)
# ---------------------------------------------------------------------------


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 for scalar-last quaternions (broadcasts)."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    x1, y1, z1, w1 = np.moveaxis(q1, -1, 0)
    x2, y2, z2, w2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to scalar-last unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize(np.array([x, y, z, w]))


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation-vector exponential map, returns a scalar-last quaternion."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # first-order expansion keeps the map smooth through zero
        q = np.array([0.5 * w[0], 0.5 * w[1], 0.5 * w[2], 1.0])
        return quat_normalize(q)
    axis = w / theta
    s = np.sin(0.5 * theta)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * theta)])


def so3_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a scalar-last unit quaternion."""
    q = quat_normalize(q)
    if q[3] < 0:
        q = -q
    vn = np.linalg.norm(q[:3])
    if vn < 1e-12:
        return 2.0 * q[:3]
    theta = 2.0 * np.arctan2(vn, q[3])
    return q[:3] * (theta / vn)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform world -> camera: p_cam = R(q) @ p_world + t.

    q is a scalar-last unit quaternion, t a 3-vector in world units.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(matrix_to_quat(R), t)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.t
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world point(s) into the camera frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix().T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -(self.rotation_matrix().T @ self.t)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose composition: compose(a, b).apply(x) == a.apply(b.apply(x))."""
    q = quat_normalize(quat_mul(a.q, b.q))
    t = quat_to_matrix(a.q) @ b.t + a.t
    return Pose(q, t)


def inverse(a: Pose) -> Pose:
    qi = quat_conj(a.q)
    return Pose(qi, -(quat_to_matrix(qi) @ a.t))


def rotate_bearing(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply only the rotation part to direction vector(s)."""
    v = np.asarray(v, dtype=float)
    return v @ quat_to_matrix(q).T


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with radial-tangential distortion (k1, k2, p1, p2)."""

    fx: float
    fy: float
    cx: float
    cy: float
    dist: tuple = (0.0, 0.0, 0.0, 0.0)
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))
        if len(self.dist) != 4:
            raise ValueError("dist must hold 4 coefficients (k1, k2, p1, p2)")

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_to_normalized(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y], axis=-1)

    def normalized_to_pixel(self, norm: np.ndarray) -> np.ndarray:
        norm = np.asarray(norm, dtype=float)
        return np.stack(
            [norm[..., 0] * self.fx + self.cx, norm[..., 1] * self.fy + self.cy], axis=-1
        )

    def pixel_to_bearing(self, pixels: np.ndarray) -> np.ndarray:
        """Undistorted pixel(s) -> unit bearing vector(s) in the camera frame."""
        n = self.pixel_to_normalized(pixels)
        b = np.concatenate([n, np.ones(n.shape[:-1] + (1,))], axis=-1)
        return b / np.linalg.norm(b, axis=-1, keepdims=True)

    def bearing_to_pixel(self, bearings: np.ndarray) -> np.ndarray:
        """Camera-frame direction(s) with positive z -> undistorted pixel(s)."""
        bearings = np.asarray(bearings, dtype=float)
        z = bearings[..., 2]
        if np.any(z <= 0):
            raise BehindCameraError("bearing points behind the camera")
        return np.stack(
            [
                bearings[..., 0] / z * self.fx + self.cx,
                bearings[..., 1] / z * self.fy + self.cy,
            ],
            axis=-1,
        )

    def contains(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        return (
            (pixels[..., 0] >= margin)
            & (pixels[..., 0] <= self.width - 1 - margin)
            & (pixels[..., 1] >= margin)
            & (pixels[..., 1] <= self.height - 1 - margin)
        )


@dataclass
class Landmark:
    """A triangulated 3D map point with its keyframe observations."""

    id: int
    position: np.ndarray
    observations: dict = field(default_factory=dict)  # keyframe id -> pixel (2,)
    status: str = "active"  # active | culled

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


# ---------------------------------------------------------------------------
# projection / distortion / triangulation
# ---------------------------------------------------------------------------


def project(pose: Pose, cam: CameraModel, point: np.ndarray) -> np.ndarray:
    """Project a world point to an undistorted pixel (u, v).

    Raises BehindCameraError when the camera-frame depth is not positive.
    """
    pc = pose.apply(np.asarray(point, dtype=float))
    if pc[2] <= 0:
        raise BehindCameraError(f"point depth {pc[2]:.6g} <= 0")
    return np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])


def project_many(pose: Pose, cam: CameraModel, points: np.ndarray):
    """Vectorized projection; returns (pixels, depths) without raising.

    Callers filter on depths > 0 themselves.
    """
    pc = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return np.stack([u, v], axis=-1), z


def distort_pixel(cam: CameraModel, pixel: np.ndarray) -> np.ndarray:
    """Apply the radial-tangential model to an ideal (undistorted) pixel."""
    k1, k2, p1, p2 = cam.dist
    n = cam.pixel_to_normalized(pixel)
    x, y = n[..., 0], n[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return cam.normalized_to_pixel(np.stack([xd, yd], axis=-1))


def undistort_pixel(cam: CameraModel, raw: np.ndarray, max_iters: int = 20, tol_px: float = 1e-8) -> np.ndarray:
    """Invert the distortion model by fixed-point iteration.

    Returns the ideal pixel whose distortion reproduces ``raw``.  Raises
    NumericError if the iteration has not converged to ``tol_px`` pixels.
    """
    k1, k2, p1, p2 = cam.dist
    raw = np.asarray(raw, dtype=float)
    nd = cam.pixel_to_normalized(raw)
    xd, yd = nd[..., 0], nd[..., 1]
    x, y = xd.copy(), yd.copy()
    f = max(cam.fx, cam.fy)
    for _ in range(max_iters + 1):
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        dy = p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        # residual of re-distorting the current estimate, in pixels
        res = f * np.hypot(x * radial + dx - xd, y * radial + dy - yd)
        if np.max(res) < tol_px:
            break
        x = (xd - dx) / radial
        y = (yd - dy) / radial
    else:
        raise NumericError(f"undistortion did not converge, residual {np.max(res):.3g} px")
    return cam.normalized_to_pixel(np.stack([x, y], axis=-1))


def triangulate(
    pose_a: Pose,
    pose_b: Pose,
    cam: CameraModel,
    obs_a: np.ndarray,
    obs_b: np.ndarray,
    min_parallax_rad: float = 1e-3,
) -> np.ndarray:
    """Two-view DLT triangulation of undistorted pixel observations.

    Raises LowParallaxError when the world-frame viewing rays are within
    ``min_parallax_rad`` of parallel, CheiralityError when the linear
    solution lands behind either camera.
    """
    na = cam.pixel_to_normalized(np.asarray(obs_a, dtype=float))
    nb = cam.pixel_to_normalized(np.asarray(obs_b, dtype=float))

    Ra, Rb = pose_a.rotation_matrix(), pose_b.rotation_matrix()
    ray_a = Ra.T @ np.array([na[0], na[1], 1.0])
    ray_b = Rb.T @ np.array([nb[0], nb[1], 1.0])
    cosang = abs(ray_a @ ray_b) / (np.linalg.norm(ray_a) * np.linalg.norm(ray_b))
    if np.arccos(min(cosang, 1.0)) < min_parallax_rad:
        raise LowParallaxError("viewing rays nearly parallel")

    Pa = np.hstack([Ra, pose_a.t[:, None]])
    Pb = np.hstack([Rb, pose_b.t[:, None]])
    A = np.vstack(
        [
            na[0] * Pa[2] - Pa[0],
            na[1] * Pa[2] - Pa[1],
            nb[0] * Pb[2] - Pb[0],
            nb[1] * Pb[2] - Pb[1],
        ]
    )
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-15:
        raise LowParallaxError("triangulated point at infinity")
    X = Xh[:3] / Xh[3]
    if pose_a.apply(X)[2] <= 0 or pose_b.apply(X)[2] <= 0:
        raise CheiralityError("triangulated point behind a camera")
    return X
