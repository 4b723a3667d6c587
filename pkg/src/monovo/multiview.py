"""Minimal-solver multi-view geometry and robust estimation.

Provides the 5-point essential matrix solver, essential decomposition with
cheirality disambiguation, P3P absolute pose, a generic adaptive RANSAC
driver, and Levenberg-Marquardt pose refinement.  All solvers consume unit
bearing vectors so residual thresholds are angular (radians) and independent
of the camera intrinsics.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    AmbiguousDecompositionError,
    DegenerateConfigError,
    EstimationFailure,
)
from .geometry import CameraModel, Pose, matrix_to_quat, quat_mul, quat_to_matrix, so3_exp

# ---------------------------------------------------------------------------
# essential matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EssentialMatrix:
    """3x3 essential matrix over normalized image coordinates, unit Frobenius norm.

    Convention: bearings_b^T @ e @ bearings_a = 0 where the relative pose maps
    frame a into frame b (p_b = R p_a + t) and e ~ [t]x R.
    """

    e: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.e, dtype=float).reshape(3, 3)
        e = e / np.linalg.norm(e)
        s = np.linalg.svd(e, compute_uv=False)
        if abs(np.linalg.det(e)) > 1e-9 or (s[0] - s[1]) > 1e-6 * s[0]:
            raise ValueError(
                f"not an essential matrix: det={np.linalg.det(e):.3g}, sv={s}"
            )
        e.flags.writeable = False
        object.__setattr__(self, "e", e)


def project_to_essential(M: np.ndarray) -> np.ndarray:
    """Nearest essential matrix in Frobenius norm (unit-normalized)."""
    U, s, Vt = np.linalg.svd(M)
    sig = 0.5 * (s[0] + s[1])
    E = U @ np.diag([sig, sig, 0.0]) @ Vt
    return E / np.linalg.norm(E)


# --- monomial machinery for the 5-point polynomial system -----------------
# Monomials are exponent tuples over (x, y, z); graded-lex ordering with the
# 10 pure cubics first puts the quotient-ring basis in the last 10 slots.

_DEG1 = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]


def _monomials_up_to(d):
    out = []
    for total in range(d, -1, -1):
        for ex in itertools.product(range(total + 1), repeat=3):
            if sum(ex) == total:
                out.append(ex)
    return sorted(out, key=lambda e: (-sum(e), tuple(-c for c in e)))


_DEG3_ALL = _monomials_up_to(3)  # 20 monomials, the 10 cubics first
_DEG2_ALL = _monomials_up_to(2)  # 10 monomials = quotient basis
_BASIS = _DEG3_ALL[10:]
_IDX3 = {m: i for i, m in enumerate(_DEG3_ALL)}
_IDX2 = {m: i for i, m in enumerate(_DEG2_ALL)}


def _mul_table(mons_a, mons_b, idx_out):
    ii, jj, kk = [], [], []
    for i, ma in enumerate(mons_a):
        for j, mb in enumerate(mons_b):
            ii.append(i)
            jj.append(j)
            kk.append(idx_out[tuple(a + b for a, b in zip(ma, mb))])
    return np.array(ii), np.array(jj), np.array(kk)


_T11 = _mul_table(_DEG1, _DEG1, _IDX2)
_T21 = _mul_table(_DEG2_ALL, _DEG1, _IDX3)

# multiplication-by-x action on the quotient basis: each basis monomial maps
# either to another basis monomial or to a pure cubic (reduced via the
# eliminated constraint rows)
_ACTION = []
for _i, _m in enumerate(_BASIS):
    _prod = (_m[0] + 1, _m[1], _m[2])
    if _prod in _IDX2:
        _ACTION.append((_i, "basis", _IDX2[_prod]))
    else:
        _ACTION.append((_i, "cubic", _IDX3[_prod]))


def _p11(a, b):
    out = np.zeros(10)
    np.add.at(out, _T11[2], a[_T11[0]] * b[_T11[1]])
    return out


def _p21(a, b):
    out = np.zeros(20)
    np.add.at(out, _T21[2], a[_T21[0]] * b[_T21[1]])
    return out


def _mono20(x, y, z):
    return np.array([x ** i * y ** j * z ** k for i, j, k in _DEG3_ALL])


def _mono20_grad(x, y, z):
    g = np.zeros((20, 3))
    for r, (i, j, k) in enumerate(_DEG3_ALL):
        if i:
            g[r, 0] = i * x ** (i - 1) * y ** j * z ** k
        if j:
            g[r, 1] = j * x ** i * y ** (j - 1) * z ** k
        if k:
            g[r, 2] = k * x ** i * y ** j * z ** (k - 1)
    return g


def essential_5pt(bearings_a: np.ndarray, bearings_b: np.ndarray) -> list:
    """Essential matrices from exactly 5 bearing correspondences.

    Nullspace of the epipolar constraints is 4-dimensional; the cubic
    determinant and trace constraints reduce to a degree-10 eigenproblem
    via the multiplication-by-x action matrix.  Returns up to 10 real
    solutions as EssentialMatrix instances.
    """
    ba = np.asarray(bearings_a, dtype=float).reshape(5, 3)
    bb = np.asarray(bearings_b, dtype=float).reshape(5, 3)
    Q = np.einsum("ki,kj->kij", bb, ba).reshape(5, 9)
    _, s, Vt = np.linalg.svd(Q, full_matrices=True)
    if s[4] < 1e-9 * max(s[0], 1e-300):
        raise DegenerateConfigError("coincident or near-degenerate correspondences")
    EE = Vt[5:9][::-1]  # nullspace vectors; E(x,y,z) = x E1 + y E2 + z E3 + E4
    ent = EE.reshape(4, 3, 3).transpose(1, 2, 0)  # entry (r,c) = degree-1 poly

    A = np.zeros((10, 20))
    # det(E) = 0
    m01 = _p11(ent[1, 1], ent[2, 2]) - _p11(ent[1, 2], ent[2, 1])
    m02 = _p11(ent[1, 0], ent[2, 2]) - _p11(ent[1, 2], ent[2, 0])
    m03 = _p11(ent[1, 0], ent[2, 1]) - _p11(ent[1, 1], ent[2, 0])
    A[0] = _p21(m01, ent[0, 0]) - _p21(m02, ent[0, 1]) + _p21(m03, ent[0, 2])
    # 2 E E^T E - tr(E E^T) E = 0, entrywise
    S = [[None] * 3 for _ in range(3)]
    for r in range(3):
        for c in range(3):
            S[r][c] = sum(_p11(ent[r, k], ent[c, k]) for k in range(3))
    tr = S[0][0] + S[1][1] + S[2][2]
    for r in range(3):
        for c in range(3):
            row = sum(_p21(S[r][k], ent[k, c]) for k in range(3)) * 2.0
            row -= _p21(tr, ent[r, c])
            A[1 + 3 * r + c] = row

    try:
        B = np.linalg.solve(A[:, :10], A[:, 10:])
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigError(f"constraint reduction singular: {exc}") from exc
    M = np.zeros((10, 10))
    for i, kind, tgt in _ACTION:
        if kind == "basis":
            M[i, tgt] = 1.0
        else:
            M[i] = -B[tgt]
    w, V = np.linalg.eig(M)

    one = _BASIS.index((0, 0, 0))
    xi, yi, zi = (_BASIS.index(m) for m in [(1, 0, 0), (0, 1, 0), (0, 0, 1)])
    sols = []
    for k in range(10):
        if abs(w[k].imag) > 1e-8:
            continue
        v = V[:, k]
        if abs(v[one]) < 1e-12:
            continue
        v = v / v[one]
        if max(abs(v[xi].imag), abs(v[yi].imag), abs(v[zi].imag)) > 1e-8:
            continue
        x, y, z = v[xi].real, v[yi].real, v[zi].real
        # Gauss-Newton polish of the root on all 10 constraints
        for _ in range(3):
            r = A @ _mono20(x, y, z)
            J = A @ _mono20_grad(x, y, z)
            dx, *_ = np.linalg.lstsq(J, -r, rcond=None)
            x, y, z = x + dx[0], y + dx[1], z + dx[2]
            if np.max(np.abs(dx)) < 1e-14:
                break
        E = (x * EE[0] + y * EE[1] + z * EE[2] + EE[3]).reshape(3, 3)
        try:
            sols.append(EssentialMatrix(E))
        except ValueError:
            continue  # spurious root that drifted off the manifold
    return sols


def decompose_essential(E: EssentialMatrix, bearings_a: np.ndarray, bearings_b: np.ndarray):
    """Pick the (R, t) factorization with majority positive-depth support.

    Returns (Pose, inlier_count); the pose maps frame a to frame b and its
    translation has unit norm.  Raises AmbiguousDecompositionError when no
    factorization places a majority of the points in front of both cameras.
    """
    ba = np.asarray(bearings_a, dtype=float).reshape(-1, 3)
    bb = np.asarray(bearings_b, dtype=float).reshape(-1, 3)
    n = len(ba)
    if n < 1:
        raise ValueError("need at least one correspondence")

    U, _, Vt = np.linalg.svd(E.e)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            # depths from d_b * bb - d_a * (R ba) = t, per-point 2x2 least squares
            m1 = -(ba @ R.T)
            m2 = bb
            g11 = np.einsum("ij,ij->i", m1, m1)
            g12 = np.einsum("ij,ij->i", m1, m2)
            g22 = np.einsum("ij,ij->i", m2, m2)
            b1 = m1 @ t
            b2 = m2 @ t
            det = g11 * g22 - g12 * g12
            ok = det > 1e-12
            da = np.where(ok, (g22 * b1 - g12 * b2) / np.where(ok, det, 1.0), -1.0)
            db = np.where(ok, (g11 * b2 - g12 * b1) / np.where(ok, det, 1.0), -1.0)
            count = int(np.sum((da > 0) & (db > 0)))
            if best is None or count > best[0]:
                best = (count, R, t)
    count, R, t = best
    if 2 * count <= n:
        raise AmbiguousDecompositionError(
            f"best factorization fronts only {count}/{n} points"
        )
    return Pose.from_rt(R, t / np.linalg.norm(t)), count


# ---------------------------------------------------------------------------
# P3P
# ---------------------------------------------------------------------------


def p3p(bearings: np.ndarray, points: np.ndarray) -> list:
    """Camera poses from 3 bearing / world-point correspondences.

    Solves the three-distance system (quartic in the ratio of the second
    and third depths), polishes the depths by Gauss-Newton, and recovers
    each pose by 3-point absolute orientation.  Returns up to 4 poses.
    """
    f = np.asarray(bearings, dtype=float).reshape(3, 3)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    P = np.asarray(points, dtype=float).reshape(3, 3)
    if np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) < 1e-9:
        raise DegenerateConfigError("collinear world points")

    f1, f2, f3 = f
    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    ca = float(f2 @ f3)
    cb = float(f1 @ f3)
    cg = float(f1 @ f2)

    A4 = (a2 - b2 - c2) ** 2 - 4 * b2 * c2 * ca ** 2
    A3 = (-4 * a2 ** 2 * cb + 4 * a2 * b2 * ca * cg + 4 * a2 * b2 * cb
          + 8 * a2 * c2 * cb - 4 * b2 ** 2 * ca * cg + 8 * b2 * c2 * ca ** 2 * cb
          + 4 * b2 * c2 * ca * cg - 4 * b2 * c2 * cb - 4 * c2 ** 2 * cb)
    A2 = (4 * a2 ** 2 * cb ** 2 + 2 * a2 ** 2 - 8 * a2 * b2 * ca * cb * cg
          - 4 * a2 * b2 * cg ** 2 - 8 * a2 * c2 * cb ** 2 - 4 * a2 * c2
          + 4 * b2 ** 2 * ca ** 2 + 4 * b2 ** 2 * cg ** 2 - 2 * b2 ** 2
          - 4 * b2 * c2 * ca ** 2 - 8 * b2 * c2 * ca * cb * cg
          + 4 * c2 ** 2 * cb ** 2 + 2 * c2 ** 2)
    A1 = (-4 * a2 ** 2 * cb + 4 * a2 * b2 * ca * cg + 8 * a2 * b2 * cb * cg ** 2
          - 4 * a2 * b2 * cb + 8 * a2 * c2 * cb - 4 * b2 ** 2 * ca * cg
          + 4 * b2 * c2 * ca * cg + 4 * b2 * c2 * cb - 4 * c2 ** 2 * cb)
    A0 = (a2 ** 2 - 4 * a2 * b2 * cg ** 2 + 2 * a2 * b2 - 2 * a2 * c2
          + b2 ** 2 - 2 * b2 * c2 + c2 ** 2)

    if abs(A4) < 1e-14 * max(abs(A3), abs(A2), abs(A1), abs(A0), 1.0):
        coeffs = [A3, A2, A1, A0]
    else:
        coeffs = [A4, A3, A2, A1, A0]
    roots = np.roots(coeffs)

    sols = []
    for v in roots:
        if abs(v.imag) > 1e-8 or v.real <= 0:
            continue
        v = float(v.real)
        Bv = 1.0 + v * v - 2.0 * v * cb
        if Bv <= 0:
            continue
        den = 2.0 * b2 * (cg - ca * v)
        if abs(den) > 1e-12 * b2:
            us = [(b2 * (1 - v * v) + Bv * (a2 - c2)) / den]
        else:
            disc = cg * cg - (1.0 - Bv * c2 / b2)
            if disc < 0:
                continue
            us = [cg + np.sqrt(disc), cg - np.sqrt(disc)]
        for u in us:
            if u <= 0:
                continue
            s = np.sqrt(b2 / Bv) * np.array([1.0, u, v])
            # polish the three depths on the distance equations
            for _ in range(3):
                r = np.array([
                    s[1] ** 2 + s[2] ** 2 - 2 * s[1] * s[2] * ca - a2,
                    s[0] ** 2 + s[2] ** 2 - 2 * s[0] * s[2] * cb - b2,
                    s[0] ** 2 + s[1] ** 2 - 2 * s[0] * s[1] * cg - c2,
                ])
                J = np.array([
                    [0.0, 2 * s[1] - 2 * s[2] * ca, 2 * s[2] - 2 * s[1] * ca],
                    [2 * s[0] - 2 * s[2] * cb, 0.0, 2 * s[2] - 2 * s[0] * cb],
                    [2 * s[0] - 2 * s[1] * cg, 2 * s[1] - 2 * s[0] * cg, 0.0],
                ])
                try:
                    s = s - np.linalg.solve(J, r)
                except np.linalg.LinAlgError:
                    break
            if np.any(s <= 0) or not np.all(np.isfinite(s)):
                continue
            # absolute orientation from the 3 camera-frame points
            Y = s[:, None] * f
            Pm, Ym = P.mean(axis=0), Y.mean(axis=0)
            H = (P - Pm).T @ (Y - Ym)
            U, _, Vt = np.linalg.svd(H)
            D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
            R = Vt.T @ D @ U.T
            t = Ym - R @ Pm
            dup = any(
                np.max(np.abs(R - p.rotation_matrix())) + np.max(np.abs(t - p.t)) < 1e-9
                for p in sols
            )
            if not dup:
                sols.append(Pose.from_rt(R, t))
    return sols


# ---------------------------------------------------------------------------
# residual functions used by RANSAC callers
# ---------------------------------------------------------------------------


def epipolar_angular_residual(E: EssentialMatrix, data) -> np.ndarray:
    """Symmetric angular distance of each bearing pair to its epipolar plane."""
    ba, bb = data
    na = ba @ E.e.T  # plane normals in frame b: E @ ba
    nb = bb @ E.e  # plane normals in frame a: E^T @ bb
    sa = np.abs(np.einsum("ij,ij->i", bb, na)) / np.maximum(
        np.linalg.norm(na, axis=1), 1e-300
    )
    sb = np.abs(np.einsum("ij,ij->i", ba, nb)) / np.maximum(
        np.linalg.norm(nb, axis=1), 1e-300
    )
    return np.arcsin(np.clip(np.maximum(sa, sb), 0.0, 1.0))


def bearing_angular_residual(pose: Pose, data) -> np.ndarray:
    """Angle between each observed bearing and the predicted one."""
    bearings, points = data
    b = np.asarray(bearings, dtype=float)
    pc = pose.apply(points)
    norms = np.linalg.norm(pc, axis=1)
    pred = pc / np.maximum(norms, 1e-300)[:, None]
    # atan2 form stays accurate for angles near 0 and near pi
    sin = np.linalg.norm(np.cross(pred, b), axis=1)
    cos = np.einsum("ij,ij->i", pred, b)
    ang = np.arctan2(sin, cos)
    return np.where(norms > 1e-12, ang, np.pi)


def refit_essential(E: EssentialMatrix, data):
    """Linear least-squares essential matrix from >= 8 inlier correspondences."""
    ba, bb = data
    if len(ba) < 8:
        return None
    Q = np.einsum("ki,kj->kij", bb, ba).reshape(len(ba), 9)
    _, _, Vt = np.linalg.svd(Q)
    return EssentialMatrix(project_to_essential(Vt[-1].reshape(3, 3)))


# ---------------------------------------------------------------------------
# planar homography
# ---------------------------------------------------------------------------


def _plane_coords(bearings: np.ndarray) -> np.ndarray:
    """Bearings -> homogeneous normalized image points (x, y, 1)."""
    b = np.asarray(bearings, dtype=float).reshape(-1, 3)
    out = b / b[:, 2:3]
    return out


def homography_4pt(bearings_a: np.ndarray, bearings_b: np.ndarray) -> list:
    """DLT homography x_b ~ H x_a over normalized image coordinates.

    Accepts >= 4 correspondences (least squares beyond 4).  Residuals of
    the returned unit-norm H are in normalized-plane units, which for
    small errors near the axis coincide with radians.
    """
    xa = _plane_coords(bearings_a)
    xb = _plane_coords(bearings_b)
    n = len(xa)
    if n < 4:
        raise DegenerateConfigError(f"need >= 4 correspondences, got {n}")
    A = np.zeros((2 * n, 9))
    A[0::2, 3:6] = -xa
    A[0::2, 6:9] = xb[:, 1:2] * xa
    A[1::2, 0:3] = xa
    A[1::2, 6:9] = -xb[:, 0:1] * xa
    _, s, Vt = np.linalg.svd(A)
    if n == 4 and s[-2] < 1e-10:
        raise DegenerateConfigError("degenerate homography sample")
    H = Vt[-1].reshape(3, 3)
    return [H / np.linalg.norm(H)]


def homography_transfer_residual(H: np.ndarray, data) -> np.ndarray:
    """Symmetric transfer error, the worse of forward and backward."""
    ba, bb = data
    xa = _plane_coords(ba)
    xb = _plane_coords(bb)
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(xa), np.inf)
    fwd = xa @ H.T
    bwd = xb @ Hinv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        df = np.hypot(fwd[:, 0] / fwd[:, 2] - xb[:, 0],
                      fwd[:, 1] / fwd[:, 2] - xb[:, 1])
        db = np.hypot(bwd[:, 0] / bwd[:, 2] - xa[:, 0],
                      bwd[:, 1] / bwd[:, 2] - xa[:, 1])
    r = np.maximum(df, db)
    return np.where(np.isfinite(r), r, np.inf)


def refit_homography(H: np.ndarray, data):
    """Least-squares homography over the inlier set (None if impossible)."""
    ba, bb = data
    if len(ba) < 4:
        return None
    try:
        return homography_4pt(ba, bb)[0]
    except DegenerateConfigError:
        return None


def decompose_homography(
    H: np.ndarray,
    bearings_a: np.ndarray,
    bearings_b: np.ndarray,
    threshold: float,
) -> list:
    """Planar decompositions H ~ R + t n^T ranked by cheirality support.

    Returns [(pose, plane normal, support)] sorted by decreasing support.
    Support counts correspondences whose ray-plane intersection has
    positive depth in both views and reprojects within `threshold`
    radians in the second view.  The plane sits at unit distance, so
    |t| carries the baseline/plane-distance ratio.  Raises
    DegenerateConfigError when H is numerically a pure rotation (no
    translation or no plane observable).
    """
    ba = np.asarray(bearings_a, dtype=float).reshape(-1, 3)
    bb = np.asarray(bearings_b, dtype=float).reshape(-1, 3)
    sv = np.linalg.svd(H, compute_uv=False)
    Hn = np.asarray(H, dtype=float) / sv[1]
    signs = np.einsum("ki,ij,kj->k", bb, Hn, ba)
    if np.median(signs) < 0:
        Hn = -Hn
    U, s, Vt = np.linalg.svd(Hn)
    s1, s3 = s[0], s[2]
    if s1 - s3 < 1e-7:
        raise DegenerateConfigError("homography is a pure rotation")
    V = Vt.T
    if np.linalg.det(V) < 0:
        V = -V
    v1, v2, v3 = V[:, 0], V[:, 1], V[:, 2]
    denom = np.sqrt(max(s1 * s1 - s3 * s3, 1e-300))
    a = np.sqrt(max(1.0 - s3 * s3, 0.0))
    b = np.sqrt(max(s1 * s1 - 1.0, 0.0))
    candidates = []
    for u in (
        (a * v1 + b * v3) / denom,
        (a * v1 - b * v3) / denom,
    ):
        Uc = np.column_stack([v2, u, np.cross(v2, u)])
        Wc = np.column_stack([Hn @ v2, Hn @ u, np.cross(Hn @ v2, Hn @ u)])
        R = Wc @ Uc.T
        n = np.cross(v2, u)
        t = (Hn - R) @ n
        candidates.append((R, t, n))
        candidates.append((R, -t, -n))

    out = []
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for R, t, n in candidates:
            dn = ba @ n
            depth = np.where(np.abs(dn) > 1e-12, 1.0 / dn, np.inf)
            Pa = ba * depth[:, None]
            Pb = Pa @ R.T + t
            ok = (dn > 1e-9) & (Pb[:, 2] > 1e-9)
            norms = np.linalg.norm(Pb, axis=1)
            nb = Pb / np.where(norms > 0, norms, 1.0)[:, None]
            dot = np.clip((nb * bb).sum(axis=1), -1.0, 1.0)
            crs = np.linalg.norm(np.cross(nb, bb), axis=1)
            ang = np.arctan2(crs, dot)
            ok &= np.isfinite(ang) & (ang <= threshold)
            support = int(ok.sum())
            if support > 0:
                out.append((Pose.from_rt(R, t), n.copy(), support))
    if not out:
        raise DegenerateConfigError("no homography decomposition with support")
    out.sort(key=lambda c: -c[2])
    return out


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


@dataclass
class RansacResult:
    model: object
    inliers: np.ndarray
    iterations_run: int
    inlier_ratio: float


def ransac(
    data,
    solver,
    residual,
    threshold: float,
    sample_size: int,
    confidence: float = 0.99,
    max_iters: int = 1000,
    rng_seed: int = 0,
    validate=None,
    refit=None,
) -> RansacResult:
    """Adaptive-iteration RANSAC over a tuple of parallel data arrays.

    solver(sample_tuple) returns a list of candidate models; residual(model,
    data) a per-datum residual array.  When `validate` is given, one extra
    correspondence is drawn per iteration and models failing
    validate(model, extra_tuple, threshold) are discarded before scoring.
    `refit(model, inlier_tuple)` may return an improved model (or None).
    Deterministic for fixed rng_seed.
    """
    n = len(data[0])
    if n < sample_size:
        raise EstimationFailure(f"need {sample_size} correspondences, got {n}")
    rng = np.random.default_rng(rng_seed)
    draw = sample_size + (1 if validate is not None else 0)
    if n < draw:
        raise EstimationFailure(f"need {draw} correspondences for validated sampling, got {n}")

    best_count = 0
    best_model = None
    best_mask = None
    needed = max_iters
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, size=draw, replace=False)
        sample = tuple(d[idx[:sample_size]] for d in data)
        try:
            models = solver(sample)
        except DegenerateConfigError:
            continue
        extra = tuple(d[idx[sample_size:]] for d in data) if validate is not None else None
        for model in models:
            if validate is not None and not validate(model, extra, threshold):
                continue
            r = residual(model, data)
            mask = r <= threshold
            count = int(mask.sum())
            if count > best_count:
                best_count, best_model, best_mask = count, model, mask
                ratio = count / n
                fail_p = 1.0 - ratio ** sample_size
                if fail_p <= 1e-12:
                    needed = it
                else:
                    needed = min(
                        max_iters, int(np.ceil(np.log(1.0 - confidence) / np.log(fail_p)))
                    )

    if best_model is None or best_count < sample_size + 1:
        raise EstimationFailure(
            f"no model with > {sample_size} inliers in {it} iterations"
        )
    if refit is not None:
        refined = refit(best_model, tuple(d[best_mask] for d in data))
        if refined is not None:
            r = residual(refined, data)
            mask = r <= threshold
            if int(mask.sum()) >= best_count:
                best_model, best_mask, best_count = refined, mask, int(mask.sum())
    return RansacResult(
        model=best_model,
        inliers=np.nonzero(best_mask)[0],
        iterations_run=it,
        inlier_ratio=best_count / n,
    )


def validate_p3p(pose: Pose, extra, threshold: float) -> bool:
    """Accept a P3P candidate only if the extra correspondence agrees."""
    return bool(bearing_angular_residual(pose, extra)[0] <= threshold)


# ---------------------------------------------------------------------------
# pose refinement
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    pose: Pose
    converged: bool
    initial_cost: float
    final_cost: float
    iterations: int


def _reproj_residual(pose: Pose, cam: CameraModel, points: np.ndarray, obs: np.ndarray):
    pc = pose.apply(points)
    z = pc[:, 2]
    if np.any(z <= 1e-12):
        return None, None
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    r = np.stack([u, v], axis=-1) - obs
    return r.ravel(), pc


def _reproj_jacobian(cam: CameraModel, pc: np.ndarray) -> np.ndarray:
    """d(residual)/d(omega, upsilon) for a left increment on the camera frame."""
    n = len(pc)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    J = np.zeros((n, 2, 6))
    iz = 1.0 / z
    # d(proj)/d(pc)
    du = np.stack([cam.fx * iz, np.zeros(n), -cam.fx * x * iz * iz], axis=-1)
    dv = np.stack([np.zeros(n), cam.fy * iz, -cam.fy * y * iz * iz], axis=-1)
    # d(pc)/d(omega) = -[pc]x ; d(pc)/d(upsilon) = I
    for r, drow in ((0, du), (1, dv)):
        J[:, r, 0] = drow[:, 1] * z - drow[:, 2] * y
        J[:, r, 1] = drow[:, 2] * x - drow[:, 0] * z
        J[:, r, 2] = drow[:, 0] * y - drow[:, 1] * x
        J[:, r, 3:6] = drow
    J[:, :, 0:3] *= -1.0
    return J.reshape(2 * n, 6)


def _apply_increment(pose: Pose, delta: np.ndarray) -> Pose:
    dq = so3_exp(delta[:3])
    R = quat_to_matrix(dq)
    return Pose(quat_mul(dq, pose.q), R @ pose.t + delta[3:])


def refine_pose(
    initial: Pose,
    cam: CameraModel,
    landmarks: np.ndarray,
    observations: np.ndarray,
    max_iters: int = 20,
) -> RefineResult:
    """Levenberg-Marquardt reprojection-error minimization over one pose.

    Parameterized by local 6-vector increments (rotation exponential map,
    rebased each accepted step).  Accepted-step costs are non-increasing;
    stops on gradient infinity norm < 1e-8, step norm < 1e-10, or max_iters.
    """
    points = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    if len(points) < 4:
        raise ValueError(f"need >= 4 correspondences, got {len(points)}")

    pose = initial
    r, pc = _reproj_residual(pose, cam, points, obs)
    if r is None or not np.all(np.isfinite(r)):
        return RefineResult(initial, False, np.inf, np.inf, 0)
    cost = float(r @ r)
    initial_cost = cost
    lam = 1e-4
    accepted_any = False
    it = 0
    while it < max_iters:
        it += 1
        J = _reproj_jacobian(cam, pc)
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-8:
            return RefineResult(pose, True, initial_cost, cost, it)
        H = J.T @ J
        try:
            delta = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
        except np.linalg.LinAlgError:
            if not accepted_any:
                return RefineResult(initial, False, initial_cost, initial_cost, it)
            return RefineResult(pose, True, initial_cost, cost, it)
        candidate = _apply_increment(pose, delta)
        r_new, pc_new = _reproj_residual(candidate, cam, points, obs)
        new_cost = float(r_new @ r_new) if r_new is not None else np.inf
        if new_cost < cost:
            pose, r, pc, cost = candidate, r_new, pc_new, new_cost
            lam /= 3.0
            accepted_any = True
            if np.linalg.norm(delta) < 1e-10:
                break
        else:
            lam *= 2.0
    return RefineResult(pose, accepted_any, initial_cost, cost, it)
