"""Levenberg-Marquardt core and windowed local bundle adjustment.

The bundle adjuster jointly refines the most recent keyframe poses and the
landmarks they observe, holding anchor keyframes fixed for gauge.  The
normal equations are solved by Schur complement on the 3x3 landmark blocks;
residuals are whitened by their observation sigma and robustified with a
Huber kernel via iteratively reweighted least squares, with step acceptance
decided on the true robust cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .geometry import CameraModel, Pose, quat_mul, quat_to_matrix, so3_exp

# ---------------------------------------------------------------------------
# generic Levenberg-Marquardt on a parameter vector
# ---------------------------------------------------------------------------


@dataclass
class LMOptions:
    max_iters: int = 50
    grad_tol: float = 1e-8
    rel_cost_tol: float = 1e-10
    lam0: float = 1e-4


def levenberg_marquardt(residual_fn, jacobian_fn, x0, opts: LMOptions | None = None):
    """Damped Gauss-Newton minimization of ||residual_fn(x)||^2.

    Damping doubles on a rejected step and shrinks by 1/3 on acceptance.
    Stops on gradient infinity norm < grad_tol, relative cost change
    < rel_cost_tol, or max_iters.  Returns (x, final_cost, iterations).
    """
    opts = opts or LMOptions()
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise NumericError("non-finite residual at x0")
    cost = float(r @ r)
    lam = opts.lam0
    it = 0
    while it < opts.max_iters:
        J = np.asarray(jacobian_fn(x), dtype=float)
        if J.shape != (len(r), len(x)):
            raise ValueError(f"jacobian shape {J.shape} != {(len(r), len(x))}")
        g = J.T @ r
        if np.max(np.abs(g)) < opts.grad_tol:
            break
        H = J.T @ J
        D = np.maximum(np.diag(H), 1e-12)
        it += 1
        delta = np.linalg.solve(H + lam * np.diag(D), -g)
        r_new = np.asarray(residual_fn(x + delta), dtype=float)
        new_cost = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            x, r, cost = x + delta, r_new, new_cost
            lam /= 3.0
            if rel < opts.rel_cost_tol:
                break
        else:
            lam *= 2.0
    return x, cost, it


# ---------------------------------------------------------------------------
# robust kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustKernel:
    """Huber loss on the whitened squared residual s = e^T Sigma^-1 e."""

    kind: str = "huber"
    delta: float = 2.0

    def __post_init__(self):
        if self.kind != "huber":
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    def rho(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        d2 = self.delta * self.delta
        return np.where(s <= d2, s, 2.0 * self.delta * np.sqrt(np.maximum(s, 0.0)) - d2)

    def weight(self, s: np.ndarray) -> np.ndarray:
        """IRLS weight rho'(s)."""
        s = np.asarray(s, dtype=float)
        d2 = self.delta * self.delta
        return np.where(s <= d2, 1.0, self.delta / np.sqrt(np.maximum(s, d2)))


# ---------------------------------------------------------------------------
# optimization window
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    kf_id: int
    lm_id: int
    pixel: np.ndarray
    sigma: float = 1.0  # isotropic observation std-dev in px

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class OptimizationWindow:
    """Poses and landmarks under joint refinement plus their fixed anchors.

    scale_locked names one mutable keyframe whose translation norm stays
    frozen (bootstrap gauge before three keyframes exist); its translation
    moves on the sphere tangent, giving it 5 degrees of freedom.
    """

    poses: dict = field(default_factory=dict)  # kf id -> Pose
    mutable_ids: list = field(default_factory=list)
    fixed_ids: list = field(default_factory=list)
    landmarks: dict = field(default_factory=dict)  # lm id -> (3,) position
    observations: list = field(default_factory=list)
    scale_locked: int | None = None

    def validate(self):
        overlap = set(self.mutable_ids) & set(self.fixed_ids)
        if overlap:
            raise ValueError(f"keyframes both mutable and fixed: {sorted(overlap)}")
        if not self.mutable_ids:
            raise ValueError("window needs at least one mutable keyframe")
        for kf in list(self.mutable_ids) + list(self.fixed_ids):
            if kf not in self.poses:
                raise ValueError(f"keyframe {kf} missing a pose")
        if self.scale_locked is not None and self.scale_locked not in self.mutable_ids:
            raise ValueError("scale-locked keyframe must be mutable")
        known = set(self.mutable_ids) | set(self.fixed_ids)
        for obs in self.observations:
            if obs.kf_id not in known:
                raise ValueError(f"observation references unknown keyframe {obs.kf_id}")
            if obs.lm_id not in self.landmarks:
                raise ValueError(f"observation references unknown landmark {obs.lm_id}")


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    """Two unit vectors orthogonal to t (columns of a 3x2 matrix)."""
    a = np.zeros(3)
    a[np.argmin(np.abs(t))] = 1.0
    e1 = np.cross(t, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t / np.linalg.norm(t), e1)
    return np.column_stack([e1, e2])


def _pose_dof(window: OptimizationWindow, kf_id: int) -> int:
    return 5 if kf_id == window.scale_locked else 6


def window_layout(window: OptimizationWindow):
    """Parameter layout: mutable pose blocks first, then 3-dof landmark blocks."""
    pose_offsets = {}
    off = 0
    for kf in window.mutable_ids:
        pose_offsets[kf] = off
        off += _pose_dof(window, kf)
    lm_ids = sorted(window.landmarks)
    lm_index = {lm: i for i, lm in enumerate(lm_ids)}
    return pose_offsets, off, lm_ids, lm_index


def ba_apply_step(window: OptimizationWindow, delta: np.ndarray, poses=None, landmarks=None):
    """Apply a stacked local increment, returning new (poses, landmarks) dicts."""
    poses = dict(poses if poses is not None else window.poses)
    landmarks = dict(landmarks if landmarks is not None else window.landmarks)
    pose_offsets, n_pose, lm_ids, _ = window_layout(window)
    for kf in window.mutable_ids:
        o = pose_offsets[kf]
        pose = poses[kf]
        w = delta[o:o + 3]
        dq = so3_exp(w)
        q_new = quat_mul(dq, pose.q)
        if kf == window.scale_locked:
            basis = _tangent_basis(pose.t)
            t_raw = pose.t + basis @ delta[o + 3:o + 5]
            t_new = t_raw * (np.linalg.norm(pose.t) / np.linalg.norm(t_raw))
        else:
            t_new = quat_to_matrix(dq) @ pose.t + delta[o + 3:o + 6]
        poses[kf] = Pose(q_new, t_new)
    for i, lm in enumerate(lm_ids):
        d = delta[n_pose + 3 * i: n_pose + 3 * i + 3]
        landmarks[lm] = np.asarray(landmarks[lm], dtype=float) + d
    return poses, landmarks


def _group_observations(window: OptimizationWindow, lm_index):
    """Per-keyframe arrays of (landmark row index, pixel, sigma)."""
    groups = {}
    for obs in window.observations:
        groups.setdefault(obs.kf_id, []).append(obs)
    out = {}
    for kf, obs_list in groups.items():
        out[kf] = (
            np.array([lm_index[o.lm_id] for o in obs_list], dtype=int),
            np.array([o.pixel for o in obs_list]),
            np.array([o.sigma for o in obs_list]),
        )
    return out


def _frame_points_and_proj(pose: Pose, cam: CameraModel, X: np.ndarray):
    """Camera-frame points, projected pixels, and d(pixel)/d(pc)."""
    pc = pose.apply(X)
    z = pc[:, 2]
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    n = len(pc)
    dproj = np.zeros((n, 2, 3))
    iz = 1.0 / z
    dproj[:, 0, 0] = cam.fx * iz
    dproj[:, 0, 2] = -cam.fx * pc[:, 0] * iz * iz
    dproj[:, 1, 1] = cam.fy * iz
    dproj[:, 1, 2] = -cam.fy * pc[:, 1] * iz * iz
    return pc, np.stack([u, v], axis=-1), dproj


def _cross_jacobian(dproj: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rows -(dproj_row x p) for the rotational increment, shape (n, 2, 3)."""
    out = np.empty_like(dproj)
    px, py, pz = p[:, 0], p[:, 1], p[:, 2]
    for r in range(2):
        u0, u1, u2 = dproj[:, r, 0], dproj[:, r, 1], dproj[:, r, 2]
        out[:, r, 0] = -(u1 * pz - u2 * py)
        out[:, r, 1] = -(u2 * px - u0 * pz)
        out[:, r, 2] = -(u0 * py - u1 * px)
    return out


def ba_evaluate(window: OptimizationWindow, cam: CameraModel, poses=None, landmarks=None):
    """Whitened residuals and analytic Jacobian blocks at the given state.

    Returns None when any window point falls behind a camera.  Otherwise a
    dict with per-keyframe residual rows and pose/landmark Jacobians in a
    fixed observation order (grouped by keyframe id).
    """
    poses = poses if poses is not None else window.poses
    landmarks = landmarks if landmarks is not None else window.landmarks
    _, _, lm_ids, lm_index = window_layout(window)
    X = np.array([landmarks[lm] for lm in lm_ids]) if lm_ids else np.zeros((0, 3))
    groups = _group_observations(window, lm_index)
    mutable = set(window.mutable_ids)
    out = {}
    for kf in sorted(groups):
        li, px, sig = groups[kf]
        pose = poses[kf]
        pc = pose.apply(X[li])
        if np.any(pc[:, 2] <= 1e-9):
            return None
        pc, proj, dproj = _frame_points_and_proj(pose, cam, X[li])
        r = (proj - px) / sig[:, None]
        dproj_w = dproj / sig[:, None, None]
        Jl = np.einsum("nij,jk->nik", dproj_w, pose.rotation_matrix())
        Jp = None
        if kf in mutable:
            if kf == window.scale_locked:
                Jw = _cross_jacobian(dproj_w, pc - pose.t)
                Jt = np.einsum("nij,jk->nik", dproj_w, _tangent_basis(pose.t))
                Jp = np.concatenate([Jw, Jt], axis=2)  # (n, 2, 5)
            else:
                Jw = _cross_jacobian(dproj_w, pc)
                Jp = np.concatenate([Jw, dproj_w], axis=2)  # (n, 2, 6)
        out[kf] = dict(lm_rows=li, r=r, Jl=Jl, Jp=Jp, sigma=sig)
    return out


def ba_residual(window, cam, poses=None, landmarks=None) -> np.ndarray:
    """Stacked whitened residual vector in fixed observation order."""
    ev = ba_evaluate(window, cam, poses, landmarks)
    if ev is None:
        raise NumericError("point behind camera in window state")
    return np.concatenate([ev[kf]["r"].ravel() for kf in sorted(ev)]) if ev else np.zeros(0)


def ba_residual_and_jacobian(window, cam, poses=None, landmarks=None):
    """Dense stacked (residual, Jacobian) for verification and small solves."""
    ev = ba_evaluate(window, cam, poses, landmarks)
    if ev is None:
        raise NumericError("point behind camera in window state")
    pose_offsets, n_pose, lm_ids, _ = window_layout(window)
    total = n_pose + 3 * len(lm_ids)
    rows = sum(len(ev[kf]["r"]) for kf in ev) * 2
    r_all = np.zeros(rows)
    J = np.zeros((rows, total))
    row = 0
    for kf in sorted(ev):
        e = ev[kf]
        n = len(e["r"])
        r_all[row:row + 2 * n] = e["r"].ravel()
        for k in range(n):
            sl = slice(row + 2 * k, row + 2 * k + 2)
            J[sl, n_pose + 3 * e["lm_rows"][k]: n_pose + 3 * e["lm_rows"][k] + 3] = e["Jl"][k]
            if e["Jp"] is not None:
                o = pose_offsets[kf]
                J[sl, o:o + e["Jp"].shape[2]] = e["Jp"][k]
        row += 2 * n
    return r_all, J


def solve_ba_system(Hpp, Hpl, Hll, gp, gl, lam, dense=False):
    """Solve the damped normal equations (H + lam D) [dp; dl] = -[gp; gl].

    Pose blocks are damped by lam*diag; landmark 3x3 blocks by an isotropic
    lam*(trace/3)*I, which keeps the step equivariant under rigid world
    transforms.  `dense=True` solves the assembled full system instead of
    the landmark Schur complement (identical result, for verification).
    """
    P = len(gp)
    L = len(gl)
    Dp = np.maximum(np.diag(Hpp), 1e-12)
    App = Hpp + lam * np.diag(Dp)
    tr = np.maximum(np.trace(Hll, axis1=1, axis2=2) / 3.0, 1e-12)
    All = Hll + (lam * tr)[:, None, None] * np.eye(3)

    if dense:
        total = P + 3 * L
        A = np.zeros((total, total))
        A[:P, :P] = App
        for l in range(L):
            A[:P, P + 3 * l: P + 3 * l + 3] = Hpl[:, l, :]
            A[P + 3 * l: P + 3 * l + 3, :P] = Hpl[:, l, :].T
            A[P + 3 * l: P + 3 * l + 3, P + 3 * l: P + 3 * l + 3] = All[l]
        sol = np.linalg.solve(A, -np.concatenate([gp, gl.ravel()]))
        return sol[:P], sol[P:].reshape(L, 3)

    All_inv = np.linalg.inv(All)  # (L,3,3)
    T = np.einsum("plk,lkm->plm", Hpl, All_inv)
    S = App - np.einsum("plk,qlk->pq", T, Hpl)
    rhs = -gp + np.einsum("plk,lk->p", T, gl)
    dp = np.linalg.solve(S, rhs)
    dl = np.einsum("lkm,lm->lk", All_inv, -gl - np.einsum("plk,p->lk", Hpl, dp))
    return dp, dl


def _assemble_normal_equations(window, cam, ev, kernel):
    """Gauss-Newton blocks of the (optionally robustified) problem."""
    pose_offsets, n_pose, lm_ids, _ = window_layout(window)
    L = len(lm_ids)
    Hpp = np.zeros((n_pose, n_pose))
    Hpl = np.zeros((n_pose, L, 3))
    Hll = np.zeros((L, 3, 3))
    gp = np.zeros(n_pose)
    gl = np.zeros((L, 3))
    robust_cost = 0.0
    for kf in sorted(ev):
        e = ev[kf]
        s = np.einsum("ni,ni->n", e["r"], e["r"])
        if kernel is not None:
            w = kernel.weight(s)
            robust_cost += float(np.sum(kernel.rho(s)))
        else:
            w = np.ones(len(s))
            robust_cost += float(np.sum(s))
        Jl_w = e["Jl"] * w[:, None, None]
        np.add.at(Hll, e["lm_rows"], np.einsum("nij,nik->njk", Jl_w, e["Jl"]))
        np.add.at(gl, e["lm_rows"], np.einsum("nij,ni->nj", Jl_w, e["r"]))
        if e["Jp"] is not None:
            o = pose_offsets[kf]
            dof = e["Jp"].shape[2]
            Jp_w = e["Jp"] * w[:, None, None]
            Hpp[o:o + dof, o:o + dof] += np.einsum("nij,nik->njk", Jp_w, e["Jp"]).sum(axis=0)
            np.add.at(
                Hpl[o:o + dof].transpose(1, 0, 2), e["lm_rows"],
                np.einsum("nij,nik->njk", Jp_w, e["Jl"]),
            )
            gp[o:o + dof] += np.einsum("nij,ni->nj", Jp_w, e["r"]).sum(axis=0)
    return Hpp, Hpl, Hll, gp, gl, robust_cost


def _robust_cost_only(window, cam, kernel, poses, landmarks):
    ev = ba_evaluate(window, cam, poses, landmarks)
    if ev is None:
        return None, np.inf
    cost = 0.0
    for kf in ev:
        e = ev[kf]
        s = np.einsum("ni,ni->n", e["r"], e["r"])
        cost += float(np.sum(kernel.rho(s))) if kernel is not None else float(np.sum(s))
    return ev, cost


def _raw_rmse(ev) -> float:
    sq = 0.0
    count = 0
    for kf in ev:
        e = ev[kf]
        s = np.einsum("ni,ni->n", e["r"], e["r"]) * e["sigma"] ** 2
        sq += float(np.sum(s))
        count += len(s)
    return float(np.sqrt(sq / max(count, 1)))


@dataclass
class BAOptions:
    max_iters: int = 15
    lam0: float = 1e-4
    grad_tol: float = 1e-8
    rel_cost_tol: float = 1e-10
    log_fn: object = None  # callable(str) for per-iteration diagnostics


@dataclass
class BAStats:
    pre_rmse_px: float
    post_rmse_px: float
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int


def local_bundle_adjust(
    window: OptimizationWindow,
    cam: CameraModel,
    kernel: RobustKernel | None = RobustKernel(),
    opts: BAOptions | None = None,
) -> BAStats:
    """Jointly refine mutable keyframe poses and landmarks in the window.

    Mutates window.poses and window.landmarks in place and returns fit
    statistics.  Fixed keyframes are held constant; the Schur complement
    eliminates landmark blocks each damped step; acceptance is decided on
    the true robust cost, so accepted costs never increase.
    """
    opts = opts or BAOptions()
    window.validate()
    poses = dict(window.poses)
    landmarks = {k: np.asarray(v, dtype=float).copy() for k, v in window.landmarks.items()}
    ev, cost = _robust_cost_only(window, cam, kernel, poses, landmarks)
    if ev is None or not np.isfinite(cost):
        raise NumericError("non-finite cost at window state")
    pre_rmse = _raw_rmse(ev)
    initial_cost = cost
    lam = opts.lam0
    it = 0
    accepted = 0
    while it < opts.max_iters:
        Hpp, Hpl, Hll, gp, gl, _ = _assemble_normal_equations(window, cam, ev, kernel)
        gmax = max(
            np.max(np.abs(gp)) if len(gp) else 0.0,
            np.max(np.abs(gl)) if len(gl) else 0.0,
        )
        if gmax < opts.grad_tol:
            break
        it += 1
        try:
            dp, dl = solve_ba_system(Hpp, Hpl, Hll, gp, gl, lam)
        except np.linalg.LinAlgError:
            lam *= 2.0
            continue
        delta = np.concatenate([dp, dl.ravel()])
        cand_poses, cand_landmarks = ba_apply_step(window, delta, poses, landmarks)
        ev_new, new_cost = _robust_cost_only(window, cam, kernel, cand_poses, cand_landmarks)
        step = float(np.linalg.norm(delta))
        if opts.log_fn is not None:
            opts.log_fn(f"iter={it} cost={new_cost:.6e} lam={lam:.3e} step={step:.3e}")
        if new_cost < cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            poses, landmarks, ev, cost = cand_poses, cand_landmarks, ev_new, new_cost
            lam /= 3.0
            accepted += 1
            if rel < opts.rel_cost_tol or step < 1e-12:
                break
        else:
            lam *= 2.0
    window.poses.update(poses)
    for k, v in landmarks.items():
        window.landmarks[k] = v
    return BAStats(
        pre_rmse_px=pre_rmse,
        post_rmse_px=_raw_rmse(ev),
        initial_cost=initial_cost,
        final_cost=cost,
        iterations=it,
        accepted_steps=accepted,
    )


def cull_outliers(window: OptimizationWindow, cam: CameraModel, threshold: float) -> list:
    """Remove landmarks with any post-BA reprojection error above threshold.

    Landmarks left with fewer than 2 observations are culled as well.
    Returns the sorted list of culled landmark ids.
    """
    _, _, lm_ids, lm_index = window_layout(window)
    worst = {lm: 0.0 for lm in lm_ids}
    counts = {lm: 0 for lm in lm_ids}
    for obs in window.observations:
        pose = window.poses[obs.kf_id]
        X = window.landmarks[obs.lm_id]
        pc = pose.apply(X)
        if pc[2] <= 1e-9:
            err = np.inf
        else:
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            err = float(np.hypot(u - obs.pixel[0], v - obs.pixel[1]))
        worst[obs.lm_id] = max(worst[obs.lm_id], err)
        counts[obs.lm_id] += 1
    culled = sorted(
        lm for lm in lm_ids if worst[lm] > threshold or counts[lm] < 2
    )
    if culled:
        cset = set(culled)
        for lm in culled:
            del window.landmarks[lm]
        window.observations = [o for o in window.observations if o.lm_id not in cset]
    return culled
