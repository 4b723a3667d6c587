"""Multiview solver tests: 5-point, decomposition, P3P, RANSAC, refinement."""

import numpy as np
import pytest

from monovo.errors import (
    AmbiguousDecompositionError,
    DegenerateConfigError,
    EstimationFailure,
)
from monovo.geometry import CameraModel, Pose, quat_normalize, quat_to_matrix, skew
from monovo.multiview import (
    EssentialMatrix,
    bearing_angular_residual,
    decompose_essential,
    decompose_homography,
    epipolar_angular_residual,
    essential_5pt,
    homography_4pt,
    homography_transfer_residual,
    p3p,
    ransac,
    refine_pose,
    refit_essential,
    refit_homography,
    validate_p3p,
)

CAM = CameraModel(fx=460.0, fy=455.0, cx=320.0, cy=240.0, width=640, height=480)


def random_rotation(rng):
    return quat_to_matrix(quat_normalize(rng.normal(size=4)))


def rigid_scene(rng, n, depth=(2.0, 6.0), spread=1.5):
    """Random relative pose (b = R a + t) and bearings of n shared points."""
    R = random_rotation(rng)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    Pa = rng.uniform(-spread, spread, size=(n, 3))
    Pa[:, 2] = rng.uniform(*depth, size=n)
    Pb = Pa @ R.T + t
    ba = Pa / np.linalg.norm(Pa, axis=1, keepdims=True)
    bb = Pb / np.linalg.norm(Pb, axis=1, keepdims=True)
    return R, t, ba, bb


# ---------------------------------------------------------------------------
# essential_5pt
# ---------------------------------------------------------------------------


def test_5pt_pure_translation_recovers_cross_matrix():
    rng = np.random.default_rng(0)
    t = np.array([1.0, 0.0, 0.0])
    Pa = rng.uniform(-1, 1, size=(5, 3))
    Pa[:, 2] = rng.uniform(2, 5, size=5)
    Pb = Pa + t
    ba = Pa / np.linalg.norm(Pa, axis=1, keepdims=True)
    bb = Pb / np.linalg.norm(Pb, axis=1, keepdims=True)
    Etrue = skew(t)
    Etrue = Etrue / np.linalg.norm(Etrue)
    sols = essential_5pt(ba, bb)
    assert sols
    best = min(
        min(np.max(np.abs(s.e - Etrue)), np.max(np.abs(s.e + Etrue))) for s in sols
    )
    assert best < 1e-8


def test_5pt_identical_points_degenerate():
    b = np.tile(np.array([0.0, 0.0, 1.0]), (5, 1))
    with pytest.raises(DegenerateConfigError):
        essential_5pt(b, b)


def test_5pt_noiseless_epipolar_residual():
    rng = np.random.default_rng(1)
    for _ in range(30):
        R, t, ba, bb = rigid_scene(rng, 5)
        sols = essential_5pt(ba, bb)
        assert sols
        for s in sols:
            resid = np.abs(np.einsum("ki,ij,kj->k", bb, s.e, ba))
            assert np.max(resid) < 1e-10
            # manifold invariants
            sv = np.linalg.svd(s.e, compute_uv=False)
            assert abs(np.linalg.det(s.e)) < 1e-9
            assert (sv[0] - sv[1]) < 1e-6 * sv[0]


def test_5pt_finds_true_model():
    rng = np.random.default_rng(2)
    found = 0
    for _ in range(50):
        R, t, ba, bb = rigid_scene(rng, 5)
        Etrue = skew(t) @ R
        Etrue /= np.linalg.norm(Etrue)
        sols = essential_5pt(ba, bb)
        best = min(
            min(np.max(np.abs(s.e - Etrue)), np.max(np.abs(s.e + Etrue))) for s in sols
        )
        if best < 1e-6:
            found += 1
    assert found == 50


# ---------------------------------------------------------------------------
# decompose_essential
# ---------------------------------------------------------------------------


def test_decompose_recovers_true_pose():
    rng = np.random.default_rng(3)
    for _ in range(50):
        R, t, ba, bb = rigid_scene(rng, 30)
        E = EssentialMatrix(skew(t) @ R)
        pose, count = decompose_essential(E, ba, bb)
        assert count == 30
        assert np.max(np.abs(pose.rotation_matrix() - R)) < 1e-8
        assert np.max(np.abs(pose.t - t)) < 1e-8
        assert abs(np.linalg.norm(pose.t) - 1.0) < 1e-12


def test_decompose_impossible_input_ambiguous():
    rng = np.random.default_rng(4)
    R, t, _, _ = rigid_scene(rng, 5)
    E = EssentialMatrix(skew(t) @ R)
    # unrelated random bearing pairs: no factorization can place a majority
    # of them in front of both cameras
    ba = rng.normal(size=(40, 3))
    bb = rng.normal(size=(40, 3))
    ba /= np.linalg.norm(ba, axis=1, keepdims=True)
    bb /= np.linalg.norm(bb, axis=1, keepdims=True)
    with pytest.raises(AmbiguousDecompositionError):
        decompose_essential(E, ba, bb)


# ---------------------------------------------------------------------------
# homography
# ---------------------------------------------------------------------------


def planar_scene(rng, n, d=(2.0, 6.0)):
    """Points on one plane (unit normal, distance d in view a) in two views."""
    nrm = rng.normal(size=3)
    nrm[2] = abs(nrm[2]) + 1.5
    nrm /= np.linalg.norm(nrm)
    dist = rng.uniform(*d)
    pts = []
    while len(pts) < n:
        ray = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), 1.0])
        lam = dist / (nrm @ ray)
        if lam > 0.1:
            pts.append(ray * lam)
    Pa = np.array(pts)
    # keep the rotation small so the second view still faces the plane
    R = quat_to_matrix(quat_normalize(np.array([*(0.05 * rng.normal(size=3)), 1.0])))
    t = rng.normal(size=3)
    t *= rng.uniform(0.3, 1.0) / np.linalg.norm(t)
    Pb = Pa @ R.T + t
    if (Pb[:, 2] <= 0.05).any():
        return planar_scene(rng, n, d)
    ba = Pa / np.linalg.norm(Pa, axis=1, keepdims=True)
    bb = Pb / np.linalg.norm(Pb, axis=1, keepdims=True)
    return R, t, nrm, dist, ba, bb


def test_homography_exact_transfer():
    rng = np.random.default_rng(20)
    for _ in range(30):
        R, t, nrm, dist, ba, bb = planar_scene(rng, 40)
        H = homography_4pt(ba, bb)[0]
        assert abs(np.linalg.norm(H) - 1.0) < 1e-12
        assert np.max(homography_transfer_residual(H, (ba, bb))) < 1e-8


def test_homography_minimal_sample():
    rng = np.random.default_rng(21)
    R, t, nrm, dist, ba, bb = planar_scene(rng, 4)
    H = homography_4pt(ba, bb)[0]
    assert np.max(homography_transfer_residual(H, (ba, bb))) < 1e-8


def test_homography_degenerate_sample():
    b = np.tile(np.array([0.1, 0.2, 1.0]), (4, 1))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    with pytest.raises(DegenerateConfigError):
        homography_4pt(b, b)


def test_decompose_homography_contains_truth():
    rng = np.random.default_rng(22)
    for _ in range(50):
        R, t, nrm, dist, ba, bb = planar_scene(rng, 50)
        H = homography_4pt(ba, bb)[0]
        cands = decompose_homography(H, ba, bb, 1e-6)
        assert 1 <= len(cands) <= 4
        hits = [
            (pose, n_est, support) for pose, n_est, support in cands
            if np.max(np.abs(pose.rotation_matrix() - R)) < 1e-6
            and np.max(np.abs(pose.t - t / dist)) < 1e-6
            and np.max(np.abs(n_est - nrm)) < 1e-6
        ]
        assert len(hits) == 1
        # the true interpretation explains every correspondence
        assert hits[0][2] == 50
        # |t| of the true candidate is baseline over plane distance
        assert abs(np.linalg.norm(hits[0][0].t) - np.linalg.norm(t) / dist) < 1e-9


def test_decompose_homography_pure_rotation_degenerate():
    rng = np.random.default_rng(23)
    R, t, nrm, dist, ba, _ = planar_scene(rng, 30)
    bb = ba @ R.T  # rotation-only view change: H has three unit singular values
    H = homography_4pt(ba, bb)[0]
    with pytest.raises(DegenerateConfigError):
        decompose_homography(H, ba, bb, 1e-6)


def test_homography_ransac_planted_outliers():
    rng = np.random.default_rng(24)
    R, t, nrm, dist, ba, bb = planar_scene(rng, 60)
    out_a = rng.normal(size=(20, 3))
    out_a[:, 2] = np.abs(out_a[:, 2]) + 0.5
    out_b = rng.normal(size=(20, 3))
    out_b[:, 2] = np.abs(out_b[:, 2]) + 0.5
    out_a /= np.linalg.norm(out_a, axis=1, keepdims=True)
    out_b /= np.linalg.norm(out_b, axis=1, keepdims=True)
    da = np.vstack([ba, out_a])
    db = np.vstack([bb, out_b])
    Htrue = homography_4pt(ba, bb)[0]
    assert np.min(homography_transfer_residual(Htrue, (out_a, out_b))) > 5e-3
    for seed in range(5):
        res = ransac(
            (da, db), lambda s: homography_4pt(s[0], s[1]),
            homography_transfer_residual,
            threshold=1e-3, sample_size=4, rng_seed=seed, refit=refit_homography,
        )
        assert set(res.inliers.tolist()) == set(range(60))


# ---------------------------------------------------------------------------
# p3p
# ---------------------------------------------------------------------------


def random_pose_and_points(rng, n=3):
    R = random_rotation(rng)
    t = rng.normal(size=3)
    Pc = rng.uniform(-2, 2, size=(n, 3))
    Pc[:, 2] = rng.uniform(3, 8, size=n)
    Pw = (Pc - t) @ R  # world points whose camera coords are Pc
    f = Pc / np.linalg.norm(Pc, axis=1, keepdims=True)
    return R, t, Pw, f


def test_p3p_identity_self_consistency():
    pts = np.array([[0.0, 0.0, 4.0], [1.0, 0.5, 5.0], [-0.5, 1.0, 3.0]])
    f = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    sols = p3p(f, pts)
    best = min(
        max(np.max(np.abs(p.rotation_matrix() - np.eye(3))), np.max(np.abs(p.t)))
        for p in sols
    )
    assert best < 1e-9


def test_p3p_recovers_random_pose():
    rng = np.random.default_rng(5)
    for _ in range(200):
        R, t, Pw, f = random_pose_and_points(rng)
        sols = p3p(f, Pw)
        assert len(sols) <= 4
        best = min(
            max(np.max(np.abs(p.rotation_matrix() - R)), np.max(np.abs(p.t - t)))
            for p in sols
        )
        assert best < 1e-8
        # every solution reprojects all three points along their bearings
        for p in sols:
            assert np.max(bearing_angular_residual(p, (f, Pw))) < 1e-8


def test_p3p_collinear_degenerate():
    pts = np.array([[0.0, 0.0, 4.0], [0.5, 0.0, 4.0], [1.0, 0.0, 4.0]])
    f = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    with pytest.raises(DegenerateConfigError):
        p3p(f, pts)


# ---------------------------------------------------------------------------
# ransac
# ---------------------------------------------------------------------------


def essential_solver(sample):
    return essential_5pt(sample[0], sample[1])


def test_ransac_all_inliers():
    rng = np.random.default_rng(6)
    R, t, ba, bb = rigid_scene(rng, 100)
    res = ransac(
        (ba, bb), essential_solver, epipolar_angular_residual,
        threshold=1e-3, sample_size=5, rng_seed=7,
    )
    assert res.inlier_ratio == 1.0
    assert len(res.inliers) == 100


def test_ransac_planted_outliers_all_seeds():
    rng = np.random.default_rng(8)
    R, t, ba, bb = rigid_scene(rng, 70)
    out_a = rng.normal(size=(30, 3))
    out_a[:, 2] = np.abs(out_a[:, 2]) + 0.5
    out_b = rng.normal(size=(30, 3))
    out_b[:, 2] = np.abs(out_b[:, 2]) + 0.5
    out_a /= np.linalg.norm(out_a, axis=1, keepdims=True)
    out_b /= np.linalg.norm(out_b, axis=1, keepdims=True)
    da = np.vstack([ba, out_a])
    db = np.vstack([bb, out_b])
    Etrue = EssentialMatrix(skew(t) @ R)
    # no planted outlier may sit within the inlier band of the true model
    assert np.min(epipolar_angular_residual(Etrue, (out_a, out_b))) > 5e-3
    for seed in range(5):
        res = ransac(
            (da, db), essential_solver, epipolar_angular_residual,
            threshold=1e-3, sample_size=5, rng_seed=seed, refit=refit_essential,
        )
        assert set(res.inliers.tolist()) == set(range(70))


def test_ransac_insufficient_data():
    ba = np.tile(np.array([0.0, 0.0, 1.0]), (4, 1))
    with pytest.raises(EstimationFailure):
        ransac((ba, ba), essential_solver, epipolar_angular_residual,
               threshold=1e-3, sample_size=5)


def test_ransac_deterministic():
    rng = np.random.default_rng(9)
    R, t, ba, bb = rigid_scene(rng, 60)
    noise = np.random.default_rng(1).normal(scale=2e-4, size=ba.shape)
    ba_n = (ba + noise) / np.linalg.norm(ba + noise, axis=1, keepdims=True)
    runs = [
        ransac((ba_n, bb), essential_solver, epipolar_angular_residual,
               threshold=1.5e-3, sample_size=5, rng_seed=42)
        for _ in range(2)
    ]
    assert np.array_equal(runs[0].inliers, runs[1].inliers)
    assert runs[0].iterations_run == runs[1].iterations_run
    assert np.array_equal(runs[0].model.e, runs[1].model.e)


def test_ransac_p3p_with_validation():
    rng = np.random.default_rng(10)
    R, t, Pw, f = random_pose_and_points(rng, n=40)
    # corrupt 10 bearings
    f_bad = f.copy()
    f_bad[:10] = rng.normal(size=(10, 3))
    f_bad[:10, 2] = np.abs(f_bad[:10, 2]) + 0.5
    f_bad[:10] /= np.linalg.norm(f_bad[:10], axis=1, keepdims=True)
    res = ransac(
        (f_bad, Pw), lambda s: p3p(s[0], s[1]), bearing_angular_residual,
        threshold=1.5e-3, sample_size=3, rng_seed=3, validate=validate_p3p,
    )
    assert set(res.inliers.tolist()) == set(range(10, 40))
    assert np.max(np.abs(res.model.rotation_matrix() - R)) < 1e-6


# ---------------------------------------------------------------------------
# refine_pose
# ---------------------------------------------------------------------------


def refine_problem(rng, n=30):
    R = random_rotation(rng)
    t = rng.normal(size=3)
    truth = Pose.from_rt(R, t)
    Pc = np.column_stack([
        rng.uniform(-1.5, 1.5, n), rng.uniform(-1.0, 1.0, n), rng.uniform(2, 8, n),
    ])
    Pw = (Pc - t) @ R
    obs = np.stack(
        [CAM.fx * Pc[:, 0] / Pc[:, 2] + CAM.cx, CAM.fy * Pc[:, 1] / Pc[:, 2] + CAM.cy],
        axis=-1,
    )
    return truth, Pw, obs


def test_refine_pose_noop_at_truth():
    rng = np.random.default_rng(11)
    truth, Pw, obs = refine_problem(rng)
    res = refine_pose(truth, CAM, Pw, obs)
    assert res.final_cost <= res.initial_cost
    assert np.max(np.abs(res.pose.q - truth.q)) < 1e-12
    assert np.max(np.abs(res.pose.t - truth.t)) < 1e-12


def test_refine_pose_recovers_from_perturbation():
    rng = np.random.default_rng(12)
    from monovo.geometry import compose, so3_exp
    for _ in range(20):
        truth, Pw, obs = refine_problem(rng)
        w = rng.normal(size=3)
        w *= 0.02 / np.linalg.norm(w)
        dt = rng.normal(size=3)
        dt *= 0.05 / np.linalg.norm(dt)
        start = compose(Pose(so3_exp(w), dt), truth)
        res = refine_pose(start, CAM, Pw, obs)
        assert res.final_cost <= res.initial_cost
        assert np.max(np.abs(res.pose.rotation_matrix() - truth.rotation_matrix())) < 1e-7
        assert np.max(np.abs(res.pose.t - truth.t)) < 1e-7


def test_refine_pose_too_few_points():
    rng = np.random.default_rng(13)
    truth, Pw, obs = refine_problem(rng, n=3)
    with pytest.raises(ValueError):
        refine_pose(truth, CAM, Pw, obs)
