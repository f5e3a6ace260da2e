"""Pose, projection, EPnP, RANSAC, and refinement behavior.

Hand-computed expectations:

* 90 degree rotation about +z is R = [[0,-1,0],[1,0,0],[0,0,1]] and, as a
  quaternion (w, x, y, z), (cos 45, 0, 0, sin 45) = (s, 0, 0, s) with
  s = sqrt(2)/2.
* With identity pose and K = (fx=100, fy=200, cx=320, cy=240), the point
  (0.5, -0.25, 2) projects to u = 100 * 0.25 + 320 = 345 and
  v = 200 * (-0.125) + 240 = 215.
* A pixel offset of (3, 4) is a reprojection error of exactly 5.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import landmarkloc as L
from landmarkloc.geometry import (
    quaternion_from_rotation,
    reprojection_errors,
    rotation_angle_between,
    rotation_from_quaternion,
    stack_correspondences,
)

K_TEST = L.CameraIntrinsics(fx=100.0, fy=200.0, cx=320.0, cy=240.0,
                            width=640, height=480)
K_WIDE = L.CameraIntrinsics(fx=600.0, fy=580.0, cx=320.0, cy=240.0,
                            width=640, height=480)
SQ2 = np.sqrt(2.0) / 2.0


def _rand_pose(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return L.Pose.from_quaternion(q, rng.uniform(-0.5, 0.5, 3))


def _box_instance(pose, n, rng, z_extent=None):
    """Noiseless correspondences: points drawn in the camera frustum, mapped
    to world coordinates, projected back under the same pose."""
    pc = np.empty((n, 3))
    pc[:, 0] = rng.uniform(-1.5, 1.5, n)
    pc[:, 1] = rng.uniform(-1.1, 1.1, n)
    pc[:, 2] = rng.uniform(2.0, 6.0, n)
    world = (pc - pose.translation) @ pose.rotation
    if z_extent is not None:
        # squash onto a thin slab around the camera's optical axis
        center = pose.camera_center() + 3.0 * pose.rotation[2]
        world = center + np.column_stack([
            rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n),
            rng.uniform(-z_extent, z_extent, n)])
    uv, vis = L.project_points(pose, K_WIDE, world)
    return uv[vis], world[vis]


# ---------------------------------------------------------------------------
# poses and quaternions
# ---------------------------------------------------------------------------

def test_quaternion_of_z_rotation():
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    q = quaternion_from_rotation(rot)
    assert np.allclose(q, [SQ2, 0.0, 0.0, SQ2], atol=1e-12)
    assert np.allclose(rotation_from_quaternion(q), rot, atol=1e-12)


def test_quaternion_w_sign_canonical():
    q = np.array([-SQ2, 0.0, 0.0, -SQ2])     # same rotation, negated
    pose = L.Pose.from_quaternion(q, np.zeros(3))
    back = pose.as_quaternion()
    assert back[0] >= 0.0
    assert np.allclose(back, [SQ2, 0.0, 0.0, SQ2], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31))
def test_quaternion_round_trip(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    rot = rotation_from_quaternion(q)
    assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(rot), 1.0, atol=1e-12)
    back = quaternion_from_rotation(rot)
    if q[0] < 0:
        q = -q
    assert np.allclose(back, q, atol=1e-9)


def test_pose_rejects_non_orthonormal():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(ValueError):
        L.Pose(bad, np.zeros(3))


def test_pose_rejects_reflection():
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        L.Pose(refl, np.zeros(3))


def test_pose_compose_inverse_center():
    rng = np.random.default_rng(0)
    a = _rand_pose(rng)
    b = _rand_pose(rng)
    pt = rng.standard_normal(3)
    assert np.allclose(a.compose(b).transform(pt),
                       a.transform(b.transform(pt)), atol=1e-12)
    ident = a.compose(a.inverse())
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(ident.translation, 0.0, atol=1e-12)
    # camera center maps to the origin of the camera frame
    assert np.allclose(a.transform(a.camera_center()), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_hand_computed():
    assert L.project(L.Pose.identity(), K_TEST, (0.5, -0.25, 2.0)) == (345.0, 215.0)


def test_project_invisible_cases():
    pose = L.Pose.identity()
    assert L.project(pose, K_TEST, (0.0, 0.0, -1.0)) is None     # behind
    assert L.project(pose, K_TEST, (0.0, 0.0, 1e-7)) is None     # at the eps
    # u = fx * x/z + cx = 640 exactly: the right edge is exclusive
    assert L.project(pose, K_TEST, (3.2 * 2.0, 0.0, 2.0)) is None
    assert L.project(pose, K_TEST, (3.19 * 2.0, 0.0, 2.0)) is not None


def test_project_points_matches_scalar():
    rng = np.random.default_rng(1)
    pose = _rand_pose(rng)
    pts = rng.uniform(-4.0, 4.0, (64, 3))
    uv, vis = L.project_points(pose, K_TEST, pts)
    for i in range(64):
        single = L.project(pose, K_TEST, pts[i])
        if vis[i]:
            # batched matmul may differ from the scalar path by an ulp
            assert np.allclose(single, uv[i], atol=1e-9)
        else:
            assert single is None


def test_unproject_round_trip():
    assert np.allclose(L.unproject(K_TEST, (345.0, 215.0), 2.0),
                       [0.5, -0.25, 2.0], atol=1e-12)
    uv = L.project(L.Pose.identity(), K_TEST, L.unproject(K_TEST, (101.5, 33.25), 4.0))
    assert np.allclose(uv, (101.5, 33.25), atol=1e-9)


def test_reprojection_error_three_four_five():
    pose = L.Pose.identity()
    xyz = np.array([[0.5, -0.25, 2.0]])
    uv = np.array([[345.0 + 3.0, 215.0 + 4.0]])
    err = reprojection_errors(pose, K_TEST, uv, xyz)
    assert err.shape == (1,)
    assert np.isclose(err[0], 5.0, atol=1e-12)


def test_reprojection_error_behind_camera_is_inf():
    err = reprojection_errors(L.Pose.identity(), K_TEST,
                              np.array([[320.0, 240.0]]),
                              np.array([[0.0, 0.0, -2.0]]))
    assert np.isinf(err[0])


# ---------------------------------------------------------------------------
# correspondence stacking
# ---------------------------------------------------------------------------

def test_stack_correspondences_objects_and_tuples():
    corrs = [
        L.Correspondence2D3D(point2d=[1.0, 2.0], point3d=[3.0, 4.0, 5.0]),
        L.Correspondence2D3D(point2d=[6.0, 7.0], point3d=[8.0, 9.0, 10.0],
                             weight=0.25),
    ]
    uv, xyz, w = stack_correspondences(corrs)
    assert uv.tolist() == [[1.0, 2.0], [6.0, 7.0]]
    assert xyz.tolist() == [[3.0, 4.0, 5.0], [8.0, 9.0, 10.0]]
    assert w.tolist() == [1.0, 0.25]

    uv2, xyz2, w2 = stack_correspondences((uv, xyz))
    assert np.array_equal(uv2, uv) and np.array_equal(xyz2, xyz)
    assert w2.tolist() == [1.0, 1.0]
    _, _, w3 = stack_correspondences((uv, xyz, np.array([0.5, 2.0])))
    assert w3.tolist() == [0.5, 2.0]


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------

def test_epnp_noiseless_recovers_pose():
    rng = np.random.default_rng(10)
    checked = 0
    for _ in range(30):
        pose = _rand_pose(rng)
        uv, xyz = _box_instance(pose, 12, rng)
        if len(uv) < 6:
            continue
        est = L.epnp((uv, xyz), K_WIDE)
        est = L.refine_pose(est, (uv, xyz), K_WIDE)
        assert rotation_angle_between(est.rotation, pose.rotation) < 1e-6
        assert np.linalg.norm(est.translation - pose.translation) < 1e-9
        checked += 1
    assert checked >= 20


def test_epnp_near_planar_blob():
    """Thin slabs (5 percent vertical extent) stay well inside the accuracy
    promise thanks to the control-point axis floor."""
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(30):
        pose = _rand_pose(rng)
        uv, xyz = _box_instance(pose, 12, rng, z_extent=0.02)
        if len(uv) < 8:
            continue
        est = L.refine_pose(L.epnp((uv, xyz), K_WIDE), (uv, xyz), K_WIDE)
        assert rotation_angle_between(est.rotation, pose.rotation) < 1e-6
        assert np.linalg.norm(est.translation - pose.translation) < 1e-9
        checked += 1
    assert checked >= 20


def test_epnp_minimum_four_points():
    rng = np.random.default_rng(11)
    pose = _rand_pose(rng)
    uv, xyz = _box_instance(pose, 24, rng)
    est = L.epnp((uv[:4], xyz[:4]), K_WIDE)
    errs = reprojection_errors(est, K_WIDE, uv[:4], xyz[:4])
    assert errs.max() < 1e-6


def test_epnp_too_few_points():
    uv = np.zeros((3, 2))
    xyz = np.zeros((3, 3))
    with pytest.raises(L.MinimalSampleUnavailable):
        L.epnp((uv, xyz), K_WIDE)


def test_epnp_collinear_points_rejected():
    t = np.linspace(0.0, 1.0, 8)
    xyz = np.outer(t, [1.0, 2.0, 0.5]) + [0.0, 0.0, 3.0]
    uv, _ = L.project_points(L.Pose.identity(), K_WIDE, xyz)
    with pytest.raises(L.DegenerateConfiguration):
        L.epnp((uv, xyz), K_WIDE)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def _outlier_instance(seed, n_in=40, n_out=15):
    rng = np.random.default_rng(seed)
    pose = _rand_pose(rng)
    while True:
        uv, xyz = _box_instance(pose, n_in + 30, rng)
        if len(uv) >= n_in + n_out:
            break
    uv = uv[:n_in + n_out].copy()
    xyz = xyz[:n_in + n_out]
    # displace the tail far past the threshold
    shift = rng.uniform(40.0, 200.0, (n_out, 2))
    shift *= np.where(rng.random((n_out, 2)) < 0.5, -1.0, 1.0)
    uv[n_in:] += shift
    return pose, uv, xyz, np.arange(n_in + n_out) < n_in


def test_ransac_recovers_exact_inlier_set():
    for seed in range(8):
        pose, uv, xyz, inlier_gt = _outlier_instance(seed)
        res = L.ransac_pnp((uv, xyz), K_WIDE, L.RansacParams(seed=seed))
        assert np.array_equal(res.inlier_mask, inlier_gt)
        assert res.num_inliers == int(inlier_gt.sum())
        assert rotation_angle_between(res.pose.rotation, pose.rotation) < 1e-6


def test_ransac_deterministic_per_seed():
    _, uv, xyz, _ = _outlier_instance(99)
    a = L.ransac_pnp((uv, xyz), K_WIDE, L.RansacParams(seed=5))
    b = L.ransac_pnp((uv, xyz), K_WIDE, L.RansacParams(seed=5))
    assert np.array_equal(a.inlier_mask, b.inlier_mask)
    assert np.array_equal(a.pose.rotation, b.pose.rotation)
    assert np.array_equal(a.pose.translation, b.pose.translation)


def test_ransac_small_sets_use_four_point_samples():
    # n = 5 forces the 4-point minimal sample path
    rng = np.random.default_rng(12)
    pose = _rand_pose(rng)
    uv, xyz = _box_instance(pose, 24, rng)
    res = L.ransac_pnp((uv[:5], xyz[:5]), K_WIDE, L.RansacParams(seed=0))
    assert res.num_inliers == 5


def test_ransac_too_few_points():
    with pytest.raises(L.MinimalSampleUnavailable):
        L.ransac_pnp((np.zeros((3, 2)), np.zeros((3, 3))), K_WIDE)


def test_ransac_no_consensus_on_coincident_points():
    uv = np.array([[10.0, 10.0], [600.0, 20.0], [30.0, 400.0], [500.0, 450.0]])
    xyz = np.tile(np.array([0.0, 0.0, 3.0]), (4, 1))
    with pytest.raises(L.NoConsensus):
        L.ransac_pnp((uv, xyz), K_WIDE, L.RansacParams(max_iters=64))


def test_ransac_no_consensus_on_shuffled_scene():
    rng = np.random.default_rng(9)
    uv = rng.uniform([0.0, 0.0], [640.0, 480.0], (24, 2))
    xyz = rng.uniform(-3.0, 3.0, (24, 3))
    with pytest.raises(L.NoConsensus):
        L.ransac_pnp((uv, xyz), K_WIDE,
                     L.RansacParams(max_iters=200, inlier_px_threshold=2.0,
                                    seed=1))


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def _perturbed(pose):
    dq = np.array([1.0, 0.01, -0.008, 0.005])
    dq /= np.linalg.norm(dq)
    bump = L.Pose.from_quaternion(dq, np.zeros(3))
    return L.Pose(bump.rotation @ pose.rotation,
                  pose.translation + [0.02, -0.01, 0.03])


def test_refine_converges_from_perturbed_init():
    rng = np.random.default_rng(20)
    pose = _rand_pose(rng)
    uv, xyz = _box_instance(pose, 40, rng)
    est = L.refine_pose(_perturbed(pose), (uv, xyz), K_WIDE)
    assert rotation_angle_between(est.rotation, pose.rotation) < 1e-8
    assert np.linalg.norm(est.translation - pose.translation) < 1e-8


def test_refine_huber_bounds_gross_outlier():
    rng = np.random.default_rng(8)
    pose = _rand_pose(rng)
    uv, xyz = _box_instance(pose, 40, rng)
    uv = uv.copy()
    uv[0] += [150.0, -90.0]
    est = L.refine_pose(_perturbed(pose), (uv, xyz), K_WIDE)
    assert rotation_angle_between(est.rotation, pose.rotation) < 0.05
    assert np.linalg.norm(est.translation - pose.translation) < 0.05


def test_refine_weight_silences_outlier():
    """Giving the planted outlier weight 1e-9 must recover the pose almost
    exactly; equal weights leave a visible Huber-bounded bias."""
    rng = np.random.default_rng(8)
    pose = _rand_pose(rng)
    uv, xyz = _box_instance(pose, 40, rng)
    uv = uv.copy()
    uv[0] += [150.0, -90.0]
    w = np.ones(len(uv))
    w[0] = 1e-9
    est = L.refine_pose(_perturbed(pose), (uv, xyz, w), K_WIDE)
    assert rotation_angle_between(est.rotation, pose.rotation) < 1e-8
    assert np.linalg.norm(est.translation - pose.translation) < 1e-8


def test_refine_never_increases_robust_cost():
    # garbage correspondences: the result may be meaningless but must not
    # be worse than the init under the robust cost
    rng = np.random.default_rng(21)
    uv = rng.uniform([0.0, 0.0], [640.0, 480.0], (12, 2))
    xyz = rng.uniform(-2.0, 2.0, (12, 3)) + [0.0, 0.0, 4.0]
    init = L.Pose.identity()
    est = L.refine_pose(init, (uv, xyz), K_WIDE)

    def robust_cost(pose):
        err = reprojection_errors(pose, K_WIDE, uv, xyz)
        err = np.minimum(err, 1e12)
        delta = 5.0
        c = np.where(err <= delta, 0.5 * err * err, delta * (err - 0.5 * delta))
        return c.sum()

    assert robust_cost(est) <= robust_cost(init) + 1e-9


def test_refine_too_few_points():
    with pytest.raises(L.MinimalSampleUnavailable):
        L.refine_pose(L.Pose.identity(), (np.zeros((3, 2)), np.zeros((3, 3))),
                      K_WIDE)
