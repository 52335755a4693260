import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dslam.errors import BehindCameraError, InvalidDepthError
from dslam.geometry import (
    Pixel,
    Se3Pose,
    backproject,
    backproject_batch,
    linearize_reprojection_batch,
    project,
    quat_from_rotvec,
    quat_multiply,
    quat_to_matrix,
    reproject,
    reproject_jacobians,
    se3_exp,
    se3_retract,
)
from helpers import default_intrinsics, random_pose
from oracles import fd_reproject_jacobians


def test_backproject_principal_point():
    intr = default_intrinsics()
    p = backproject(intr, Pixel(320.0, 240.0), 0.5)
    np.testing.assert_allclose(p, [0.0, 0.0, 2.0], atol=0.0)


def test_backproject_rejects_nonpositive_inverse_depth():
    intr = default_intrinsics()
    with pytest.raises(InvalidDepthError):
        backproject(intr, Pixel(100.0, 100.0), 0.0)
    with pytest.raises(InvalidDepthError):
        backproject(intr, Pixel(100.0, 100.0), -2.0)


def test_project_backproject_round_trip():
    intr = default_intrinsics()
    rng = np.random.default_rng(7)
    for _ in range(200):
        px = Pixel(rng.uniform(0, intr.width), rng.uniform(0, intr.height))
        d = rng.uniform(0.05, 5.0)
        back = project(intr, backproject(intr, px, d))
        assert abs(back.u - px.u) <= 1e-12 * max(1.0, abs(px.u))
        assert abs(back.v - px.v) <= 1e-12 * max(1.0, abs(px.v))


def test_project_rejects_behind_camera():
    intr = default_intrinsics()
    with pytest.raises(BehindCameraError):
        project(intr, np.array([0.0, 0.0, 0.0]))
    with pytest.raises(BehindCameraError):
        project(intr, np.array([0.1, 0.1, -3.0]))


def test_quaternion_norm_preserved():
    rng = np.random.default_rng(3)
    pose = random_pose(rng)
    for _ in range(50):
        pose = se3_retract(pose, rng.normal(scale=0.3, size=6))
        assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9
        pose = pose.compose(random_pose(rng))
        assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(11)
    for _ in range(50):
        pose = random_pose(rng)
        ident = pose.compose(pose.inverse())
        np.testing.assert_allclose(ident.t, 0.0, atol=1e-12)
        np.testing.assert_allclose(quat_to_matrix(ident.q), np.eye(3), atol=1e-12)


def test_retract_zero_is_identity_update():
    rng = np.random.default_rng(5)
    pose = random_pose(rng)
    out = se3_retract(pose, np.zeros(6))
    np.testing.assert_array_equal(out.t, pose.t)
    np.testing.assert_array_equal(out.q, pose.q)


def test_exp_pure_translation():
    delta = np.array([0.3, -0.2, 0.9, 0.0, 0.0, 0.0])
    pose = se3_exp(delta)
    np.testing.assert_allclose(pose.t, delta[:3], atol=0.0)
    np.testing.assert_allclose(pose.q, [0.0, 0.0, 0.0, 1.0], atol=0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_retract_round_trip(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    delta = rng.normal(scale=0.5, size=6)
    back = se3_retract(se3_retract(pose, delta), -delta)
    np.testing.assert_allclose(back.t, pose.t, atol=1e-9)
    np.testing.assert_allclose(
        quat_to_matrix(back.q), quat_to_matrix(pose.q), atol=1e-9
    )


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(13)
    for _ in range(50):
        qa = random_pose(rng).q
        qb = random_pose(rng).q
        lhs = quat_to_matrix(quat_multiply(qa, qb))
        rhs = quat_to_matrix(qa) @ quat_to_matrix(qb)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_quat_from_rotvec_small_angle_continuity():
    tiny = quat_from_rotvec(np.array([1e-12, 0.0, 0.0]))
    np.testing.assert_allclose(tiny, [5e-13, 0.0, 0.0, 1.0], atol=1e-15)


def _visible_setup(rng):
    """Pose pair, pixel, and inverse depth whose reprojection stays in front."""
    intr = default_intrinsics()
    while True:
        pose_i = random_pose(rng, max_angle=0.8, max_trans=0.8)
        pose_j = random_pose(rng, max_angle=0.8, max_trans=0.8)
        px = Pixel(rng.uniform(80, intr.width - 80), rng.uniform(60, intr.height - 60))
        d = rng.uniform(0.1, 1.5)
        rel = pose_j.compose(pose_i.inverse())
        p = rel.apply(backproject(intr, px, d))
        if p[2] > 0.2:
            return intr, pose_i, pose_j, px, d


def test_reproject_round_trip_with_implied_depth():
    rng = np.random.default_rng(19)
    for _ in range(50):
        intr, pose_i, pose_j, px, d = _visible_setup(rng)
        rel = pose_j.compose(pose_i.inverse())
        p_j = rel.apply(backproject(intr, px, d))
        px_j = project(intr, p_j)
        back = reproject(pose_j, pose_i, intr, px_j, 1.0 / p_j[2])
        assert abs(back.u - px.u) < 1e-9
        assert abs(back.v - px.v) < 1e-9


def test_reproject_identity_poses_is_identity():
    intr = default_intrinsics()
    px = Pixel(123.0, 456.0 / 2)
    out = reproject(Se3Pose.identity(), Se3Pose.identity(), intr, px, 0.7)
    assert abs(out.u - px.u) < 1e-12
    assert abs(out.v - px.v) < 1e-12


def test_analytic_jacobians_match_finite_differences():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        intr, pose_i, pose_j, px, d = _visible_setup(rng)
        _, j_i, j_j, j_d = reproject_jacobians(pose_i, pose_j, intr, px, d)
        f_i, f_j, f_d = fd_reproject_jacobians(pose_i, pose_j, intr, px, d)
        for a, f in ((j_i, f_i), (j_j, f_j), (j_d, f_d)):
            scale = max(1.0, np.abs(a).max())
            worst = max(worst, np.abs(a - f).max() / scale)
    assert worst < 1e-4, f"max relative Jacobian error {worst}"


def test_batch_linearization_matches_scalar():
    rng = np.random.default_rng(55)
    intr = default_intrinsics()
    setups = [_visible_setup(rng) for _ in range(40)]
    centers = np.array([[s[3].u, s[3].v] for s in setups])
    depths = np.array([s[4] for s in setups])
    r_ji = np.stack(
        [s[2].compose(s[1].inverse()).rotation_matrix() for s in setups]
    )
    t_ji = np.stack([s[2].compose(s[1].inverse()).t for s in setups])
    p_i = backproject_batch(intr, centers, depths)
    pred, valid, j_i, j_j, j_d = linearize_reprojection_batch(
        r_ji, t_ji, p_i, depths, intr
    )
    assert valid.all()
    for n, (intr_n, pose_i, pose_j, px, d) in enumerate(setups):
        p, si, sj, sd = reproject_jacobians(pose_i, pose_j, intr, px, d)
        np.testing.assert_allclose(pred[n], [p.u, p.v], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(j_i[n], si, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(j_j[n], sj, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(j_d[n], sd, rtol=1e-10, atol=1e-12)


def test_batch_linearization_flags_behind_camera():
    intr = default_intrinsics()
    pose_i = Se3Pose.identity()
    # Move the second camera far forward so the point falls behind it.
    pose_j = Se3Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0.0, 0.0, -10.0]))
    rel = pose_j.compose(pose_i.inverse())
    centers = np.array([[320.0, 240.0]])
    depths = np.array([0.5])
    p_i = backproject_batch(intr, centers, depths)
    pred, valid, j_i, j_j, j_d = linearize_reprojection_batch(
        rel.rotation_matrix()[None], rel.t[None], p_i, depths, intr
    )
    assert not valid[0]
    assert np.isnan(pred[0]).all()
    assert np.all(j_i[0] == 0.0) and np.all(j_j[0] == 0.0) and np.all(j_d[0] == 0.0)
