import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from artisplat.geom import (EulerPose, RankDeficientError, RigidTransform, apply, axis_angle_to_matrix,
                            compose, euler_to_matrix, euler_to_matrix_t, euler_to_transform, icp_align,
                            icp_residual, inverse, kabsch_align, matrix_to_euler, matrix_to_quat, quat_to_matrix,
                            quat_to_matrix_t, rotation_angle)

angles3 = st.lists(st.floats(-6.0, 6.0), min_size=3, max_size=3)
vec3 = st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3)


def random_transform(rng):
    return RigidTransform.from_rotation_matrix(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
                                               rng.normal(size=3))


def rz(deg):
    return RigidTransform.from_rotation_matrix(axis_angle_to_matrix([0, 0, 1], math.radians(deg)))


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    assert compose(RigidTransform.identity(), t).allclose(t)
    assert np.linalg.norm(compose(t, inverse(t)).as_matrix() - np.eye(4)) < 1e-9


def test_compose_rz90_twice():
    p = apply(compose(rz(90), rz(90)), [[1.0, 0.0, 0.0]])[0]
    np.testing.assert_allclose(p, [-1, 0, 0], atol=1e-9)


def test_compose_applies_b_first():
    a = RigidTransform.from_translation([1.0, 0, 0])
    b = rz(90)
    # rotate (1,0,0) to (0,1,0), then shift by +x
    np.testing.assert_allclose(apply(compose(a, b), [[1.0, 0, 0]])[0], [1, 1, 0], atol=1e-12)


def test_inverse_cases():
    assert inverse(RigidTransform.identity()).allclose(RigidTransform.identity())
    np.testing.assert_allclose(inverse(RigidTransform.from_translation([1, 2, 3])).translation, [-1, -2, -3])
    t = compose(rz(30), RigidTransform.from_translation([1, 0, 0]))
    np.testing.assert_allclose(inverse(t).as_matrix(), np.linalg.inv(t.as_matrix()), atol=1e-12)


def test_quaternion_norm_after_construction():
    t = RigidTransform(np.array([2.0, 0.3, -0.1, 0.5]), np.zeros(3))
    assert abs(np.linalg.norm(t.rotation) - 1.0) < 1e-9


def test_euler_examples():
    assert euler_to_transform(EulerPose()).allclose(RigidTransform.identity())
    t = euler_to_transform(EulerPose([1, 0, 0], [0, 0, 0]))
    assert np.array_equal(t.rotation, [1, 0, 0, 0]) and np.array_equal(t.translation, [1, 0, 0])
    p = apply(euler_to_transform(EulerPose(np.zeros(3), [0, 0, math.pi / 2])), [[1, 0, 0]])[0]
    np.testing.assert_allclose(p, [0, 1, 0], atol=1e-9)


def test_euler_matches_rotation_oracle_1000():
    rng = np.random.default_rng(1)
    for ang in rng.uniform(-2 * math.pi, 2 * math.pi, size=(1000, 3)):
        # intrinsic X, Y, Z == extrinsic z-y-x product Rz @ Ry @ Rx
        ref = Rotation.from_euler("XYZ", [0, 0, 0]).as_matrix()
        ref = (Rotation.from_euler("z", ang[2]) * Rotation.from_euler("y", ang[1])
               * Rotation.from_euler("x", ang[0])).as_matrix()
        m = euler_to_transform(EulerPose(np.zeros(3), ang)).rotation_matrix
        assert np.abs(m - ref).max() < 1e-9


def test_euler_torch_matches_numpy():
    ang = np.array([[0.3, -1.2, 2.5], [4.0, 0.1, -0.7]])
    mt = euler_to_matrix_t(torch.tensor(ang)).numpy()
    for a, m in zip(ang, mt):
        np.testing.assert_allclose(m, euler_to_matrix(a), atol=1e-12)


def test_matrix_to_euler_roundtrip():
    ang = np.array([0.4, -0.3, 2.0])
    np.testing.assert_allclose(matrix_to_euler(euler_to_matrix(ang)), ang, atol=1e-12)


def test_quat_roundtrip_and_torch():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
        q = matrix_to_quat(m)
        np.testing.assert_allclose(quat_to_matrix(q), m, atol=1e-12)
        np.testing.assert_allclose(quat_to_matrix_t(torch.tensor(q)[None]).numpy()[0], m, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(angles3, vec3, angles3, vec3, angles3, vec3)
def test_compose_associative(a1, t1, a2, t2, a3, t3):
    a, b, c = (euler_to_transform(EulerPose(t, ang)) for ang, t in ((a1, t1), (a2, t2), (a3, t3)))
    left = compose(compose(a, b), c).as_matrix()
    right = compose(a, compose(b, c)).as_matrix()
    assert np.abs(left - right).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(angles3, vec3, st.integers(0, 2 ** 31 - 1))
def test_apply_is_isometry(ang, t, seed):
    pts = np.random.default_rng(seed).normal(size=(100, 3))
    moved = apply(euler_to_transform(EulerPose(t, ang)), pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    assert moved.shape == pts.shape
    assert np.abs(d0 - d1).max() < 1e-9


def test_apply_identity_and_translation():
    pts = np.random.default_rng(3).normal(size=(10, 3))
    np.testing.assert_array_equal(apply(RigidTransform.identity(), pts), pts)
    moved = apply(RigidTransform.from_translation([0.5, -1, 2]), pts)
    np.testing.assert_allclose(moved.mean(axis=0), pts.mean(axis=0) + [0.5, -1, 2])


def test_kabsch_identity_and_planted():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(50, 3))
    assert kabsch_align(src, src).allclose(RigidTransform.identity(), atol=1e-9)
    for _ in range(10):
        t = random_transform(rng)
        est = kabsch_align(src, apply(t, src))
        assert rotation_angle(est.rotation_matrix.T @ t.rotation_matrix) < 1e-6
        assert np.linalg.norm(est.translation - t.translation) < 1e-6
        assert np.linalg.det(est.rotation_matrix) > 0


def test_kabsch_square_45():
    sq = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]], dtype=float)
    est = kabsch_align(sq, apply(rz(45), sq))
    assert math.degrees(rotation_angle(est.rotation_matrix)) == pytest.approx(45.0, abs=1e-9)


@pytest.mark.parametrize("pts", [
    np.zeros((5, 3)),
    np.outer(np.arange(5.0), [1.0, 2.0, 3.0]),
    np.zeros((2, 3)),
])
def test_kabsch_degenerate(pts):
    with pytest.raises(RankDeficientError):
        kabsch_align(pts, pts)


def test_icp_identity_and_planted():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(200, 3)) * [0.2, 0.1, 0.05]
    assert icp_align(src, src, max_iters=1).allclose(RigidTransform.identity(), atol=1e-9)
    t = RigidTransform.from_rotation_matrix(axis_angle_to_matrix([0.3, 0.2, 1.0], math.radians(10)), [0.05, 0, 0])
    dst = apply(t, src)
    est = icp_align(src, dst)
    assert icp_residual(est, src, dst) < 1e-4


def test_icp_partial_overlap_not_worse():
    rng = np.random.default_rng(6)
    dst = rng.normal(size=(300, 3))
    src = dst[: int(0.8 * len(dst))]
    src = apply(RigidTransform.from_translation([0.05, -0.02, 0.0]), src)
    est = icp_align(src, dst)
    assert icp_residual(est, src, dst) <= icp_residual(RigidTransform.identity(), src, dst)


def test_icp_empty_raises():
    with pytest.raises(ValueError):
        icp_align(np.zeros((0, 3)), np.zeros((3, 3)))
