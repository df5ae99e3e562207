import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation as SciRot

from fgo_integrity.geom import (
    ERROR_DIM,
    SL_TH,
    AnchorGeodesy,
    FrameTag,
    FrameTransform,
    ImuState,
    Rotation,
    ecef_from_enu,
    manifold_minus,
    manifold_plus,
    right_jacobian,
    rotation_from_yaw,
    so3_exp,
    so3_log,
    yaw_matrix_derivative,
)

from conftest import random_state

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_yaw_zero_is_identity():
    np.testing.assert_array_equal(rotation_from_yaw(0.0).matrix, np.eye(3))


def test_yaw_quarter_turn_maps_east_to_north():
    out = rotation_from_yaw(math.pi / 2).apply([1.0, 0.0, 0.0])
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-12)


def test_yaw_composition_cancels():
    R = (rotation_from_yaw(0.3) * rotation_from_yaw(-0.3)).matrix
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)


def test_yaw_rejects_nonfinite():
    with pytest.raises(ValueError):
        rotation_from_yaw(float("nan"))


def test_yaw_derivative_matches_finite_difference():
    psi, h = 0.7, 1e-6
    fd = (rotation_from_yaw(psi + h).matrix - rotation_from_yaw(psi - h).matrix) / (2 * h)
    np.testing.assert_allclose(yaw_matrix_derivative(psi), fd, atol=1e-9)


def test_enu_up_axis_at_equator_and_pole():
    up = ecef_from_enu(AnchorGeodesy.from_latlon(0.0, 0.0)).matrix[:, 2]
    np.testing.assert_allclose(up, [1.0, 0.0, 0.0], atol=1e-12)
    up = ecef_from_enu(AnchorGeodesy.from_latlon(math.pi / 2, 0.0)).matrix[:, 2]
    np.testing.assert_allclose(up, [0.0, 0.0, 1.0], atol=1e-12)


def test_enu_columns_orthonormal_random_anchors(rng):
    for lat, lon in zip(rng.uniform(-math.pi / 2, math.pi / 2, 1000), rng.uniform(-math.pi, math.pi, 1000)):
        R = ecef_from_enu(AnchorGeodesy.from_latlon(lat, lon)).matrix
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) > 0


def test_anchor_rejects_off_earth_position():
    with pytest.raises(ValueError):
        AnchorGeodesy(np.array([1.0, 0.0, 0.0]), 0.0, 0.0)


def test_rotation_rejects_zero_quaternion():
    with pytest.raises(ValueError):
        Rotation((0.0, 0.0, 0.0, 0.0))


@given(vec3)
def test_rotvec_matches_independent_rotation(phi):
    ours = Rotation.from_rotvec(phi).matrix
    ref = SciRot.from_rotvec(phi).as_matrix()
    np.testing.assert_allclose(ours, ref, atol=1e-12)


@given(vec3, vec3)
def test_rotation_products_stay_unit(a, b):
    q = (Rotation.from_rotvec(a) * Rotation.from_rotvec(b)).q
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12
    R = Rotation(q).matrix
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)


@given(vec3)
def test_log_inverts_exp(phi):
    if np.linalg.norm(phi) >= math.pi - 1e-6:
        phi = phi / np.linalg.norm(phi) * 3.0
    np.testing.assert_allclose(Rotation.from_rotvec(phi).log(), phi, atol=1e-9)
    np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)


def test_from_matrix_round_trip(rng):
    for _ in range(200):
        r = Rotation.from_rotvec(rng.normal(0, 1.5, 3))
        np.testing.assert_allclose(Rotation.from_matrix(r.matrix).matrix, r.matrix, atol=1e-12)


def test_right_jacobian_first_order(rng):
    phi = rng.normal(0, 0.5, 3)
    d = rng.normal(0, 1e-6, 3)
    lhs = so3_exp(phi + d)
    rhs = so3_exp(phi) @ so3_exp(right_jacobian(phi) @ d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


def test_frame_transform_chain_and_inverse():
    a = FrameTransform(rotation_from_yaw(0.4), np.array([1.0, 2.0, 3.0]), FrameTag.BODY, FrameTag.WORLD)
    b = FrameTransform(rotation_from_yaw(-0.1), np.array([0.0, 1.0, 0.0]), FrameTag.WORLD, FrameTag.ENU)
    x = np.array([0.3, -0.2, 1.0])
    np.testing.assert_allclose((b @ a).apply(x), b.apply(a.apply(x)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(x)), x, atol=1e-12)
    with pytest.raises(ValueError):
        a @ b


def test_manifold_plus_zero_is_noop(rng):
    s = random_state(rng)
    out = manifold_plus(s, np.zeros(ERROR_DIM))
    np.testing.assert_array_equal(out.p, s.p)
    np.testing.assert_allclose(out.q.matrix, s.q.matrix, atol=1e-15)
    np.testing.assert_array_equal(out.clock, s.clock)


def test_attitude_increment_angle():
    d = np.zeros(ERROR_DIM)
    d[SL_TH] = (1e-3, 0.0, 0.0)
    s = ImuState(np.zeros(3), np.zeros(3), Rotation.identity())
    assert abs(manifold_plus(s, d).q.angle - 1e-3) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_manifold_round_trip(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    d = rng.normal(0, 1, ERROR_DIM)
    d *= rng.uniform(0, 1e-2) / np.linalg.norm(d)
    back = manifold_minus(manifold_plus(s, d), s)
    np.testing.assert_allclose(back, d, atol=1e-10)


def test_manifold_plus_rejects_bad_shape(rng):
    with pytest.raises(ValueError):
        manifold_plus(random_state(rng), np.zeros(15))


def test_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        ImuState(np.array([np.nan, 0, 0]), np.zeros(3), Rotation.identity())
