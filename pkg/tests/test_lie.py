import numpy as np
import pytest

from uwbtr.lie import (
    ExtendedPose, exp_so3, left_invariant_error, log_so3, project_so3, skew,
    so3_left_jacobian, so3_left_jacobian_inv, strapdown_step, wrap_angle, yaw_of,
)


def random_rotation(rng, max_angle=np.pi - 1e-3):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


def test_exp_identity():
    np.testing.assert_allclose(exp_so3(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_z():
    C = exp_so3(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(C @ np.array([1.0, 0.0, 0.0]),
                               np.array([0.0, 1.0, 0.0]), atol=1e-12)


def test_log_identity():
    np.testing.assert_allclose(log_so3(np.eye(3)), np.zeros(3))


def test_log_exp_fixed_vector():
    phi = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(log_so3(exp_so3(phi)), phi, atol=1e-10)


def test_log_at_pi_about_z():
    C = exp_so3(np.array([0.0, 0.0, np.pi]))
    phi = log_so3(C)
    # axis recovered up to sign
    assert abs(abs(phi[2]) - np.pi) < 1e-8
    assert np.linalg.norm(phi[:2]) < 1e-8


def test_exp_log_roundtrip_random():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        phi = axis * rng.uniform(0.0, np.pi - 1e-3)
        np.testing.assert_allclose(log_so3(exp_so3(phi)), phi, atol=1e-9)


def test_rotation_validity():
    rng = np.random.default_rng(3)
    for _ in range(100):
        C = random_rotation(rng)
        np.testing.assert_allclose(C.T @ C, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(C) - 1.0) < 1e-9


def test_wrap_angle_convention():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)  # (-pi, pi]: -pi maps up
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)
    assert wrap_angle(0.3) == pytest.approx(0.3)
    vals = wrap_angle(np.linspace(-20, 20, 999))
    assert np.all(vals > -np.pi) and np.all(vals <= np.pi)


def test_left_jacobian_inverse_consistency():
    rng = np.random.default_rng(11)
    for _ in range(100):
        phi = rng.standard_normal(3)
        J = so3_left_jacobian(phi)
        np.testing.assert_allclose(J @ so3_left_jacobian_inv(phi), np.eye(3),
                                   atol=1e-9)


def test_left_jacobian_definition():
    # Exp(phi + dphi) ~ Exp(Jl(phi) dphi) Exp(phi)
    rng = np.random.default_rng(12)
    for _ in range(50):
        phi = rng.standard_normal(3)
        d = rng.standard_normal(3) * 1e-6
        lhs = exp_so3(phi + d)
        rhs = exp_so3(so3_left_jacobian(phi) @ d) @ exp_so3(phi)
        np.testing.assert_allclose(lhs, rhs, atol=1e-11)


def test_extended_pose_group_axioms():
    rng = np.random.default_rng(21)
    for _ in range(200):
        Xs = [
            ExtendedPose(random_rotation(rng), rng.standard_normal(3),
                         rng.standard_normal(3))
            for _ in range(3)
        ]
        a, b, c = Xs
        left = a.compose(b).compose(c)
        right = a.compose(b.compose(c))
        np.testing.assert_allclose(left.as_matrix(), right.as_matrix(), atol=1e-9)
        ident = a.compose(a.inverse())
        np.testing.assert_allclose(ident.as_matrix(), np.eye(5), atol=1e-9)


def test_extended_pose_embedding():
    X = ExtendedPose(exp_so3([0.1, 0, 0]), [1, 2, 3], [4, 5, 6])
    M = X.as_matrix()
    np.testing.assert_allclose(M[3:, 3:], np.eye(2))
    np.testing.assert_allclose(M[0:3, 3], X.v)


def test_extended_pose_exp_log_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(200):
        xi = rng.standard_normal(9)
        xi[0:3] *= 0.8 * np.pi / max(1.0, np.linalg.norm(xi[0:3]))
        np.testing.assert_allclose(ExtendedPose.exp(xi).log(), xi, atol=1e-9)


def test_left_invariant_error_trivial_cases():
    rng = np.random.default_rng(33)
    X = ExtendedPose(random_rotation(rng), rng.standard_normal(3),
                     rng.standard_normal(3))
    err = left_invariant_error(X, X)
    np.testing.assert_allclose(err.as_matrix(), np.eye(5), atol=1e-12)
    err2 = left_invariant_error(ExtendedPose.identity(), X)
    np.testing.assert_allclose(err2.as_matrix(), X.as_matrix())


def test_left_invariant_error_recomposition():
    rng = np.random.default_rng(34)
    for _ in range(100):
        X_ref = ExtendedPose(random_rotation(rng), rng.standard_normal(3),
                             rng.standard_normal(3))
        X = ExtendedPose(random_rotation(rng), rng.standard_normal(3),
                         rng.standard_normal(3))
        dX = left_invariant_error(X_ref, X)
        np.testing.assert_allclose(X_ref.compose(dX).as_matrix(), X.as_matrix(),
                                   atol=1e-9)


def test_project_so3():
    rng = np.random.default_rng(8)
    C = random_rotation(rng) + 1e-6 * rng.standard_normal((3, 3))
    R = project_so3(C)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) > 0


def test_yaw_of():
    assert yaw_of(exp_so3([0, 0, 0.7])) == pytest.approx(0.7)


def test_strapdown_step_constant_velocity():
    C, v, r = np.eye(3), np.array([1.0, 0.0, 0.0]), np.zeros(3)
    g = np.array([0.0, 0.0, -9.80665])
    C2, v2, r2 = strapdown_step(C, v, r, np.array([0, 0, 9.80665]), np.zeros(3), 0.1, g)
    np.testing.assert_allclose(v2, v)
    np.testing.assert_allclose(r2, [0.1, 0.0, 0.0])
    np.testing.assert_allclose(C2, np.eye(3))
