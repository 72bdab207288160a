import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epochpose.autodiff import Tensor, value_and_grad
from epochpose.camera import (CameraError, CameraExtrinsics, CameraIntrinsics, CropGeometry,
                              camera_depths, camera_from_record, camera_record, capsule_angles,
                              extrinsics_from_capsule, intrinsics_from_crop,
                              inverse_rotate_azimuth, project, rotate_azimuth, rotation_xy,
                              sample_rotation_angle, stack_cameras, unproject)

from oracles import pinhole

I3 = np.eye(3)
angles = st.floats(-math.pi, math.pi, allow_nan=False)


def test_project_by_hand():
    K = CameraIntrinsics(2.0, 2.0)
    E = CameraExtrinsics(I3, np.zeros(3))
    np.testing.assert_allclose(project(np.array([[1.0, 2.0, 2.0]]), K, E), [[1.0, 2.0]])


def test_project_optical_axis():
    K = CameraIntrinsics(1.0, 1.0)
    E = CameraExtrinsics(I3, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(project(np.array([[0.0, 0.0, 1.0]]), K, E), [[0.0, 0.0]])


def test_project_matches_scalar_pinhole():
    rng = np.random.default_rng(0)
    R = rotation_xy(0.3, -1.1)
    t = np.array([10.0, -20.0, 5000.0])
    K = CameraIntrinsics(900.0, 850.0, 12.0, -7.0)
    y = rng.normal(size=(17, 3)) * 400
    x = project(y, K, CameraExtrinsics(R, t))
    ref = [pinhole(p, (900.0, 850.0), (12.0, -7.0), R.tolist(), t.tolist()) for p in y]
    np.testing.assert_allclose(x, ref, rtol=1e-13)


def test_project_camera_plane_names_joint():
    K = CameraIntrinsics(1.0, 1.0)
    E = CameraExtrinsics(I3, np.zeros(3))
    y = np.ones((3, 3))
    y[2, 2] = 0.0
    with pytest.raises(CameraError, match="joint 2"):
        project(y, K, E)


def test_unproject_by_hand_and_zero_depth():
    K = CameraIntrinsics(2.0, 2.0)
    E = CameraExtrinsics(I3, np.zeros(3))
    np.testing.assert_allclose(unproject(np.array([[1.0, 2.0]]), np.array([2.0]), K, E),
                               [[1.0, 2.0, 2.0]])
    with pytest.raises(CameraError):
        unproject(np.array([[1.0, 2.0]]), np.array([0.0]), K, E)


def test_unproject_roundtrip_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        R = rotation_xy(*rng.uniform(-0.5, 0.5, 2))
        t = np.array([*rng.normal(size=2) * 100, rng.uniform(3000, 9000)])
        K = CameraIntrinsics(*rng.uniform(300, 1500, 2), *rng.normal(size=2) * 50)
        E = CameraExtrinsics(R, t)
        y = rng.normal(size=(17, 3)) * 500
        back = unproject(project(y, K, E), camera_depths(y, E), K, E)
        assert np.abs(back - y).max() < 1e-9


def test_intrinsics_worked_example():
    K = intrinsics_from_crop(CropGeometry(1000, 1000, 100, 0, 500, 500, 224, 224, 1.0))
    assert K.s_w == pytest.approx(0.448, abs=1e-12)
    assert math.hypot(1000, 1000) == pytest.approx(1414.2136, abs=1e-4)
    assert K.f_w == pytest.approx(633.5677, abs=1e-4)
    assert K.c_w == pytest.approx(129.024, abs=1e-9)


def test_centered_crop_has_zero_principal_point():
    g = CropGeometry(800, 600, 400 - 112, 300 - 112, 224, 224)
    K = intrinsics_from_crop(g)
    assert K.c_w == pytest.approx(0.0, abs=1e-12) and K.c_h == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("field", ["W_BB", "H_BB", "mu_h"])
def test_intrinsics_reject_nonpositive(field):
    g = CropGeometry(1000, 1000, 100, 0, 500, 500)
    setattr(g, field, 0.0)
    with pytest.raises(CameraError):
        intrinsics_from_crop(g)


def test_capsule_zero_angles():
    K = CameraIntrinsics(5.0, 5.0)
    E = extrinsics_from_capsule(np.tile([0.0, 0.0, 7.0], (17, 1)), K)
    np.testing.assert_allclose(E.R, I3, atol=1e-15)
    np.testing.assert_allclose(E.t, [0.0, 0.0, 7.0])


def test_capsule_quarter_turn():
    E = extrinsics_from_capsule(np.tile([0.0, math.pi / 2, 1.0], (17, 1)), CameraIntrinsics(1.0, 1.0))
    np.testing.assert_allclose(E.R, [[0, 0, 1], [0, 1, 0], [-1, 0, 0]], atol=1e-15)


def test_capsule_translation_and_closure():
    K = CameraIntrinsics(100.0, 200.0, 10.0, -20.0)
    E = extrinsics_from_capsule(np.tile([0.2, -0.4, 5.0], (17, 1)).reshape(51), K)
    np.testing.assert_allclose(E.t, [-0.5, 0.5, 5.0], atol=1e-15)
    np.testing.assert_allclose(project(np.zeros((1, 3)), K, E), [[0.0, 0.0]], atol=1e-15)


def test_capsule_behind_camera():
    with pytest.raises(CameraError, match="behind"):
        extrinsics_from_capsule(np.tile([0.0, 0.0, -1.0], (17, 1)), CameraIntrinsics(1.0, 1.0))


def test_capsule_uses_joint_mean():
    rng = np.random.default_rng(2)
    g = rng.normal(size=(17, 3)) * 0.1 + [0.1, 0.2, 3.0]
    K = CameraIntrinsics(1.0, 1.0)
    a = extrinsics_from_capsule(g, K)
    b = extrinsics_from_capsule(np.tile(g.mean(axis=0), (17, 1)), K)
    np.testing.assert_allclose(a.R, b.R, atol=1e-15)
    np.testing.assert_allclose(a.t, b.t, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(angles, angles)
def test_rotation_xy_is_proper(tx, ty):
    R = rotation_xy(tx, ty)
    CameraExtrinsics(R, np.zeros(3)).check_rotation()


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.5, 1.5), angles)
def test_capsule_angles_inverts_rotation(tx, ty):
    rx, ry = capsule_angles(rotation_xy(tx, ty))
    assert rx == pytest.approx(tx, abs=1e-12) and ry == pytest.approx(ty, abs=1e-12)


def test_rotation_xy_tensor_matches_numpy():
    tx, ty = Tensor(0.4, True), Tensor(-1.3, True)
    np.testing.assert_allclose(rotation_xy(tx, ty).data, rotation_xy(0.4, -1.3), atol=1e-15)


def test_check_rotation_rejects_reflection():
    with pytest.raises(CameraError):
        CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).check_rotation()


def test_rotate_identity_and_period():
    y = np.random.default_rng(3).normal(size=(17, 3))
    np.testing.assert_array_equal(rotate_azimuth(y, 0.0), y)
    np.testing.assert_allclose(rotate_azimuth(y, 2 * math.pi), y, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(angles)
def test_rotate_inverse_composition(theta):
    y = np.random.default_rng(4).normal(size=(17, 3)) * 500
    np.testing.assert_allclose(inverse_rotate_azimuth(rotate_azimuth(y, theta), theta), y,
                               atol=1e-9)


def test_rotation_keeps_vertical_axis():
    y = np.random.default_rng(5).normal(size=(17, 3))
    np.testing.assert_array_equal(rotate_azimuth(y, 1.0)[:, 1], y[:, 1])


def test_rotation_sampling_range_and_mean():
    a = np.degrees(sample_rotation_angle(np.random.default_rng(0), size=100_000))
    assert a.min() >= 10.0 and a.max() <= 350.0
    assert abs(a.mean() - 180.0) <= 2.0
    b = sample_rotation_angle(np.random.default_rng(0), size=10)
    np.testing.assert_array_equal(b, sample_rotation_angle(np.random.default_rng(0), size=10))


def test_project_gradient_through_tensor_camera():
    y = Tensor(np.random.default_rng(6).normal(size=(17, 3)), True)
    K = CameraIntrinsics(2.0, 2.0)
    E = CameraExtrinsics(I3, np.array([0.0, 0.0, 10.0]))
    out, (g,) = value_and_grad(lambda: project(y, K, E).sum(), [y])
    assert np.all(np.isfinite(g))


def test_camera_record_roundtrip():
    K = CameraIntrinsics(900.0, 850.0, 12.0, -7.0, 0.4, 0.4)
    E = CameraExtrinsics(rotation_xy(0.1, 0.2), [1.0, 2.0, 3.0])
    K2, E2 = camera_from_record(camera_record(K, E))
    np.testing.assert_array_equal(K2.vector(), K.vector())
    np.testing.assert_array_equal(E2.matrix(), E.matrix())
    Kb, Eb = stack_cameras([K, K2], [E, E2])
    assert Kb.vector().shape == (2, 6) and Eb.R.shape == (2, 3, 3)


def test_nonpositive_focal_rejected():
    with pytest.raises(CameraError):
        CameraIntrinsics(0.0, 1.0)
