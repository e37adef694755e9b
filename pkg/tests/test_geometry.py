import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsplat.geometry import (ScanGeometry, orbit_poses, pixel_rays, pose_at_angle,
                              project_point, projection_jacobian)


def rz(deg):
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1.0]])


def test_full_orbit_has_one_pose_per_degree():
    poses = orbit_poses(ScanGeometry())
    assert len(poses) == 360
    np.testing.assert_allclose([p.view_angle_deg for p in poses], np.arange(360.0))


def test_pose_at_zero_degrees():
    p = pose_at_angle(ScanGeometry(source_to_isocenter=1000.0), 0.0)
    np.testing.assert_allclose(p.camera_center, [1000.0, 0, 0])
    np.testing.assert_allclose(p.principal_axis, [-1.0, 0, 0], atol=1e-15)


def test_focal_length_formula():
    g = ScanGeometry(image_width=128, image_height=128, detector_width=300.0,
                     detector_height=300.0, source_to_detector=1500.0)
    assert g.focal_x == pytest.approx(640.0)
    p = pose_at_angle(g, 10.0)
    assert (p.fx, p.fy, p.cx, p.cy) == pytest.approx((640.0, 640.0, 64.0, 64.0))


def test_orbit_invariants():
    g = ScanGeometry(n_views=72, angular_step_deg=5.0, angular_start_deg=3.0)
    poses = orbit_poses(g)
    for k, p in enumerate(poses):
        R = p.rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(p.camera_center) == pytest.approx(g.source_to_isocenter, abs=1e-9)
        assert p.camera_center[2] == 0.0
        # principal axis passes through the isocenter
        to_origin = -p.camera_center / np.linalg.norm(p.camera_center)
        np.testing.assert_allclose(p.principal_axis, to_origin, atol=1e-9)
        u, v, depth, ok = project_point(p, np.zeros(3))
        assert ok and depth == pytest.approx(g.source_to_isocenter)
        assert (u, v) == pytest.approx((p.cx, p.cy), abs=1e-9)
        if k + 1 < len(poses):
            np.testing.assert_allclose(poses[k + 1].camera_center, rz(5.0) @ p.camera_center,
                                       atol=1e-9)


def test_axis_convention_is_frozen():
    # world +z (patient superior) maps to decreasing v; the orbit direction to increasing u
    g = ScanGeometry(source_to_isocenter=1000.0, source_to_detector=1500.0,
                     detector_width=300.0, detector_height=300.0)
    p = pose_at_angle(g, 0.0)
    u, v, depth, ok = project_point(p, [0.0, 0.0, 10.0])
    assert ok and depth == pytest.approx(1000.0)
    assert v == pytest.approx(p.cy - 640.0 * 10.0 / 1000.0)
    assert u == pytest.approx(p.cx)
    u, v, _, _ = project_point(p, [0.0, 10.0, 0.0])
    assert u == pytest.approx(p.cx + 6.4) and v == pytest.approx(p.cy)


def test_point_behind_camera_not_projectable():
    p = pose_at_angle(ScanGeometry(), 0.0)
    assert project_point(p, [2000.0, 0, 0])[3] is False
    assert project_point(p, p.camera_center)[3] is False


def test_jacobian_examples():
    p = pose_at_angle(ScanGeometry(source_to_detector=1500, detector_width=300,
                                   detector_height=300), 0.0)
    np.testing.assert_allclose(projection_jacobian(p, [0, 0, 1000.0]),
                               [[0.64, 0, 0], [0, 0.64, 0]])
    assert projection_jacobian(p, [100.0, 0, 1000.0])[0, 2] == pytest.approx(-0.064)
    with pytest.raises(ValueError):
        projection_jacobian(p, [0, 0, 0.0])


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-200, 200), y=st.floats(-200, 200), z=st.floats(300, 2000))
def test_jacobian_matches_finite_differences(x, y, z):
    p = pose_at_angle(ScanGeometry(), 0.0)

    def uv(xc):
        return np.array([p.fx * xc[0] / xc[2] + p.cx, p.fy * xc[1] / xc[2] + p.cy])

    xc = np.array([x, y, z])
    h = 1e-3
    fd = np.stack([(uv(xc + h * e) - uv(xc - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    assert np.abs(projection_jacobian(p, xc) - fd).max() < 1e-6


def test_pixel_rays_hit_their_pixels():
    g = ScanGeometry(image_width=16, image_height=12)
    p = pose_at_angle(g, 37.0)
    rays = pixel_rays(p, 16, 12)
    np.testing.assert_allclose(np.linalg.norm(rays, axis=-1), 1.0)
    for v, u in [(0, 0), (5, 9), (11, 15)]:
        u2, v2, _, _ = project_point(p, p.camera_center + 700.0 * rays[v, u])
        assert (u2, v2) == pytest.approx((u, v), abs=1e-9)


@pytest.mark.parametrize("kw", [dict(source_to_detector=900.0), dict(detector_width=0.0),
                                dict(n_views=400), dict(image_width=0)])
def test_invalid_geometry(kw):
    with pytest.raises(ValueError):
        orbit_poses(ScanGeometry(**kw))


def test_geometry_dict_round_trip():
    g = ScanGeometry(n_views=7, angular_step_deg=2.5)
    assert ScanGeometry.from_dict(g.to_dict()) == g
