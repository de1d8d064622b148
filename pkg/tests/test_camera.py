import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facewarp.camera import (CameraIntrinsics, Mesh, dfov_from_focal, focal_from_dfov,
                             stereographic_mesh, stereographic_point, stereographic_radius,
                             uniform_mesh)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 10, 100.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(10, 10, 0.0)
    assert CameraIntrinsics(640, 480, 400.0).d == 480


def test_focal_from_dfov_90deg():
    # diagonal 800, tan(45 deg) = 1
    assert focal_from_dfov(90.0, 640, 480) == pytest.approx(400.0, rel=1e-12)


def test_focal_from_dfov_105deg():
    diag = math.sqrt(1920 ** 2 + 1080 ** 2)
    expected = diag / (2 * math.tan(math.pi * 105 / 360))
    assert focal_from_dfov(105.0, 1920, 1080) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(845.175, abs=1e-3)


def test_focal_monotone_as_fov_shrinks():
    fs = [focal_from_dfov(d, 640, 480) for d in (120, 60, 10, 1, 1e-3)]
    assert all(a < b for a, b in zip(fs, fs[1:]))


@pytest.mark.parametrize("bad", [0.0, 180.0, -5.0, 200.0])
def test_focal_from_dfov_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        focal_from_dfov(bad, 640, 480)


@given(st.floats(0.5, 179.5), st.integers(2, 4000), st.integers(2, 4000))
def test_dfov_round_trip(dfov, w, h):
    f = focal_from_dfov(dfov, w, h)
    assert dfov_from_focal(f, w, h) == pytest.approx(dfov, rel=1e-9)


def test_uniform_mesh_corners_and_spacing():
    m = uniform_mesh(CameraIntrinsics(32, 16, 20.0), 3, 3)
    g = m.grid()
    assert g[0, 0].tolist() == [0, 0]
    assert g[0, -1].tolist() == [32, 0]
    assert g[-1, 0].tolist() == [0, 16]
    assert g[-1, -1].tolist() == [32, 16]
    m = uniform_mesh(CameraIntrinsics(33 * 7, 24 * 5, 100.0), 34, 25)
    assert np.all(np.diff(m.grid()[0, :, 0]) == 7.0)
    assert np.all(np.diff(m.grid()[:, 0, 1]) == 5.0)


def test_uniform_mesh_default_dims():
    m = uniform_mesh(CameraIntrinsics(1024, 768, 500.0))
    assert (m.cols, m.rows) == (33, 25)
    assert m.vertices.shape == (825, 2)


def test_mesh_validates_vertex_count():
    with pytest.raises(ValueError):
        Mesh(3, 3, np.zeros((8, 2)))
    with pytest.raises(ValueError):
        uniform_mesh(CameraIntrinsics(10, 10, 5.0), 1, 3)


def test_stereographic_center_fixed():
    cam = CameraIntrinsics(1000, 600, 300.0)
    assert stereographic_point(500.0, 300.0, cam) == (500.0, 300.0)


def test_stereographic_half_d_fixed():
    cam = CameraIntrinsics(1000, 600, 300.0)
    xu, yu = stereographic_point(500.0 + 300.0, 300.0, cam)
    assert xu == pytest.approx(800.0, rel=1e-12)
    assert yu == pytest.approx(300.0, abs=1e-12)


def test_stereographic_worked_example():
    # independent scalar evaluation of the radial map for W=H=1000, f=500
    f, half_d = 500.0, 500.0
    r0 = half_d / math.tan(0.5 * math.atan(half_d / f))
    r_u = r0 * math.tan(0.5 * math.atan(250.0 / f))
    assert r0 == pytest.approx(1207.1067811865476, rel=1e-12)
    assert r_u == pytest.approx(284.9592564609895, rel=1e-12)
    cam = CameraIntrinsics(1000, 1000, f)
    xu, yu = stereographic_point(750.0, 500.0, cam)
    assert xu == pytest.approx(500.0 + r_u, rel=1e-12)
    assert yu == pytest.approx(500.0, abs=1e-12)


def test_stereographic_radius_monotone():
    cam = CameraIntrinsics(1920, 1080, 845.0)
    r = np.linspace(0, 3000, 10_000)
    assert np.all(np.diff(stereographic_radius(r, cam)) > 0)


def test_stereographic_rotational_symmetry():
    cam = CameraIntrinsics(800, 800, 350.0)
    cx, cy = cam.center
    base = np.array([170.0, 60.0])
    xu0, yu0 = stereographic_point(cx + base[0], cy + base[1], cam)
    out0 = np.array([xu0 - cx, yu0 - cy])
    for k in range(8):
        t = 2 * math.pi * k / 8
        R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        p = R @ base
        xu, yu = stereographic_point(cx + p[0], cy + p[1], cam)
        np.testing.assert_allclose([xu - cx, yu - cy], R @ out0, atol=1e-9)


def test_stereographic_mesh_center_and_corners():
    cam = CameraIntrinsics(1024, 768, 500.0)
    src = uniform_mesh(cam)
    dst = stereographic_mesh(cam)
    center = src.index(16, 12)
    np.testing.assert_array_equal(dst.vertices[center], src.vertices[center])
    # corners lie beyond d/2, where the map contracts
    c = np.array(cam.center)
    for col, row in ((0, 0), (32, 0), (0, 24), (32, 24)):
        i = src.index(col, row)
        assert np.linalg.norm(dst.vertices[i] - c) < np.linalg.norm(src.vertices[i] - c)


def test_stereographic_mesh_converges_to_uniform_for_long_focal():
    devs = []
    for f in (1e3, 1e5, 1e7):
        cam = CameraIntrinsics(640, 480, f)
        devs.append(np.abs(stereographic_mesh(cam, 9, 7).vertices
                           - uniform_mesh(cam, 9, 7).vertices).max())
    assert devs[0] > devs[1] > devs[2]
    assert devs[2] < 1e-6


@settings(max_examples=50)
@given(st.integers(16, 4000), st.integers(16, 4000), st.floats(10.0, 1e4))
def test_stereographic_fixed_points_property(w, h, f):
    cam = CameraIntrinsics(w, h, f)
    assert stereographic_radius(0.0, cam) == 0.0
    assert stereographic_radius(cam.d / 2, cam) == pytest.approx(cam.d / 2, rel=1e-9)
