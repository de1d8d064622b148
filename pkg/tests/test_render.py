import math

import numpy as np
import pytest
from scipy import ndimage

from facewarp.camera import CameraIntrinsics, Mesh, stereographic_mesh, uniform_mesh
from facewarp.render import WarpField, render_frame


@pytest.fixture
def image(rng):
    return rng.integers(0, 256, (96, 128, 3), dtype=np.uint8)


def _cam():
    return CameraIntrinsics(128, 96, 90.0)


def test_identity_is_bitwise_lossless(image):
    u = uniform_mesh(_cam(), 9, 7)
    out, stats = render_frame(image, WarpField(u, u.copy()))
    assert out.dtype == image.dtype and out.shape == image.shape
    assert np.array_equal(out, image)
    assert stats.fold_overs == 0 and stats.uncovered_pixels == 0


def test_translation_with_border_clamp(image):
    u = uniform_mesh(_cam(), 9, 7)
    out, stats = render_frame(image, WarpField(u, Mesh(9, 7, u.vertices + [10.0, 0.0])))
    assert out.shape == image.shape
    # direct per-pixel oracle: out[y, x] = in[y, x - 10], clamped at the left edge
    ref = image[:, np.clip(np.arange(128) - 10, 0, 127)]
    assert np.array_equal(out, ref)
    assert stats.uncovered_pixels == 10 * 96


@pytest.mark.parametrize("offset", [(3, 0), (0, 5), (-4, 2)])
def test_integer_offset_is_exact_translation_on_interior(image, offset):
    u = uniform_mesh(_cam(), 9, 7)
    out, _ = render_frame(image, WarpField(u, Mesh(9, 7, u.vertices + offset)))
    dx, dy = offset
    ys = np.arange(max(dy, 0), 96 + min(dy, 0))
    xs = np.arange(max(dx, 0), 128 + min(dx, 0))
    assert np.array_equal(out[np.ix_(ys, xs)], image[np.ix_(ys - dy, xs - dx)])


def test_fold_over_counted(image):
    u = uniform_mesh(_cam(), 3, 3)
    v = u.vertices.copy()
    v[4] = [130.0, 100.0]  # center vertex dragged past the far corner
    out, stats = render_frame(image, WarpField(u, Mesh(3, 3, v)))
    assert stats.fold_overs > 0
    assert out.shape == image.shape


def test_size_mismatch_rejected(image):
    u = uniform_mesh(CameraIntrinsics(64, 64, 50.0), 3, 3)
    with pytest.raises(ValueError):
        render_frame(image, WarpField(u, u))
    with pytest.raises(ValueError):
        WarpField(u, uniform_mesh(CameraIntrinsics(64, 64, 50.0), 4, 3))


def test_stereographic_warp_keeps_half_d_circle():
    W, H = 480, 400
    cam = CameraIntrinsics(W, H, 260.0)
    y, x = np.mgrid[0:H, 0:W] + 0.5
    chart = np.hypot(x - W / 2, y - H / 2)  # radius chart: value = source radius
    out, _ = render_frame(chart, WarpField(uniform_mesh(cam), stereographic_mesh(cam)))
    half_d = cam.d / 2
    radii = []
    for k in range(16):
        t = 2 * math.pi * k / 16
        r = np.linspace(half_d - 15, half_d + 15, 3001)
        px, py = W / 2 + r * math.cos(t), H / 2 + r * math.sin(t)
        if px.min() < 1 or px.max() > W - 1 or py.min() < 1 or py.max() > H - 1:
            continue
        vals = ndimage.map_coordinates(out, [py - 0.5, px - 0.5], order=1)
        radii.append(np.interp(half_d, vals, r))
    assert len(radii) >= 6
    assert np.abs(np.array(radii) - half_d).max() < 0.5
