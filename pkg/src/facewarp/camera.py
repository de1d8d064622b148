"""Camera intrinsics, warping meshes and the stereographic radial mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GRID = (33, 25)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Image size and focal length of a rectified pinhole camera, in pixels."""

    width_px: int
    height_px: int
    focal_px: float

    def __post_init__(self):
        if self.width_px < 2 or self.height_px < 2:
            raise ValueError(
                f"image must be at least 2x2 pixels, got {self.width_px}x{self.height_px}"
            )
        if not (self.focal_px > 0 and math.isfinite(self.focal_px)):
            raise ValueError(f"focal length must be positive and finite, got {self.focal_px}")

    @property
    def d(self) -> int:
        """Smaller image side; the stereographic map is radius-preserving at d/2."""
        return min(self.width_px, self.height_px)

    @property
    def center(self) -> tuple[float, float]:
        return self.width_px / 2.0, self.height_px / 2.0


@dataclass
class Mesh:
    """A cols x rows grid of 2-D vertices stored row-major as a (rows*cols, 2) array."""

    cols: int
    rows: int
    vertices: np.ndarray

    def __post_init__(self):
        if self.cols < 2 or self.rows < 2:
            raise ValueError(f"mesh needs at least 2x2 vertices, got {self.cols}x{self.rows}")
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if self.vertices.shape[0] != self.cols * self.rows:
            raise ValueError(
                f"expected {self.cols * self.rows} vertices, got {self.vertices.shape[0]}"
            )

    @property
    def num_vertices(self) -> int:
        return self.cols * self.rows

    def index(self, col: int, row: int) -> int:
        return row * self.cols + col

    def grid(self) -> np.ndarray:
        """Vertices as a (rows, cols, 2) view."""
        return self.vertices.reshape(self.rows, self.cols, 2)

    def copy(self) -> Mesh:
        return Mesh(self.cols, self.rows, self.vertices.copy())


def focal_from_dfov(dfov_deg: float, width_px: int, height_px: int) -> float:
    """Focal length in pixels for a diagonal field of view in degrees."""
    if not 0.0 < dfov_deg < 180.0:
        raise ValueError(f"diagonal FOV must lie in (0, 180) degrees, got {dfov_deg}")
    diag = math.hypot(width_px, height_px)
    return diag / (2.0 * math.tan(math.radians(dfov_deg) / 2.0))


def dfov_from_focal(focal_px: float, width_px: int, height_px: int) -> float:
    """Inverse of :func:`focal_from_dfov`."""
    if focal_px <= 0:
        raise ValueError(f"focal length must be positive, got {focal_px}")
    diag = math.hypot(width_px, height_px)
    return math.degrees(2.0 * math.atan(diag / (2.0 * focal_px)))


def uniform_mesh(intrinsics: CameraIntrinsics, cols: int = DEFAULT_GRID[0],
                 rows: int = DEFAULT_GRID[1]) -> Mesh:
    """Axis-aligned grid spanning [0, W] x [0, H] with the boundary on the frame edges."""
    if cols < 2 or rows < 2:
        raise ValueError(f"mesh needs at least 2x2 vertices, got {cols}x{rows}")
    W, H = intrinsics.width_px, intrinsics.height_px
    xs = np.arange(cols) * (W / (cols - 1))
    ys = np.arange(rows) * (H / (rows - 1))
    # exact frame edges regardless of rounding in the products above
    xs[-1], ys[-1] = W, H
    gx, gy = np.meshgrid(xs, ys)
    return Mesh(cols, rows, np.stack([gx.ravel(), gy.ravel()], axis=1))


def _stereo_r0(intrinsics: CameraIntrinsics) -> float:
    half_d = intrinsics.d / 2.0
    return half_d / math.tan(0.5 * math.atan(half_d / intrinsics.focal_px))


def stereographic_radius(r_p, intrinsics: CameraIntrinsics):
    """Radial distance after the stereographic remapping, for perspective radius r_p."""
    r0 = _stereo_r0(intrinsics)
    return r0 * np.tan(0.5 * np.arctan(np.asarray(r_p, dtype=np.float64) / intrinsics.focal_px))


def stereographic_point(x_p, y_p, intrinsics: CameraIntrinsics):
    """Map perspective pixel coordinates to stereographic ones about the image center.

    Accepts scalars or arrays. The center is a fixed point, as is every point
    at radius d/2.
    """
    cx, cy = intrinsics.center
    dx = np.asarray(x_p, dtype=np.float64) - cx
    dy = np.asarray(y_p, dtype=np.float64) - cy
    r_p = np.hypot(dx, dy)
    r0 = _stereo_r0(intrinsics)
    f = intrinsics.focal_px
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(r_p > 0.0,
                         r0 * np.tan(0.5 * np.arctan(r_p / f)) / np.where(r_p > 0.0, r_p, 1.0),
                         r0 / (2.0 * f))
    x_u = ratio * dx + cx
    y_u = ratio * dy + cy
    if np.ndim(x_u) == 0:
        return float(x_u), float(y_u)
    return x_u, y_u


def stereographic_mesh(intrinsics: CameraIntrinsics, cols: int = DEFAULT_GRID[0],
                       rows: int = DEFAULT_GRID[1]) -> Mesh:
    """Uniform mesh with every vertex pushed through :func:`stereographic_point`."""
    src = uniform_mesh(intrinsics, cols, rows)
    x_u, y_u = stereographic_point(src.vertices[:, 0], src.vertices[:, 1], intrinsics)
    return Mesh(cols, rows, np.stack([x_u, y_u], axis=1))
