"""Forward-mesh rendering by per-triangle affine inverse mapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from facewarp.camera import Mesh


@dataclass
class WarpField:
    source: Mesh
    destination: Mesh

    def __post_init__(self):
        if (self.source.cols, self.source.rows) != (self.destination.cols, self.destination.rows):
            raise ValueError("source and destination meshes differ in size")
        if not np.isfinite(self.destination.vertices).all():
            raise ValueError("destination mesh has non-finite vertices")


@dataclass
class RenderStats:
    fold_overs: int
    uncovered_pixels: int


def _triangles(cols: int, rows: int) -> np.ndarray:
    """Vertex index triples; each quad is split along its TL-BR diagonal."""
    idx = np.arange(cols * rows).reshape(rows, cols)
    tl, tr = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    bl, br = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    upper = np.stack([tl, tr, br], axis=1)
    lower = np.stack([tl, br, bl], axis=1)
    return np.stack([upper, lower], axis=1).reshape(-1, 3)


def _signed_area(p):
    return 0.5 * ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                  - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))


def inverse_map(warp: WarpField, width: int, height: int):
    """Source coordinates for every output pixel center.

    Returns ``(map_x, map_y, covered, fold_overs)``. Pixels covered by no
    destination triangle take the mapping of the nearest covered pixel.
    """
    src, dst = warp.source.vertices, warp.destination.vertices
    map_x = np.zeros((height, width))
    map_y = np.zeros((height, width))
    covered = np.zeros((height, width), dtype=bool)
    fold_overs = 0
    eps = 1e-9
    for tri in _triangles(warp.source.cols, warp.source.rows):
        d, s = dst[tri], src[tri]
        area = _signed_area(d)
        if area * _signed_area(s) < 0:
            fold_overs += 1
        if abs(area) < 1e-12:
            continue
        x0 = max(int(np.floor(d[:, 0].min() - 0.5)), 0)
        x1 = min(int(np.ceil(d[:, 0].max() - 0.5)), width - 1)
        y0 = max(int(np.floor(d[:, 1].min() - 0.5)), 0)
        y1 = min(int(np.ceil(d[:, 1].max() - 0.5)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        cx, cy = px + 0.5, py + 0.5
        # barycentric coordinates in the destination triangle
        l1 = ((d[2, 1] - d[0, 1]) * (cx - d[0, 0]) - (d[2, 0] - d[0, 0]) * (cy - d[0, 1])) \
            / (2 * area)
        l2 = ((d[1, 0] - d[0, 0]) * (cy - d[0, 1]) - (d[1, 1] - d[0, 1]) * (cx - d[0, 0])) \
            / (2 * area)
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
        if not inside.any():
            continue
        sx = l0 * s[0, 0] + l1 * s[1, 0] + l2 * s[2, 0]
        sy = l0 * s[0, 1] + l1 * s[1, 1] + l2 * s[2, 1]
        ys, xs = py[inside], px[inside]
        map_x[ys, xs] = sx[inside]
        map_y[ys, xs] = sy[inside]
        covered[ys, xs] = True

    if not covered.all() and covered.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~covered, return_indices=True)
        map_x, map_y = map_x[iy, ix], map_y[iy, ix]
    return map_x, map_y, covered, fold_overs


def sample_bilinear(image: np.ndarray, map_x, map_y) -> np.ndarray:
    """Bilinear lookup at continuous pixel-edge coordinates, border clamped."""
    coords = [map_y - 0.5, map_x - 0.5]
    img = np.asarray(image)
    if img.ndim == 2:
        out = ndimage.map_coordinates(img.astype(np.float64), coords, order=1, mode="nearest")
    else:
        out = np.stack([ndimage.map_coordinates(img[..., c].astype(np.float64), coords,
                                                order=1, mode="nearest")
                        for c in range(img.shape[2])], axis=-1)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(img.dtype)
    return out.astype(img.dtype)


def render_frame(src_image: np.ndarray, warp: WarpField) -> tuple[np.ndarray, RenderStats]:
    """Warp ``src_image`` so each source vertex lands on its destination vertex."""
    height, width = src_image.shape[:2]
    grid = warp.source.grid()
    if not np.allclose([grid[-1, -1, 0], grid[-1, -1, 1]], [width, height]):
        raise ValueError(f"image is {width}x{height} but the mesh spans "
                         f"{grid[-1, -1, 0]:g}x{grid[-1, -1, 1]:g}")
    map_x, map_y, covered, folds = inverse_map(warp, width, height)
    out = sample_bilinear(src_image, map_x, map_y)
    return out, RenderStats(folds, int((~covered).sum()))
