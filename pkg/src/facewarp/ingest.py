"""Annotation loading and per-frame construction of face and line data.

Face detections and subject masks come from external tools and are read
from a JSON annotation file. This module turns them into the fixed data the
energy needs: face vertex sets and weights, and for every tracked line the
quads it crosses together with the bilinear coefficients of its endpoints
inside each quad.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from facewarp.camera import CameraIntrinsics, Mesh, focal_from_dfov

MASK_THRESHOLD = 128
MIN_CROSSING_LENGTH = 0.25


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation file."""


@dataclass
class FaceRecord:
    track_id: int
    bbox: tuple[float, float, float, float]
    mask: str | None = None


@dataclass
class LineRecord:
    track_id: int
    p0: tuple[float, float]
    p1: tuple[float, float]


@dataclass
class FrameAnnotation:
    index: int
    faces: list[FaceRecord] = field(default_factory=list)
    lines: list[LineRecord] = field(default_factory=list)


@dataclass
class VideoAnnotations:
    cameras: list[CameraIntrinsics]
    frames: list[FrameAnnotation]
    base_dir: Path = Path(".")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def mask_path(self, face: FaceRecord) -> Path | None:
        if face.mask is None:
            return None
        return self.base_dir / face.mask


@dataclass
class FaceInstance:
    """One face in one frame, with its fixed vertex set and weight.

    The slot of its (a, b, tx, ty) latent block is owned by the unknown layout.
    """

    track_id: int
    bbox: tuple[float, float, float, float]
    vertex_set: np.ndarray
    weight: float
    mask_ref: str | None = None


@dataclass
class Crossing:
    """Piece of a line segment inside one source quad.

    ``corners`` are the vertex indices (top-left, top-right, bottom-right,
    bottom-left); ``coeffs`` is w_b - w_a over those corners, so that the
    source piece is ``corners_xy.T @ coeffs``.
    """

    track_id: int
    quad: tuple[int, int]
    corners: np.ndarray
    coeffs: np.ndarray
    direction: np.ndarray
    normal: np.ndarray
    a: np.ndarray
    b: np.ndarray


def _camera_from_block(block: dict, width: int, height: int, where: str) -> CameraIntrinsics:
    if "focal_px" in block:
        focal = float(block["focal_px"])
    elif "dfov_deg" in block:
        focal = focal_from_dfov(float(block["dfov_deg"]), width, height)
    else:
        raise AnnotationError(f"{where}: camera needs 'focal_px' or 'dfov_deg'")
    return CameraIntrinsics(width, height, focal)


def parse_annotations(doc: dict, base_dir: Path | str = ".") -> VideoAnnotations:
    """Validate an annotation document already decoded from JSON."""
    if not isinstance(doc, dict) or "camera" not in doc:
        raise AnnotationError("missing 'camera' block")
    cam = doc["camera"]
    try:
        width, height = int(cam["width"]), int(cam["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"camera block needs integer 'width' and 'height': {exc}") from None
    try:
        default_cam = _camera_from_block(cam, width, height, "camera")
    except ValueError as exc:
        raise AnnotationError(str(exc)) from None

    raw_frames = doc.get("frames")
    if not isinstance(raw_frames, list) or not raw_frames:
        raise AnnotationError("'frames' must be a non-empty list")

    frames = []
    for pos, raw in enumerate(raw_frames):
        index = raw.get("index", pos)
        if index != pos:
            raise AnnotationError(f"frame {index}: frame indices must be contiguous from 0 "
                                  f"(expected {pos})")
        faces, lines = [], []
        seen_faces, seen_lines = set(), set()
        for rec in raw.get("faces", []):
            tid = int(rec["track_id"])
            if tid in seen_faces:
                raise AnnotationError(f"frame {index}: duplicate face track_id {tid}")
            seen_faces.add(tid)
            bbox = tuple(float(v) for v in rec["bbox"])
            if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
                raise AnnotationError(f"frame {index}: face {tid} bbox must be [x, y, w, h] "
                                      "with positive size")
            faces.append(FaceRecord(tid, bbox, rec.get("mask")))
        for rec in raw.get("lines", []):
            tid = int(rec["track_id"])
            if tid in seen_lines:
                raise AnnotationError(f"frame {index}: duplicate line track_id {tid}")
            seen_lines.add(tid)
            p0 = tuple(float(v) for v in rec["p0"])
            p1 = tuple(float(v) for v in rec["p1"])
            lines.append(LineRecord(tid, p0, p1))
        frames.append(FrameAnnotation(index, faces, lines))

    cameras = [default_cam] * len(frames)
    for rec in cam.get("per_frame", []) or []:
        idx = int(rec["index"])
        if not 0 <= idx < len(frames):
            raise AnnotationError(f"frame {idx}: per-frame camera entry out of range")
        try:
            cameras[idx] = _camera_from_block(rec, width, height, f"frame {idx}")
        except ValueError as exc:
            raise AnnotationError(f"frame {idx}: {exc}") from None

    return VideoAnnotations(cameras, frames, Path(base_dir))


def load_annotations(path) -> VideoAnnotations:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_annotations(doc, path.parent)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def expanded_bbox(bbox, width: float, height: float):
    """Bounding box scaled by two about its center and clipped to the frame."""
    x, y, w, h = bbox
    cx, cy = x + w / 2.0, y + h / 2.0
    x0, x1 = max(cx - w, 0.0), min(cx + w, float(width))
    y0, y1 = max(cy - h, 0.0), min(cy + h, float(height))
    return x0, y0, x1, y1


def face_vertex_set(face_bbox, mask: np.ndarray | None, source_mesh: Mesh,
                    width: int | None = None, height: int | None = None) -> np.ndarray:
    """Indices of source vertices inside the doubled bbox and on the subject mask.

    ``mask`` is an 8-bit (H, W) image; ``None`` means the whole frame is subject.
    """
    if mask is not None:
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise ValueError(f"mask must be single channel, got shape {mask.shape}")
        mh, mw = mask.shape
        if (width is not None and mw != width) or (height is not None and mh != height):
            raise ValueError(f"mask is {mw}x{mh}, frame is {width}x{height}")
        width, height = mw, mh
    if width is None or height is None:
        raise ValueError("frame size required when no mask is given")

    x0, y0, x1, y1 = expanded_bbox(face_bbox, width, height)
    p = source_mesh.vertices
    inside = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
    if mask is not None:
        px = np.clip(np.floor(p[:, 0]).astype(int), 0, width - 1)
        py = np.clip(np.floor(p[:, 1]).astype(int), 0, height - 1)
        inside &= mask[py, px] >= MASK_THRESHOLD
    return np.flatnonzero(inside)


def face_weight(bbox_center, width: float, height: float) -> float:
    """tanh(2 r_k / r_max): zero at the image center, tanh(2) at a corner."""
    cx, cy = width / 2.0, height / 2.0
    r_k = math.hypot(bbox_center[0] - cx, bbox_center[1] - cy)
    r_max = math.hypot(cx, cy)
    return math.tanh(2.0 * r_k / r_max)


def _clip_to_rect(p0, p1, x0, y0, x1, y1):
    """Liang-Barsky: parameter interval of p0 + t (p1 - p0) inside the rectangle."""
    d = p1 - p0
    t_lo, t_hi = 0.0, 1.0
    for delta, lo, hi, start in ((d[0], x0, x1, p0[0]), (d[1], y0, y1, p0[1])):
        if abs(delta) < 1e-12:
            if start < lo or start > hi:
                return None
            continue
        ta, tb = (lo - start) / delta, (hi - start) / delta
        if ta > tb:
            ta, tb = tb, ta
        t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
    if t_lo > t_hi:
        return None
    return t_lo, t_hi


def _cell_index(value: float, edges: np.ndarray) -> int:
    k = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(k, 0), len(edges) - 2)


def bilinear_weights(point, quad_min, quad_max) -> np.ndarray:
    """Bilinear weights of ``point`` in an axis-aligned quad, corner order TL, TR, BR, BL."""
    u = (point[0] - quad_min[0]) / (quad_max[0] - quad_min[0])
    t = (point[1] - quad_min[1]) / (quad_max[1] - quad_min[1])
    return np.array([(1 - u) * (1 - t), u * (1 - t), u * t, (1 - u) * t])


def line_quad_crossings(segment, source_mesh: Mesh, face_vertex_sets=(),
                        track_id: int = -1,
                        min_length: float = MIN_CROSSING_LENGTH) -> list[Crossing]:
    """Split a segment into per-quad pieces of the (axis-aligned) source grid.

    Pieces shorter than ``min_length`` and pieces in quads touching any face
    vertex are dropped.
    """
    p0 = np.asarray(segment[0], dtype=np.float64)
    p1 = np.asarray(segment[1], dtype=np.float64)
    grid = source_mesh.grid()
    xs, ys = grid[0, :, 0], grid[:, 0, 1]
    clipped = _clip_to_rect(p0, p1, xs[0], ys[0], xs[-1], ys[-1])
    if clipped is None or np.allclose(p0, p1):
        return []
    t_lo, t_hi = clipped
    d = p1 - p0

    ts = [t_lo, t_hi]
    for delta, start, edges in ((d[0], p0[0], xs), (d[1], p0[1], ys)):
        if abs(delta) >= 1e-12:
            cand = (edges - start) / delta
            ts.extend(cand[(cand > t_lo) & (cand < t_hi)])
    ts = np.unique(ts)

    blocked = np.zeros(source_mesh.num_vertices, dtype=bool)
    for vs in face_vertex_sets:
        blocked[np.asarray(vs, dtype=int)] = True

    out = []
    cols = source_mesh.cols
    for ta, tb in zip(ts[:-1], ts[1:]):
        a, b = p0 + ta * d, p0 + tb * d
        piece = b - a
        length = math.hypot(piece[0], piece[1])
        if length < min_length:
            continue
        mid = 0.5 * (a + b)
        c, r = _cell_index(mid[0], xs), _cell_index(mid[1], ys)
        corners = np.array([r * cols + c, r * cols + c + 1,
                            (r + 1) * cols + c + 1, (r + 1) * cols + c])
        if blocked[corners].any():
            continue
        qmin, qmax = (xs[c], ys[r]), (xs[c + 1], ys[r + 1])
        coeffs = bilinear_weights(b, qmin, qmax) - bilinear_weights(a, qmin, qmax)
        direction = source_mesh.vertices[corners].T @ coeffs
        unit = direction / np.linalg.norm(direction)
        out.append(Crossing(track_id, (c, r), corners, coeffs, direction,
                            np.array([-unit[1], unit[0]]), a, b))
    return out


@dataclass
class FrameScene:
    """Everything the energy needs about one frame."""

    intrinsics: CameraIntrinsics
    source: Mesh
    target: Mesh
    faces: list[FaceInstance] = field(default_factory=list)
    crossings: list[Crossing] = field(default_factory=list)
    dropped_faces: list[int] = field(default_factory=list)


def build_frame_scene(intrinsics: CameraIntrinsics, faces, segments, cols: int, rows: int,
                      masks=None) -> FrameScene:
    """Construct one frame's faces and line crossings.

    ``faces`` are :class:`FaceRecord`; ``masks`` maps track_id to an 8-bit mask
    array (missing entries mean no mask, i.e. bbox only). ``segments`` are
    ``(track_id, p0, p1)`` tuples. Faces with an empty vertex set are dropped
    for this frame and listed in ``dropped_faces``.
    """
    from facewarp.camera import stereographic_mesh, uniform_mesh

    masks = masks or {}
    W, H = intrinsics.width_px, intrinsics.height_px
    source = uniform_mesh(intrinsics, cols, rows)
    target = stereographic_mesh(intrinsics, cols, rows)
    scene = FrameScene(intrinsics, source, target)
    for rec in faces:
        vs = face_vertex_set(rec.bbox, masks.get(rec.track_id), source, W, H)
        if len(vs) == 0:
            scene.dropped_faces.append(rec.track_id)
            continue
        x, y, w, h = rec.bbox
        weight = face_weight((x + w / 2.0, y + h / 2.0), W, H)
        scene.faces.append(FaceInstance(rec.track_id, rec.bbox, vs, weight, rec.mask))
    vertex_sets = [f.vertex_set for f in scene.faces]
    for tid, p0, p1 in segments:
        scene.crossings.extend(line_quad_crossings((p0, p1), source, vertex_sets, tid))
    return scene
