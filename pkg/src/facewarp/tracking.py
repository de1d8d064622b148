"""Pyramidal Lucas-Kanade tracking of line-segment endpoints.

Coordinates use the pixel-edge convention of the warping mesh: pixel (i, j)
covers [j, j+1) x [i, i+1), so its center is at (j + 0.5, i + 0.5) and a
point scales by exactly 1/2 from one pyramid level to the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PYRAMID_LEVELS = 3
WINDOW = 21
MAX_ITERATIONS = 30
EPSILON = 0.01
MIN_EIGENVALUE = 1e-4
FB_THRESHOLD = 2.0
MAX_ORIENTATION_CHANGE = 1.0

_LOWPASS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an 8-bit RGB image, in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        return rgb.astype(np.float64) / 255.0
    rgb = rgb[..., :3].astype(np.float64)
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]) / 255.0


def _gradients(img):
    # central differences, replicate border
    padded = np.pad(img, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gx, gy


@dataclass
class ImagePyramid:
    levels: list[np.ndarray]
    _grads: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.levels)

    def gradients(self, level: int):
        if level not in self._grads:
            self._grads[level] = _gradients(self.levels[level])
        return self._grads[level]


def build_pyramid(image: np.ndarray, levels: int = PYRAMID_LEVELS) -> ImagePyramid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {image.shape}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    need = 2 ** (levels - 1)
    if min(image.shape) < need:
        raise ValueError(f"image {image.shape[1]}x{image.shape[0]} too small for "
                         f"{levels} pyramid levels (need {need} px per side)")
    out = [image]
    for _ in range(levels - 1):
        blurred = ndimage.correlate1d(out[-1], _LOWPASS, axis=0, mode="nearest")
        blurred = ndimage.correlate1d(blurred, _LOWPASS, axis=1, mode="nearest")
        out.append(blurred[::2, ::2])
    return ImagePyramid(out)


def _sample(img, xs, ys):
    # continuous pixel-edge coordinates -> array index space
    return ndimage.map_coordinates(img, [ys - 0.5, xs - 0.5], order=1, mode="nearest")


def lk_track_points(pyr_prev: ImagePyramid, pyr_next: ImagePyramid, points,
                    window: int = WINDOW, max_iter: int = MAX_ITERATIONS,
                    epsilon: float = EPSILON, min_eig: float = MIN_EIGENVALUE):
    """Track several points from ``pyr_prev`` to ``pyr_next``.

    Returns ``(tracked, ok)``: an (n, 2) array and a boolean mask. Failed
    points keep NaN coordinates.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    nlev = min(len(pyr_prev), len(pyr_next))
    half = window // 2
    oy, ox = np.mgrid[-half:half + 1, -half:half + 1]
    ox, oy = ox.ravel().astype(np.float64), oy.ravel().astype(np.float64)

    guess = np.zeros((n, 2))
    ok = np.ones(n, dtype=bool)
    for level in range(nlev - 1, -1, -1):
        scale = 2.0 ** level
        prev, nxt = pyr_prev.levels[level], pyr_next.levels[level]
        h, w = prev.shape
        gx, gy = pyr_prev.gradients(level)
        p = pts / scale
        wx = (p[:, 0:1] + ox).ravel()
        wy = (p[:, 1:2] + oy).ravel()
        tmpl = _sample(prev, wx, wy).reshape(n, -1)
        ix = _sample(gx, wx, wy).reshape(n, -1)
        iy = _sample(gy, wx, wy).reshape(n, -1)
        gxx, gxy, gyy = (ix * ix).sum(1), (ix * iy).sum(1), (iy * iy).sum(1)
        # structure tensor summed over the window (not averaged)
        tr, det = gxx + gyy, gxx * gyy - gxy * gxy
        lam_min = tr / 2 - np.sqrt(np.maximum(tr * tr / 4 - det, 0.0))
        ok &= lam_min >= min_eig
        det_full = np.where(ok, gxx * gyy - gxy * gxy, 1.0)

        nu = np.zeros((n, 2))
        active = ok.copy()
        for _ in range(max_iter):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            q = p[idx] + guess[idx] + nu[idx]
            jw = _sample(nxt, (q[:, 0:1] + ox).ravel(), (q[:, 1:2] + oy).ravel())
            diff = tmpl[idx] - jw.reshape(len(idx), -1)
            bx, by = (diff * ix[idx]).sum(1), (diff * iy[idx]).sum(1)
            dx = (gyy[idx] * bx - gxy[idx] * by) / det_full[idx]
            dy = (gxx[idx] * by - gxy[idx] * bx) / det_full[idx]
            nu[idx, 0] += dx
            nu[idx, 1] += dy
            done = np.hypot(dx, dy) < epsilon
            active[idx[done]] = False
        cur = p + guess + nu
        ok &= (cur[:, 0] >= 0) & (cur[:, 0] <= w) & (cur[:, 1] >= 0) & (cur[:, 1] <= h)
        ok &= np.isfinite(cur).all(axis=1)
        guess = np.where(ok[:, None], guess + nu, 0.0)
        if level > 0:
            guess *= 2.0

    tracked = pts + guess
    tracked[~ok] = np.nan
    return tracked, ok


def lk_track_point(pyr_prev: ImagePyramid, pyr_next: ImagePyramid, p):
    """Track one point; returns its new position or ``None`` on failure."""
    tracked, ok = lk_track_points(pyr_prev, pyr_next, [p])
    if not ok[0]:
        return None
    return float(tracked[0, 0]), float(tracked[0, 1])


def orientation_deg(p0, p1) -> float:
    """Undirected segment orientation in [0, 180)."""
    ang = math.degrees(math.atan2(p1[1] - p0[1], p1[0] - p0[0])) % 180.0
    return 0.0 if ang >= 180.0 else ang


def orientation_change(seg_a, seg_b) -> float:
    delta = abs(orientation_deg(*seg_a) - orientation_deg(*seg_b)) % 180.0
    return min(delta, 180.0 - delta)


@dataclass
class LineTrack:
    """Endpoints of one background line over its alive range of frames."""

    track_id: int
    start: int
    endpoints: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    end_reason: str = "video_end"

    @property
    def end(self) -> int:
        """Last frame (inclusive) on which the track is alive."""
        return self.start + len(self.endpoints) - 1

    def alive_at(self, frame: int) -> bool:
        return self.start <= frame <= self.end

    def segment(self, frame: int):
        return self.endpoints[frame - self.start]


def track_lines(frames, seed_lines, levels: int = PYRAMID_LEVELS,
                fb_threshold: float = FB_THRESHOLD,
                max_orientation_change: float = MAX_ORIENTATION_CHANGE) -> list[LineTrack]:
    """Track seed segments through a frame sequence.

    ``frames`` is a sequence of RGB or grayscale images; ``seed_lines`` holds
    ``(track_id, first_frame, p0, p1)`` tuples. A track ends when either
    endpoint fails tracking, fails the forward-backward check, or the segment
    turns by more than ``max_orientation_change`` degrees between adjacent
    frames. Terminated tracks are not re-acquired.
    """
    tracks = []
    for tid, first, p0, p1 in seed_lines:
        tr = LineTrack(int(tid), int(first))
        tr.endpoints.append((np.asarray(p0, dtype=np.float64), np.asarray(p1, dtype=np.float64)))
        tracks.append(tr)
    if not tracks:
        return tracks

    live = set()
    prev_pyr = None
    for n in range(len(frames)):
        pyr = build_pyramid(to_grayscale(frames[n]), levels)
        h, w = pyr.levels[0].shape
        if prev_pyr is not None and live:
            order = sorted(live)
            pts = np.array([e for i in order for e in tracks[i].endpoints[-1]])
            fwd, ok_f = lk_track_points(prev_pyr, pyr, pts)
            back, ok_b = lk_track_points(pyr, prev_pyr, np.where(ok_f[:, None], fwd, pts))
            fb_err = np.hypot(*(back - pts).T)
            for k, i in enumerate(order):
                tr = tracks[i]
                sl = slice(2 * k, 2 * k + 2)
                if not ok_f[sl].all():
                    reason = "lost"
                elif not ok_b[sl].all() or not (fb_err[sl] <= fb_threshold).all():
                    reason = "forward_backward"
                else:
                    a, b = fwd[2 * k], fwd[2 * k + 1]
                    inside = all(0 <= q[0] <= w and 0 <= q[1] <= h for q in (a, b))
                    if not inside:
                        reason = "left_frame"
                    elif orientation_change(tr.endpoints[-1], (a, b)) > max_orientation_change:
                        reason = "orientation"
                    else:
                        tr.endpoints.append((a, b))
                        continue
                tr.end_reason = reason
                live.discard(i)
        for i, tr in enumerate(tracks):
            if tr.start == n:
                live.add(i)
        prev_pyr = pyr
    return tracks
