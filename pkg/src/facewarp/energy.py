"""Energy terms as weighted linear residual rows.

Every term of the spatial-temporal energy is quadratic in the unknowns, so
each one is emitted as rows of a sparse system ``A x - b`` already scaled by
the square root of the term weight; the total energy is ``||A x - b||^2``.

Unknown layout, per frame: 2V interleaved mesh coordinates (x0, y0, x1, ...)
followed by (a, b, tx, ty) for each face of that frame. Frames are
concatenated in order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import scipy.sparse as sp

from facewarp.ingest import FrameScene

TERMS = ("face", "smoothness", "edge_bending", "boundary", "line", "temporal",
         "coherence", "tikhonov")
_TERM_CODE = {name: k for k, name in enumerate(TERMS)}


@dataclass
class EnergyWeights:
    face: float = 4.0
    smoothness: float = 1.0
    edge_bending: float = 2.0
    boundary: float = 4.0
    line: float = 64.0
    coherence: float = 4.0
    temporal: float = 16.0
    scale_weight: float = 1.0
    target_scale: float = 1.0

    # short names used on the command line
    ALIASES = {"f": "face", "s": "smoothness", "e": "edge_bending", "b": "boundary",
               "l": "line", "c": "coherence", "t": "temporal", "ws": "scale_weight",
               "sf": "target_scale"}

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"weight {f.name} must be a nonnegative real, got {v}")

    def scaled(self, c: float) -> EnergyWeights:
        """All term weights multiplied by ``c`` (w_s and s_f are not term weights)."""
        return EnergyWeights(self.face * c, self.smoothness * c, self.edge_bending * c,
                             self.boundary * c, self.line * c, self.coherence * c,
                             self.temporal * c, self.scale_weight, self.target_scale)

    def with_overrides(self, overrides: dict) -> EnergyWeights:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, val in overrides.items():
            name = self.ALIASES.get(key, key)
            if name not in values:
                raise ValueError(f"unknown weight {key!r}")
            values[name] = float(val)
        return EnergyWeights(**values)


class UnknownLayout:
    """Column offsets of every mesh vertex and face latent block."""

    def __init__(self, num_vertices: int, faces_per_frame):
        self.num_vertices = num_vertices
        self.track_ids = [list(t) for t in faces_per_frame]
        sizes = [2 * num_vertices + 4 * len(t) for t in self.track_ids]
        self.frame_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @classmethod
    def from_scenes(cls, scenes) -> UnknownLayout:
        return cls(scenes[0].source.num_vertices, [[f.track_id for f in s.faces] for s in scenes])

    @property
    def num_frames(self) -> int:
        return len(self.track_ids)

    @property
    def size(self) -> int:
        return int(self.frame_offsets[-1])

    def vertex_col(self, n: int, i):
        """Column of the x coordinate of vertex ``i`` in frame ``n`` (y is +1)."""
        return self.frame_offsets[n] + 2 * np.asarray(i)

    def latent_col(self, n: int, k: int) -> int:
        """Column of a_k for the k-th face of frame ``n``; b, tx, ty follow."""
        return int(self.frame_offsets[n] + 2 * self.num_vertices + 4 * k)

    def latent_col_by_track(self, n: int, track_id: int):
        try:
            return self.latent_col(n, self.track_ids[n].index(track_id))
        except ValueError:
            return None

    def mesh(self, x, n: int) -> np.ndarray:
        off = self.frame_offsets[n]
        return np.asarray(x[off:off + 2 * self.num_vertices]).reshape(-1, 2)

    def latents(self, x, n: int) -> dict:
        return {tid: np.asarray(x[self.latent_col(n, k):self.latent_col(n, k) + 4])
                for k, tid in enumerate(self.track_ids[n])}


class Rows:
    """Accumulates weighted residual rows in triplet form."""

    def __init__(self, term: str):
        self.term = term
        self.r, self.c, self.v = [], [], []
        self.rhs = []
        self.count = 0

    def add(self, row_local, cols, vals, rhs):
        """Append a block of rows. ``row_local`` indexes rows within this block."""
        row_local = np.asarray(row_local, dtype=np.int64)
        self.r.append(row_local + self.count)
        self.c.append(np.asarray(cols, dtype=np.int64).ravel())
        self.v.append(np.asarray(vals, dtype=np.float64).ravel())
        rhs = np.atleast_1d(np.asarray(rhs, dtype=np.float64))
        self.rhs.append(rhs)
        self.count += len(rhs)

    def arrays(self):
        if not self.rhs:
            e = np.zeros(0)
            return e.astype(np.int64), e.astype(np.int64), e, e
        return (np.concatenate(self.r), np.concatenate(self.c),
                np.concatenate(self.v), np.concatenate(self.rhs))


def _edges(cols: int, rows: int):
    """Undirected 4-neighbor edges as (i, j) vertex index arrays."""
    idx = np.arange(cols * rows).reshape(rows, cols)
    i = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    j = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return i, j


def assemble_face_term(layout: UnknownLayout, n: int, scene: FrameScene,
                       weights: EnergyWeights) -> tuple[Rows, list[int]]:
    """Face rows of frame ``n`` and the track ids of faces that had no vertices."""
    out = Rows("face")
    empty = []
    u = scene.target.vertices
    for k, face in enumerate(scene.faces):
        col_a = layout.latent_col(n, k)
        vs = np.asarray(face.vertex_set, dtype=np.int64)
        if len(vs) == 0:
            empty.append(face.track_id)
            continue
        if face.weight > 0:
            s = math.sqrt(weights.face * face.weight)
            m = len(vs)
            vx = layout.vertex_col(n, vs)
            ux, uy = u[vs, 0], u[vs, 1]
            one = np.ones(m)
            # x row: v_x - (a u_x + b u_y + t_x)
            rx = np.repeat(2 * np.arange(m), 4)
            cx = np.stack([vx, np.full(m, col_a), np.full(m, col_a + 1),
                           np.full(m, col_a + 2)], axis=1)
            valx = s * np.stack([one, -ux, -uy, -one], axis=1)
            # y row: v_y - (-b u_x + a u_y + t_y)
            ry = rx + 1
            cy = np.stack([vx + 1, np.full(m, col_a), np.full(m, col_a + 1),
                           np.full(m, col_a + 3)], axis=1)
            valy = s * np.stack([one, -uy, ux, -one], axis=1)
            rr = np.stack([rx.reshape(m, 4), ry.reshape(m, 4)], axis=1).ravel()
            cc = np.stack([cx, cy], axis=1).ravel()
            vv = np.stack([valx, valy], axis=1).ravel()
            out.add(rr, cc, vv, np.zeros(2 * m))
        s = math.sqrt(weights.face * weights.scale_weight)
        out.add([0], [col_a], [s], [s * weights.target_scale])
    return out, empty


def assemble_spatial_smoothness(layout: UnknownLayout, n: int, cols: int, rows: int,
                                weights: EnergyWeights) -> Rows:
    out = Rows("smoothness")
    i, j = _edges(cols, rows)
    m = len(i)
    s = math.sqrt(2.0 * weights.smoothness)
    ci, cj = layout.vertex_col(n, i), layout.vertex_col(n, j)
    rr = np.repeat(np.arange(2 * m), 2)
    cc = np.stack([np.stack([ci, cj], 1), np.stack([ci + 1, cj + 1], 1)], axis=1).ravel()
    vv = np.tile([s, -s], 2 * m)
    out.add(rr, cc, vv, np.zeros(2 * m))
    return out


def assemble_edge_bending(layout: UnknownLayout, n: int, source, weights: EnergyWeights) -> Rows:
    out = Rows("edge_bending")
    i, j = _edges(source.cols, source.rows)
    m = len(i)
    e = source.vertices[i] - source.vertices[j]
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    s = math.sqrt(2.0 * weights.edge_bending)
    ci, cj = layout.vertex_col(n, i), layout.vertex_col(n, j)
    # (v_i - v_j) x e = dx * e_y - dy * e_x
    rr = np.repeat(np.arange(m), 4)
    cc = np.stack([ci, cj, ci + 1, cj + 1], axis=1).ravel()
    vv = s * np.stack([e[:, 1], -e[:, 1], -e[:, 0], e[:, 0]], axis=1).ravel()
    out.add(rr, cc, vv, np.zeros(m))
    return out


def assemble_boundary(layout: UnknownLayout, n: int, cols: int, rows: int, intrinsics,
                      weights: EnergyWeights) -> Rows:
    out = Rows("boundary")
    s = math.sqrt(weights.boundary)
    idx = np.arange(cols * rows).reshape(rows, cols)
    W, H = intrinsics.width_px, intrinsics.height_px
    for verts, axis, target in ((idx[:, 0], 0, 0.0), (idx[:, -1], 0, W),
                                (idx[0, :], 1, 0.0), (idx[-1, :], 1, H)):
        m = len(verts)
        out.add(np.arange(m), layout.vertex_col(n, verts) + axis, np.full(m, s),
                np.full(m, s * target))
    return out


def assemble_line_preservation(layout: UnknownLayout, n: int, crossings,
                               weights: EnergyWeights) -> Rows:
    """One row per crossing: the warped piece's component along the source normal."""
    out = Rows("line")
    s = math.sqrt(weights.line)
    for k, cr in enumerate(crossings):
        cc = layout.vertex_col(n, cr.corners)
        cols = np.concatenate([cc, cc + 1])
        vals = s * np.concatenate([cr.coeffs * cr.normal[0], cr.coeffs * cr.normal[1]])
        out.add(np.zeros(8, dtype=np.int64), cols, vals, [0.0])
    return out


def assemble_temporal(layout: UnknownLayout, weights: EnergyWeights) -> Rows:
    out = Rows("temporal")
    s = math.sqrt(weights.temporal)
    nv2 = 2 * layout.num_vertices
    for n in range(1, layout.num_frames):
        cur = layout.frame_offsets[n] + np.arange(nv2)
        prev = layout.frame_offsets[n - 1] + np.arange(nv2)
        out.add(np.repeat(np.arange(nv2), 2), np.stack([cur, prev], 1).ravel(),
                np.tile([s, -s], nv2), np.zeros(nv2))
    return out


def _coherence_scales(weights: EnergyWeights):
    # ||dS||_F^2 = 2 (da^2 + db^2) for S = [[a, b], [-b, a]]
    sa = math.sqrt(2.0 * weights.coherence)
    st = math.sqrt(weights.coherence)
    return np.array([sa, sa, st, st])


def assemble_coherent_embedding(layout: UnknownLayout, weights: EnergyWeights) -> Rows:
    """Latent smoothness between consecutive frames where the same track appears."""
    out = Rows("coherence")
    scales = _coherence_scales(weights)
    for n in range(1, layout.num_frames):
        for k, tid in enumerate(layout.track_ids[n]):
            prev = layout.latent_col_by_track(n - 1, tid)
            if prev is None:
                continue
            cur = layout.latent_col(n, k)
            cols = np.stack([cur + np.arange(4), prev + np.arange(4)], 1).ravel()
            vals = np.stack([scales, -scales], 1).ravel()
            out.add(np.repeat(np.arange(4), 2), cols, vals, np.zeros(4))
    return out


@dataclass
class SparseLsqSystem:
    """Weighted residual system; ``row_terms`` tags each row with its term code."""

    A: sp.csr_matrix
    b: np.ndarray
    row_terms: np.ndarray
    layout: UnknownLayout

    @property
    def shape(self):
        return self.A.shape

    def residual(self, x) -> np.ndarray:
        return self.A @ x - self.b

    def energy(self, x) -> float:
        r = self.residual(x)
        return float(r @ r)

    def term_rows(self, term: str) -> np.ndarray:
        return np.flatnonzero(self.row_terms == _TERM_CODE[term])


def stack_rows(blocks, num_cols: int, layout: UnknownLayout) -> SparseLsqSystem:
    rs, cs, vs, bs, tags = [], [], [], [], []
    offset = 0
    for blk in blocks:
        r, c, v, rhs = blk.arrays()
        rs.append(r + offset)
        cs.append(c)
        vs.append(v)
        bs.append(rhs)
        tags.append(np.full(len(rhs), _TERM_CODE[blk.term], dtype=np.int8))
        offset += len(rhs)
    A = sp.csr_matrix((np.concatenate(vs), (np.concatenate(rs), np.concatenate(cs))),
                      shape=(offset, num_cols))
    A.sum_duplicates()
    return SparseLsqSystem(A, np.concatenate(bs), np.concatenate(tags), layout)


def initial_guess(layout: UnknownLayout, scenes) -> np.ndarray:
    """Uniform source meshes with identity latents (a, b, tx, ty) = (1, 0, 0, 0)."""
    x = np.zeros(layout.size)
    for n, scene in enumerate(scenes):
        off = layout.frame_offsets[n]
        x[off:off + 2 * layout.num_vertices] = scene.source.vertices.ravel()
        for k in range(len(layout.track_ids[n])):
            x[layout.latent_col(n, k)] = 1.0
    return x


def frame_spatial_rows(layout: UnknownLayout, n: int, scene: FrameScene,
                       weights: EnergyWeights):
    src = scene.source
    face, _ = assemble_face_term(layout, n, scene, weights)
    return [face,
            assemble_spatial_smoothness(layout, n, src.cols, src.rows, weights),
            assemble_edge_bending(layout, n, src, weights),
            assemble_boundary(layout, n, src.cols, src.rows, scene.intrinsics, weights),
            assemble_line_preservation(layout, n, scene.crossings, weights)]


def build_system(scenes, weights: EnergyWeights | None = None, tikhonov: float = 0.0,
                 x_init=None) -> SparseLsqSystem:
    """Stack every term over all frames into one least-squares system.

    With ``tikhonov > 0`` rows ``sqrt(mu) (x - x_init)`` are appended.
    """
    if not scenes:
        raise ValueError("cannot build a system for an empty video")
    weights = weights or EnergyWeights()
    layout = UnknownLayout.from_scenes(scenes)
    blocks = []
    for n, scene in enumerate(scenes):
        blocks.extend(frame_spatial_rows(layout, n, scene, weights))
    blocks.append(assemble_temporal(layout, weights))
    blocks.append(assemble_coherent_embedding(layout, weights))
    if tikhonov > 0:
        blocks.append(tikhonov_rows(layout.size, tikhonov,
                                    initial_guess(layout, scenes) if x_init is None else x_init))
    return stack_rows(blocks, layout.size, layout)


def tikhonov_rows(size: int, mu: float, x_init) -> Rows:
    out = Rows("tikhonov")
    s = math.sqrt(mu)
    out.add(np.arange(size), np.arange(size), np.full(size, s), s * np.asarray(x_init))
    return out


def energy_value(system: SparseLsqSystem, x) -> dict:
    """Per-term weighted energies at ``x``; ``total`` excludes the Tikhonov anchor."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (system.A.shape[1],):
        raise ValueError(f"x has length {x.size}, system has {system.A.shape[1]} unknowns")
    r = system.residual(x)
    per = np.bincount(system.row_terms.astype(np.int64), weights=r * r, minlength=len(TERMS))
    out = {name: float(per[k]) for k, name in enumerate(TERMS) if name != "tikhonov"}
    out["total"] = float(sum(out.values()))
    return out


def dump_system(system: SparseLsqSystem, path) -> None:
    """Write A as ``row col value`` triplets followed by the rhs as ``row value``."""
    A = system.A.tocoo()
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write(f"# A {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for k in order:
            fh.write(f"{A.row[k]} {A.col[k]} {float(A.data[k])!r}\n")
        fh.write(f"# b {len(system.b)}\n")
        for k, v in enumerate(system.b):
            fh.write(f"{k} {float(v)!r}\n")


def anchor_rows(layout: UnknownLayout, prev_mesh: np.ndarray, prev_latents: dict,
                weights: EnergyWeights) -> list[Rows]:
    """Rows tying a single-frame layout to an already solved previous frame.

    Mesh rows use the temporal weight; latent rows use the coherence weights
    for every face whose track was present in the previous frame.
    """
    temporal = Rows("temporal")
    s = math.sqrt(weights.temporal)
    nv2 = 2 * layout.num_vertices
    temporal.add(np.arange(nv2), layout.frame_offsets[0] + np.arange(nv2), np.full(nv2, s),
                 s * np.asarray(prev_mesh, dtype=np.float64).ravel())
    coherence = Rows("coherence")
    scales = _coherence_scales(weights)
    for k, tid in enumerate(layout.track_ids[0]):
        if tid in prev_latents:
            coherence.add(np.arange(4), layout.latent_col(0, k) + np.arange(4), scales,
                          scales * np.asarray(prev_latents[tid]))
    return [temporal, coherence]
