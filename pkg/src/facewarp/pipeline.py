"""End-to-end run: ingest, track, assemble, solve, render, export."""

from __future__ import annotations

import csv
import glob
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from facewarp.camera import DEFAULT_GRID
from facewarp.energy import EnergyWeights, build_system
from facewarp.ingest import VideoAnnotations, build_frame_scene, load_annotations, load_mask
from facewarp.render import WarpField, render_frame
from facewarp.solver import Solution, optimize_full, optimize_sequential
from facewarp.tracking import LineTrack, track_lines

log = logging.getLogger(__name__)

STAGES = ("annotation_ingest", "line_tracking", "mesh_assembly", "mesh_optimization",
          "image_warping")


class PipelineError(RuntimeError):
    pass


@dataclass
class RunConfig:
    annotations: Path
    out_dir: Path
    frames: str | None = None
    mode: str = "full"
    grid: tuple[int, int] = DEFAULT_GRID
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    no_render: bool = False
    export_mesh: bool = False
    export_metrics: Path | None = None
    dump_system: Path | None = None
    track: bool = True
    threads: int = 1
    tol: float = 1e-8

    def __post_init__(self):
        if self.mode not in ("full", "sequential"):
            raise ValueError(f"mode must be 'full' or 'sequential', got {self.mode!r}")
        if self.grid[0] < 2 or self.grid[1] < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.grid[0]}x{self.grid[1]}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class RunState:
    config: RunConfig
    annotations: VideoAnnotations
    frame_paths: list[Path]
    tracks: list[LineTrack]
    scenes: list
    solution: Solution
    timings_ms: dict
    fold_overs: list[int] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)


def resolve_frames(pattern: str, count: int | None = None) -> list[Path]:
    """Expand a printf-style (``%05d``) or glob frame pattern."""
    if re.search(r"%0?\d*d", pattern):
        paths = []
        k = 0
        while count is None or k < count:
            p = Path(pattern % k)
            if not p.exists():
                break
            paths.append(p)
            k += 1
    else:
        paths = [Path(p) for p in sorted(glob.glob(pattern))]
    if not paths:
        raise PipelineError(f"no frames match {pattern!r}")
    return paths


def load_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def seed_lines(annotations: VideoAnnotations):
    """First appearance of every line track id, as tracker seeds."""
    seen, seeds = set(), []
    for fr in annotations.frames:
        for ln in fr.lines:
            if ln.track_id not in seen:
                seen.add(ln.track_id)
                seeds.append((ln.track_id, fr.index, ln.p0, ln.p1))
    return seeds


def annotated_tracks(annotations: VideoAnnotations) -> list[LineTrack]:
    """Line tracks taken verbatim from per-frame annotations (no tracking)."""
    tracks: dict[int, LineTrack] = {}
    for fr in annotations.frames:
        for ln in fr.lines:
            tr = tracks.get(ln.track_id)
            seg = (np.asarray(ln.p0, dtype=float), np.asarray(ln.p1, dtype=float))
            if tr is None:
                tracks[ln.track_id] = LineTrack(ln.track_id, fr.index, [seg])
            elif tr.end == fr.index - 1:
                tr.endpoints.append(seg)
    return list(tracks.values())


def build_scenes(annotations: VideoAnnotations, tracks, cols: int, rows: int):
    scenes = []
    for n, fr in enumerate(annotations.frames):
        cam = annotations.cameras[n]
        masks = {}
        for face in fr.faces:
            path = annotations.mask_path(face)
            if path is not None:
                masks[face.track_id] = load_mask(path)
        segs = [(tr.track_id, *tr.segment(n)) for tr in tracks if tr.alive_at(n)]
        try:
            scenes.append(build_frame_scene(cam, fr.faces, segs, cols, rows, masks))
        except ValueError as exc:
            raise PipelineError(f"frame {n}: {exc}") from None
    return scenes


def run(config: RunConfig) -> RunState:
    timings = dict.fromkeys(STAGES, 0.0)
    wall = time.perf_counter()

    t = time.perf_counter()
    ann = load_annotations(config.annotations)
    frame_paths = []
    if config.frames is not None:
        frame_paths = resolve_frames(config.frames, ann.num_frames)
        if len(frame_paths) != ann.num_frames:
            raise PipelineError(f"annotations describe {ann.num_frames} frames, "
                                f"found {len(frame_paths)} images")
    elif config.track and any(fr.lines for fr in ann.frames):
        raise PipelineError("line tracking needs --frames")
    elif not config.no_render:
        raise PipelineError("rendering needs --frames")
    timings["annotation_ingest"] += time.perf_counter() - t

    t = time.perf_counter()
    if config.track:
        seeds = seed_lines(ann)
        tracks = track_lines([load_frame(p) for p in frame_paths], seeds) if seeds else []
    else:
        tracks = annotated_tracks(ann)
    timings["line_tracking"] += time.perf_counter() - t

    t = time.perf_counter()
    cols, rows = config.grid
    scenes = build_scenes(ann, tracks, cols, rows)
    timings["mesh_assembly"] += time.perf_counter() - t

    if config.mode == "full":
        sol = optimize_full(scenes, config.weights, tol=config.tol)
    else:
        sol = optimize_sequential(scenes, config.weights, tol=config.tol)
    timings["mesh_assembly"] += sol.report.timings_ms["assembly"] / 1e3
    timings["mesh_optimization"] += sol.report.timings_ms["solve"] / 1e3

    state = RunState(config, ann, frame_paths, tracks, scenes, sol, timings)
    config.out_dir.mkdir(parents=True, exist_ok=True)

    if config.dump_system is not None:
        from facewarp.energy import dump_system
        system = sol.system if config.mode == "full" else build_system(scenes, config.weights)
        dump_system(system, config.dump_system)

    t = time.perf_counter()
    if not config.no_render:
        def one(n):
            img = load_frame(frame_paths[n])
            out, stats = render_frame(img, WarpField(scenes[n].source, sol.meshes[n]))
            dest = config.out_dir / frame_paths[n].name
            Image.fromarray(out).save(dest)
            return dest, stats.fold_overs

        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, range(len(scenes))))
        state.outputs = [r[0] for r in results]
        state.fold_overs = [r[1] for r in results]
    timings["image_warping"] += time.perf_counter() - t

    if config.export_mesh:
        export_meshes(state, config.out_dir)
    timings_ms = {k: 1e3 * v for k, v in timings.items()}
    timings_ms["total"] = 1e3 * (time.perf_counter() - wall)
    state.timings_ms = timings_ms
    if config.export_metrics is not None:
        export_metrics(state, config.export_metrics)
    return state


def export_meshes(state: RunState, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    mesh_path, latent_path = out_dir / "meshes.csv", out_dir / "latents.csv"
    try:
        with open(mesh_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "vertex_row", "vertex_col", "x", "y"])
            for n, mesh in enumerate(state.solution.meshes):
                g = mesh.grid()
                for r in range(mesh.rows):
                    for c in range(mesh.cols):
                        w.writerow([n, r, c, repr(float(g[r, c, 0])), repr(float(g[r, c, 1]))])
        with open(latent_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "track_id", "a", "b", "tx", "ty"])
            for n, lat in enumerate(state.solution.latents):
                for tid in sorted(lat):
                    w.writerow([n, tid, *(repr(float(v)) for v in lat[tid])])
    except OSError as exc:
        raise PipelineError(f"cannot write {exc.filename}: {exc.strerror}") from None
    return mesh_path, latent_path


def export_metrics(state: RunState, path) -> Path:
    path = Path(path)
    rep = state.solution.report
    metrics = {
        "mode": state.config.mode,
        "frames": len(state.scenes),
        "grid": list(state.config.grid),
        "weights": {k: v for k, v in vars(state.config.weights).items()},
        "timings_ms": state.timings_ms,
        "energies": rep.energies,
        "initial_energies": rep.initial_energies,
        "solver": {"iterations": rep.iterations, "relative_gradient": float(rep.relative_gradient),
                   "converged": bool(rep.converged)},
        "fold_overs": {"per_frame": state.fold_overs, "total": int(sum(state.fold_overs))},
        "tracks": {
            "count": len(state.tracks),
            "lines": [{"track_id": tr.track_id, "start": tr.start, "end": tr.end,
                       "end_reason": tr.end_reason} for tr in state.tracks],
        },
        "faces": {
            "instances": sum(len(s.faces) for s in state.scenes),
            "dropped": [{"frame": n, "track_id": tid}
                        for n, s in enumerate(state.scenes) for tid in s.dropped_faces],
        },
        "line_crossings": sum(len(s.crossings) for s in state.scenes),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(metrics, indent=2))
    except OSError as exc:
        raise PipelineError(f"cannot write {path}: {exc.strerror}") from None
    return path
