"""Sparse least-squares solve and the full-volume / sequential schedules."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsmr

from facewarp.camera import Mesh
from facewarp.energy import (EnergyWeights, SparseLsqSystem, UnknownLayout, anchor_rows,
                             build_system, energy_value, frame_spatial_rows, initial_guess,
                             stack_rows)

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


@dataclass
class SolveInfo:
    iterations: int
    gradient_norm: float
    converged: bool


@dataclass
class SolveReport:
    iterations: int
    relative_gradient: float
    converged: bool
    timings_ms: dict = field(default_factory=dict)
    energies: dict = field(default_factory=dict)
    initial_energies: dict = field(default_factory=dict)


@dataclass
class Solution:
    meshes: list[Mesh]
    latents: list[dict]
    report: SolveReport
    x: np.ndarray
    system: SparseLsqSystem


def solve_lsq(system, x_init=None, tol: float = DEFAULT_TOL, max_iter: int | None = None):
    """Minimize ||A x - b|| starting from ``x_init``.

    Accepts a :class:`SparseLsqSystem` or an ``(A, b)`` pair. Runs LSMR on the
    column-scaled correction ``A D y = b - A x_init`` and restarts until
    ``||A^T (A x - b)|| <= tol ||A^T b||`` or ``max_iter`` (default ten times
    the number of unknowns) is spent. When the problem is rank deficient the
    correction with least scaled norm is returned, so unconstrained unknowns
    stay at ``x_init``.
    """
    A, b = (system.A, system.b) if isinstance(system, SparseLsqSystem) else system
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    m, n = A.shape
    if m == 0 or n == 0:
        raise ValueError("empty least-squares system")
    x = np.zeros(n) if x_init is None else np.array(x_init, dtype=np.float64)
    max_iter = 10 * n if max_iter is None else max_iter

    col_norm = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    scale = np.where(col_norm > 0, 1.0 / np.where(col_norm > 0, col_norm, 1.0), 0.0)
    AD = A @ sp.diags(scale)
    ref = np.linalg.norm(A.T @ b)
    if ref == 0.0:
        ref = 1.0

    iterations = 0
    grad = np.linalg.norm(A.T @ (A @ x - b))
    inner_tol = tol * 1e-2
    while grad > tol * ref and iterations < max_iter:
        r = b - A @ x
        res = lsmr(AD, r, atol=inner_tol, btol=inner_tol, conlim=1e12,
                   maxiter=max_iter - iterations)
        x = x + scale * res[0]
        iterations += max(int(res[2]), 1)
        new_grad = np.linalg.norm(A.T @ (A @ x - b))
        if new_grad >= grad * 0.999:
            # restart made no progress: at the attainable precision floor
            grad = new_grad
            break
        grad = new_grad
        inner_tol *= 0.1
    converged = grad <= tol * ref
    if not converged:
        log.warning("least-squares solve stopped at relative gradient %.3g after %d iterations",
                    grad / ref, iterations)
    return x, SolveInfo(iterations, grad / ref, converged)


def _meshes_and_latents(layout: UnknownLayout, scenes, x):
    meshes = [Mesh(s.source.cols, s.source.rows, layout.mesh(x, n).copy())
              for n, s in enumerate(scenes)]
    latents = [layout.latents(x, n) for n in range(layout.num_frames)]
    return meshes, latents


def optimize_full(scenes, weights: EnergyWeights | None = None, tol: float = DEFAULT_TOL,
                  max_iter: int | None = None, tikhonov: float = 0.0) -> Solution:
    """Solve all frames jointly in one least-squares problem."""
    weights = weights or EnergyWeights()
    t0 = time.perf_counter()
    system = build_system(scenes, weights, tikhonov=tikhonov)
    t1 = time.perf_counter()
    x0 = initial_guess(system.layout, scenes)
    x, info = solve_lsq(system, x0, tol, max_iter)
    t2 = time.perf_counter()
    report = SolveReport(info.iterations, info.gradient_norm, info.converged,
                         {"assembly": 1e3 * (t1 - t0), "solve": 1e3 * (t2 - t1)},
                         energy_value(system, x), energy_value(system, x0))
    meshes, latents = _meshes_and_latents(system.layout, scenes, x)
    return Solution(meshes, latents, report, x, system)


def optimize_sequential(scenes, weights: EnergyWeights | None = None, tol: float = DEFAULT_TOL,
                        max_iter: int | None = None) -> Solution:
    """Solve frame by frame, anchoring each frame to the previous solution."""
    weights = weights or EnergyWeights()
    assembly = solve = 0.0
    iterations, worst, converged = 0, 0.0, True
    parts = []
    prev_mesh = prev_lat = None
    for scene in scenes:
        t0 = time.perf_counter()
        layout = UnknownLayout.from_scenes([scene])
        blocks = frame_spatial_rows(layout, 0, scene, weights)
        if prev_mesh is not None:
            blocks.extend(anchor_rows(layout, prev_mesh, prev_lat, weights))
        system = stack_rows(blocks, layout.size, layout)
        t1 = time.perf_counter()
        x, info = solve_lsq(system, initial_guess(layout, [scene]), tol, max_iter)
        t2 = time.perf_counter()
        assembly += t1 - t0
        solve += t2 - t1
        iterations += info.iterations
        worst = max(worst, info.gradient_norm)
        converged &= info.converged
        prev_mesh, prev_lat = layout.mesh(x, 0).copy(), layout.latents(x, 0)
        parts.append(x)

    x = np.concatenate(parts)
    t0 = time.perf_counter()
    full = build_system(scenes, weights)
    assembly += time.perf_counter() - t0
    report = SolveReport(iterations, worst, converged,
                         {"assembly": 1e3 * assembly, "solve": 1e3 * solve},
                         energy_value(full, x), energy_value(full, initial_guess(full.layout, scenes)))
    meshes, latents = _meshes_and_latents(full.layout, scenes, x)
    return Solution(meshes, latents, report, x, full)
