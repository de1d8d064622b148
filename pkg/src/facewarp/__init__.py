"""Temporally coherent correction of wide-angle face distortion in video.

The pipeline builds one warping mesh per frame by minimizing a quadratic
spatial-temporal energy (face, smoothness, edge-bending, boundary,
temporal, coherent-embedding and line-preservation terms) as a single
sparse linear least-squares problem, then renders the warped frames.
"""

from facewarp.camera import (
    CameraIntrinsics,
    Mesh,
    focal_from_dfov,
    stereographic_mesh,
    stereographic_point,
    uniform_mesh,
)
from facewarp.energy import EnergyWeights

__all__ = [
    "CameraIntrinsics",
    "EnergyWeights",
    "Mesh",
    "focal_from_dfov",
    "stereographic_mesh",
    "stereographic_point",
    "uniform_mesh",
]

__version__ = "0.1.0"
