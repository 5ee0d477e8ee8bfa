"""Single-image head avatars from symmetric point clouds and 3D Gaussians."""

from .core import (
    Camera, ExpressionCoeffs, GeomImage, GridPointCloud, ImageKind, Quaternion, project, unproject,
    yaw_camera,
)
from .errors import BehindCameraError, InvalidInputError, NumericalError, SplatHeadError
from .gaussians import GaussianCloud, Provenance, covariance, densify, eval_color
from .renderer import render, render_reference

__version__ = "0.1.0"

__all__ = [
    "Camera", "ExpressionCoeffs", "GeomImage", "GridPointCloud", "ImageKind", "Quaternion",
    "project", "unproject", "yaw_camera", "BehindCameraError", "InvalidInputError",
    "NumericalError", "SplatHeadError", "GaussianCloud", "Provenance", "covariance", "densify",
    "eval_color", "render", "render_reference",
]
