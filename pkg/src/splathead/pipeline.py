"""End-to-end orchestration: images -> point clouds -> Gaussians -> renders.

Stages, each optional network residual and zero at initialization:

1. normal integration and back-projection (``P_c``), optional refinement (``P_f``)
2. mirror completion with the voxel filter (``P_f_sym``)
3. expression deformation of both clouds (``P_d``, ``P_d_sym``)
4. visible and symmetric Gaussian decoding, then densification at render time
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import Camera, ExpressionCoeffs, GeomImage, GridPointCloud, project, unproject
from .errors import InvalidInputError
from .gaussians import SH_C0, GaussianCloud, concat, densify, logit
from .regressors import (
    COLOR, DECODE_OUT, OPACITY, SCALE, RegressorBundle, decode_symmetric, decode_visible, deform,
    identity_features, refine_geometry,
)
from .surface_recon import BiniConfig, reconstruct
from .symmetry import FilterReport, VoxelFilterConfig, median_spacing, symmetric_complete

logger = logging.getLogger(__name__)


@dataclass
class ViewBundle:
    camera: Camera
    color: GeomImage
    depth: GeomImage
    normal: GeomImage
    mask: GeomImage


@dataclass
class Geometry:
    P_f: GridPointCloud
    P_d: GridPointCloud
    P_ds: GridPointCloud | None
    report: FilterReport | None


@dataclass
class PipelineResult:
    cloud: GaussianCloud  # visible plus symmetric Gaussians, before densification
    geometry: Geometry
    features: GeomImage
    prior: np.ndarray


def source_prior(P_d: GridPointCloud, color: GeomImage, opacity: float = 0.95,
                 scale_factor: float = 1.0) -> np.ndarray:
    """Decoder prior ``(N, 20)``: isotropic scale from point spacing, a fixed
    opacity and the DC color of each cell's source pixel."""
    n = P_d.count
    prior = np.zeros((n, DECODE_OUT))
    spacing = median_spacing(P_d.points())
    if spacing > 0:
        prior[:, SCALE] = np.log(scale_factor * spacing)
    prior[:, OPACITY] = float(logit(opacity))
    rgb = color.data.reshape(-1, color.channels)[P_d.cell_indices(), :3]
    prior[:, COLOR][:, :3] = (rgb - 0.5) / SH_C0
    return prior


def run_geometry(view: ViewBundle, bundle: RegressorBundle, features: GeomImage,
                 bini: BiniConfig | None = None, voxel: VoxelFilterConfig | None = None,
                 beta_d: ExpressionCoeffs | None = None, beta_s: ExpressionCoeffs | None = None,
                 use_symmetry: bool = True) -> Geometry:
    P_c = reconstruct(view.depth, view.normal, view.mask, view.camera, bini)
    P_f = refine_geometry(P_c, features, bundle.refine)
    dim = bundle.deform.n_in // 2 - 1
    beta_d = beta_d or ExpressionCoeffs.zeros(dim)
    beta_s = beta_s or ExpressionCoeffs.zeros(dim)
    P_d = deform(P_f, beta_d, beta_s, bundle.deform)
    if not use_symmetry:
        return Geometry(P_f, P_d, None, None)
    _, P_fs, report = symmetric_complete(P_f, voxel)
    P_ds = deform(P_fs, beta_d, beta_s, bundle.deform)
    return Geometry(P_f, P_d, P_ds, report)


def decode_cloud(bundle: RegressorBundle, geometry: Geometry, features: GeomImage,
                 prior: np.ndarray | None) -> GaussianCloud:
    G_d = decode_visible(geometry.P_d, features, bundle.decode, prior)
    if geometry.P_ds is None or geometry.P_ds.count == 0 or len(G_d) == 0:
        return G_d
    return concat(G_d, decode_symmetric(G_d, features, geometry.P_ds, bundle.sym))


def run_pipeline(view: ViewBundle, bundle: RegressorBundle, bini: BiniConfig | None = None,
                 voxel: VoxelFilterConfig | None = None, use_symmetry: bool = True,
                 opacity: float = 0.95, scale_factor: float = 1.0,
                 beta_d: ExpressionCoeffs | None = None,
                 beta_s: ExpressionCoeffs | None = None) -> PipelineResult:
    if view.mask.plane().sum() == 0:
        raise InvalidInputError("source view has an empty mask")
    features = identity_features(view.color, view.mask)
    geometry = run_geometry(view, bundle, features, bini, voxel, beta_d, beta_s, use_symmetry)
    prior = source_prior(geometry.P_d, view.color, opacity, scale_factor)
    cloud = decode_cloud(bundle, geometry, features, prior)
    return PipelineResult(cloud, geometry, features, prior)


def final_cloud(cloud: GaussianCloud) -> GaussianCloud:
    """The densified cloud that is rendered for output frames."""
    return densify(cloud)


def occluded_mask(target: ViewBundle, source: ViewBundle, tol: float = 0.02) -> np.ndarray:
    """Target-view pixels whose surface point is hidden from (or outside) the source view."""
    m = target.mask.plane() > 0.5
    out = np.zeros(m.shape, dtype=bool)
    if not m.any():
        return out
    vv, uu = np.nonzero(m)
    pts = unproject(target.camera, uu + 0.5, vv + 0.5, target.depth.plane()[m])
    u, v, z = project(source.camera, pts)
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    h, w = source.mask.plane().shape
    inside = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    seen = np.zeros(len(pts), dtype=bool)
    ok = np.flatnonzero(inside)
    src_m = source.mask.plane()[iv[ok], iu[ok]] > 0.5
    src_z = source.depth.plane()[iv[ok], iu[ok]]
    seen[ok] = src_m & (np.abs(src_z - z[ok]) < tol * np.maximum(z[ok], 1e-9))
    out[vv, uu] = ~seen
    return out
