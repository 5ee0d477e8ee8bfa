"""Depth-anchored bilateral normal integration and grid back-projection."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .core import Camera, GeomImage, GridPointCloud, ImageKind, unproject
from .errors import InvalidInputError, NumericalError

logger = logging.getLogger(__name__)

NZ_MIN = 1e-3
W_MIN = 1e-12  # bilateral weights stay strictly inside (0, 1)


@dataclass
class BiniConfig:
    k: float = 2.0
    data_weight: float = 0.01
    irls_iters: int = 20
    cg_tol: float = 1e-6
    cg_max_iters: int = 2000
    # world units per pixel step for the orthographic gradients; None lets
    # reconstruct() derive it from the anchor depth and focal length
    pixel_size: float | None = None

    def __post_init__(self):
        if not self.k > 0:
            raise InvalidInputError("k must be positive")
        if not self.data_weight >= 0:
            raise InvalidInputError("data_weight must be non-negative")
        if self.irls_iters < 1 or self.cg_max_iters < 1:
            raise InvalidInputError("iteration counts must be >= 1")
        if self.pixel_size is not None and not self.pixel_size > 0:
            raise InvalidInputError("pixel_size must be positive")


@dataclass
class BiniResult:
    depth: np.ndarray
    objective: list[float] = field(default_factory=list)
    cg_iterations: list[int] = field(default_factory=list)
    flipped_normals: bool = False


def conjugate_gradient(A, b, x0, tol=1e-6, max_iters=2000):
    """Jacobi-preconditioned CG for a symmetric positive (semi)definite sparse A.

    Returns ``(x, iterations)``. Convergence is ``||b - Ax|| <= tol * ||b||``.
    """
    diag = A.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    x = x0.copy()
    r = b - A @ x
    b_norm = np.linalg.norm(b)
    target = tol * b_norm
    res = np.linalg.norm(r)
    if res <= target or b_norm == 0.0 and res == 0.0:
        return x, 0
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res <= target:
            return x, it
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NumericalError(
        f"conjugate gradient did not converge in {max_iters} iterations "
        f"(relative residual {res / max(b_norm, 1e-300):.3e})",
        residual=res / max(b_norm, 1e-300),
    )


class _DifferenceTerms:
    """One-sided finite differences over a mask.

    For each axis there is a forward term (pixel minus its +1 neighbor) and a
    backward term (pixel minus its -1 neighbor); terms that reach outside the
    mask are dropped.
    """

    def __init__(self, mask: np.ndarray):
        h, w = mask.shape
        index = -np.ones((h, w), dtype=np.int64)
        index[mask] = np.arange(mask.sum())
        self.n = int(mask.sum())
        self.ops = []  # (axis, sign, pixel_ids, neighbour_ids)
        for axis in (1, 0):  # x first, then y
            for sign in (+1, -1):
                shifted = np.full((h, w), -1, dtype=np.int64)
                if axis == 1:
                    if sign > 0:
                        shifted[:, :-1] = index[:, 1:]
                    else:
                        shifted[:, 1:] = index[:, :-1]
                else:
                    if sign > 0:
                        shifted[:-1, :] = index[1:, :]
                    else:
                        shifted[1:, :] = index[:-1, :]
                ok = mask & (shifted >= 0)
                self.ops.append((axis, sign, index[ok], shifted[ok]))
        self.matrices = []
        for axis, sign, pix, nb in self.ops:
            m = len(pix)
            rows = np.concatenate([np.arange(m), np.arange(m)])
            cols = np.concatenate([pix, nb])
            # forward: z(nb) - z(pix); backward: z(pix) - z(nb)
            vals = np.concatenate([-np.ones(m), np.ones(m)]) * sign
            self.matrices.append(sp.csr_matrix((vals, (rows, cols)), shape=(m, self.n)))

    def residuals(self, z, p, q):
        out = []
        for (axis, sign, pix, _), D in zip(self.ops, self.matrices):
            target = p[pix] if axis == 1 else q[pix]
            out.append(D @ z - target)
        return out

    def weights(self, residuals, k, uniform=False):
        """Bilateral weights per term; a term whose partner is missing gets weight 1."""
        weights = []
        for axis_block in (0, 2):
            fwd_pix = self.ops[axis_block][2]
            bwd_pix = self.ops[axis_block + 1][2]
            r_f = np.zeros(self.n)
            r_b = np.zeros(self.n)
            has_f = np.zeros(self.n, dtype=bool)
            has_b = np.zeros(self.n, dtype=bool)
            r_f[fwd_pix] = residuals[axis_block]
            r_b[bwd_pix] = residuals[axis_block + 1]
            has_f[fwd_pix] = True
            has_b[bwd_pix] = True
            if uniform:
                w_f = np.full(self.n, 0.5)
            else:
                w_f = np.clip(_logistic(k * (r_b**2 - r_f**2)), W_MIN, 1.0 - W_MIN)
            w_b = 1.0 - w_f
            w_f = np.where(has_b, w_f, 1.0)
            w_b = np.where(has_f, w_b, 1.0)
            weights.append(w_f[fwd_pix])
            weights.append(w_b[bwd_pix])
        return weights


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _prepare_normals(normal: np.ndarray, mask: np.ndarray):
    n = normal.copy()
    flipped = False
    if np.count_nonzero(n[mask][:, 2] > 0) > 0.5 * mask.sum():
        warnings.warn("normal map faces away from the camera (n_z > 0); flipping", stacklevel=3)
        n = -n
        flipped = True
    nz = n[:, :, 2]
    nz = np.where(np.abs(nz) < NZ_MIN, np.where(nz > 0, NZ_MIN, -NZ_MIN), nz)
    p = -n[:, :, 0] / nz
    q = -n[:, :, 1] / nz
    return p, q, flipped


def bini_objective(terms: _DifferenceTerms, weights, z, z0, p, q, data_weight) -> float:
    res = terms.residuals(z, p, q)
    total = sum(float(np.dot(w, r * r)) for w, r in zip(weights, res))
    return total + data_weight * float(np.dot(z - z0, z - z0))


def solve_bini(depth: GeomImage, normal: GeomImage, mask: GeomImage, cfg: BiniConfig | None = None,
               uniform_weights: bool = False) -> BiniResult:
    """Run the IRLS solve and return the refined depth plus diagnostics.

    ``objective[i]`` is the bilateral energy (weights re-evaluated at the
    iterate) after ``i`` IRLS iterations. An update that would raise it is
    shortened by backtracking, so the trace never increases.
    """
    cfg = cfg or BiniConfig()
    if not (depth.shape[:2] == normal.shape[:2] == mask.shape[:2]):
        raise InvalidInputError("depth, normal and mask must share a size")
    m = mask.plane() > 0.5
    if not m.any():
        raise InvalidInputError("mask has no valid pixels")
    d = depth.plane()
    if not np.all(np.isfinite(d[m])):
        raise InvalidInputError("anchor depth must be finite on the mask")
    p_full, q_full, flipped = _prepare_normals(normal.data, m)
    scale = 1.0 if cfg.pixel_size is None else cfg.pixel_size
    p = p_full[m] * scale
    q = q_full[m] * scale

    terms = _DifferenceTerms(m)
    z0 = d[m].astype(np.float64)
    z = z0.copy()
    lam = cfg.data_weight

    def energy(z_):
        w_ = terms.weights(terms.residuals(z_, p, q), cfg.k, uniform_weights)
        return bini_objective(terms, w_, z_, z0, p, q, lam)

    trace = [energy(z)]
    cg_iters = []
    eye = sp.identity(terms.n, format="csr")
    for _ in range(cfg.irls_iters):
        weights = terms.weights(terms.residuals(z, p, q), cfg.k, uniform_weights)
        A = lam * eye
        b = lam * z0
        for (axis, _, pix, _), D, w in zip(terms.ops, terms.matrices, weights):
            target = p[pix] if axis == 1 else q[pix]
            WD = D.multiply(w[:, None]).tocsr()
            A = A + D.T @ WD
            b = b + D.T @ (w * target)
        z_new, n_it = conjugate_gradient(A.tocsr(), b, z, cfg.cg_tol, cfg.cg_max_iters)
        cg_iters.append(n_it)
        e_new = energy(z_new)
        step = 1.0
        while e_new > trace[-1] and step > 1e-9:
            step *= 0.5
            z_try = z + step * (z_new - z)
            e_new = energy(z_try)
            if e_new <= trace[-1]:
                z_new = z_try
        if e_new > trace[-1]:
            logger.debug("IRLS made no progress; stopping")
            trace.append(trace[-1])
            break
        z = z_new
        trace.append(e_new)
        if uniform_weights:
            # frozen weights: one solve is the fixed point
            break

    out = d.astype(np.float64).copy()
    out[m] = z
    return BiniResult(out, trace, cg_iters, flipped)


def integrate_normals(depth: GeomImage, normal: GeomImage, mask: GeomImage,
                      cfg: BiniConfig | None = None) -> GeomImage:
    """Refined depth map from an anchor depth map and a normal map."""
    return GeomImage(solve_bini(depth, normal, mask, cfg).depth, ImageKind.DEPTH)


def backproject_grid(depth: GeomImage, mask: GeomImage, camera: Camera) -> GridPointCloud:
    """Unproject every masked pixel center at its depth."""
    if depth.shape[:2] != mask.shape[:2]:
        raise InvalidInputError("depth and mask must share a size")
    d = depth.plane()
    m = mask.plane() > 0.5
    if np.any(~(d[m] > 0)):
        raise InvalidInputError("masked depth must be positive")
    h, w = m.shape
    vv, uu = np.nonzero(m)
    pts = unproject(camera, uu + 0.5, vv + 0.5, d[m])
    return GridPointCloud.from_points(pts, vv * w + uu, h, w)


def reconstruct(depth: GeomImage, normal: GeomImage, mask: GeomImage, camera: Camera,
                cfg: BiniConfig | None = None) -> GridPointCloud:
    """Coarse facial point cloud from depth and normals."""
    cfg = cfg or BiniConfig()
    if cfg.pixel_size is None:
        m = mask.plane() > 0.5
        if m.any():
            cfg = replace(cfg, pixel_size=float(np.median(depth.plane()[m])) / camera.fx)
    refined = integrate_normals(depth, normal, mask, cfg)
    return backproject_grid(refined, mask, camera)
