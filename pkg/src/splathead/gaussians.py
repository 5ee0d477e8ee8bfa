"""Anisotropic 3D Gaussian primitives, degree-1 SH color and densification."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import quats_to_rotations
from .errors import InvalidInputError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
LN2 = math.log(2.0)


class Provenance(enum.IntEnum):
    VISIBLE = 0
    SYMMETRIC = 1
    CHILD = 2


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """N Gaussians with raw (pre-activation) parameters.

    ``colors`` is ``(N, 12)`` laid out coefficient-major: entries ``3*k + ch``
    hold SH coefficient ``k`` (0 = DC, 1..3 = linear) of channel ``ch``.
    ``rotations`` are wxyz quaternions and are normalized where used.
    ``grid_index`` is the originating grid cell or -1.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    provenance: np.ndarray
    grid_index: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0]
        specs = {
            "positions": (3,), "rotations": (4,), "log_scales": (3,),
            "opacity_logits": (), "colors": (12,),
        }
        for name, tail in specs.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape((n,) + tail)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} must be finite")
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if n and np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise InvalidInputError("zero quaternion in cloud")
        for name in ("provenance", "grid_index"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.int64).reshape(n))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return logistic(self.opacity_logits)

    def rotation_matrices(self) -> np.ndarray:
        return quats_to_rotations(self.rotations) if len(self) else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        rot = self.rotation_matrices()
        s2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", rot, s2, rot)

    def replace(self, **changes) -> "GaussianCloud":
        fields = {name: getattr(self, name) for name in (
            "positions", "rotations", "log_scales", "opacity_logits", "colors",
            "provenance", "grid_index")}
        fields.update(changes)
        return GaussianCloud(**fields)

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[index], self.rotations[index], self.log_scales[index],
            self.opacity_logits[index], self.colors[index], self.provenance[index],
            self.grid_index[index],
        )

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 12)), np.zeros(0), np.zeros(0))

    @classmethod
    def create(cls, positions, log_scales=None, rotations=None, opacity_logits=None,
               colors=None, provenance=Provenance.VISIBLE, grid_index=None) -> "GaussianCloud":
        """Convenience constructor with broadcastable defaults."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)

        def fill(value, tail, default):
            if value is None:
                value = default
            return np.broadcast_to(np.asarray(value, dtype=np.float64), (n,) + tail).copy()

        return cls(
            positions,
            fill(rotations, (4,), [1.0, 0.0, 0.0, 0.0]),
            fill(log_scales, (3,), 0.0),
            fill(opacity_logits, (), 0.0),
            fill(colors, (12,), 0.0),
            np.broadcast_to(np.asarray(provenance, dtype=np.int64), (n,)).copy(),
            np.full(n, -1) if grid_index is None else grid_index,
        )


def covariance(r, s) -> np.ndarray:
    """Sigma = R S S^T R^T for quaternion ``r`` (wxyz) and positive scales ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (3,) or np.any(~(s > 0)):
        raise InvalidInputError("scales must be three positive numbers")
    rot = quats_to_rotations(np.asarray(r, dtype=np.float64)[None])[0]
    m = rot * s
    return m @ m.T


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-1 real SH basis values ``(N, 4)`` for unit directions ``(N, 3)``."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return np.column_stack([np.full(len(dirs), SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x])


def eval_color_raw(colors: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped per-channel color (including the +0.5 offset), ``(N, 3)``."""
    basis = sh_basis(dirs)
    coeffs = np.asarray(colors, dtype=np.float64).reshape(-1, 4, 3)
    return np.einsum("nk,nkc->nc", basis, coeffs) + 0.5


def eval_color(c, view_dir) -> np.ndarray:
    """RGB in [0, 1] of a 12-vector of SH coefficients seen along ``view_dir``."""
    c = np.asarray(c, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    single = c.ndim == 1
    out = np.clip(eval_color_raw(c.reshape(-1, 12), d.reshape(-1, 3)), 0.0, 1.0)
    return out[0] if single else out


def major_axes(cloud: GaussianCloud) -> np.ndarray:
    """Unit principal axis of the largest scale, oriented toward +y.

    Orientation ties (zero y component) fall back to +x, then +z.
    """
    rot = cloud.rotation_matrices()
    k = np.argmax(cloud.log_scales, axis=1)
    axes = rot[np.arange(len(cloud)), :, k]
    key = axes[:, 1].copy()
    tie = np.abs(key) < 1e-12
    key[tie] = axes[tie, 0]
    tie2 = tie & (np.abs(axes[:, 0]) < 1e-12)
    key[tie2] = axes[tie2, 2]
    return np.where(key[:, None] < 0, -axes, axes)


def densify(g: GaussianCloud) -> GaussianCloud:
    """Append one child per Gaussian, half a major-axis radius from its parent."""
    if len(g) == 0:
        return g
    s_max = np.exp(g.log_scales.max(axis=1))
    child_pos = g.positions + 0.5 * s_max[:, None] * major_axes(g)
    children = GaussianCloud(
        child_pos, g.rotations, g.log_scales - LN2, g.opacity_logits, g.colors,
        np.full(len(g), Provenance.CHILD), g.grid_index,
    )
    return concat(g, children)


def concat(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    return GaussianCloud(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.log_scales, b.log_scales]),
        np.concatenate([a.opacity_logits, b.opacity_logits]),
        np.concatenate([a.colors, b.colors]),
        np.concatenate([a.provenance, b.provenance]),
        np.concatenate([a.grid_index, b.grid_index]),
    )


def split(g: GaussianCloud, n_first: int) -> tuple[GaussianCloud, GaussianCloud]:
    return g.subset(slice(0, n_first)), g.subset(slice(n_first, None))


def mahalanobis(cloud: GaussianCloud, points: np.ndarray) -> np.ndarray:
    cov = cloud.covariances()
    d = points - cloud.positions
    return np.sqrt(np.einsum("ni,ni->n", d, np.linalg.solve(cov, d[..., None])[..., 0]))
