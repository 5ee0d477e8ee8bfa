"""Mirror completion of a single-view point cloud with a voxel filter.

The sagittal plane is x = 0 of the canonical (head) frame. Mirrored points
are dropped when they land next to existing geometry or when they would sit
in front of it along +z.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GridPointCloud
from .errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass
class VoxelFilterConfig:
    voxel_size: float | None = None  # None: 1.5 x median nearest-neighbour spacing
    neighborhood_radius: int = 1
    z_margin: float | None = None  # None: half a voxel

    def __post_init__(self):
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise InvalidInputError("voxel_size must be positive")
        if self.neighborhood_radius < 0:
            raise InvalidInputError("neighborhood_radius must be >= 0")
        if self.z_margin is not None and self.z_margin < 0:
            raise InvalidInputError("z_margin must be >= 0")


@dataclass
class FilterReport:
    voxel_size: float
    z_margin: float
    kept: int
    removed_adjacent: int
    removed_occluding: int
    empty_original: bool = False

    @property
    def removed(self) -> int:
        return self.removed_adjacent + self.removed_occluding

    def to_dict(self) -> dict:
        return {
            "voxel_size": self.voxel_size, "z_margin": self.z_margin, "kept": self.kept,
            "removed_adjacent": self.removed_adjacent,
            "removed_occluding": self.removed_occluding,
            "empty_original": self.empty_original,
        }


def mirror_x(cloud: GridPointCloud) -> GridPointCloud:
    """Negate x of every valid point; cells keep their grid index."""
    pos = cloud.positions.copy()
    pos[..., 0] = -pos[..., 0]
    return GridPointCloud(pos, cloud.valid)


def median_spacing(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.median(dist[:, 1]))


def resolve_config(original: np.ndarray, cfg: VoxelFilterConfig) -> tuple[float, float]:
    size = cfg.voxel_size
    if size is None:
        size = 1.5 * median_spacing(original)
        if not size > 0:
            size = 1e-3
    margin = 0.5 * size if cfg.z_margin is None else cfg.z_margin
    return size, margin


def voxel_index(points: np.ndarray, size: float) -> np.ndarray:
    """Half-open cubic cells: floor(coord / size)."""
    return np.floor(points / size).astype(np.int64)


def _pack(idx: np.ndarray) -> np.ndarray:
    # 21 bits per axis, offset to stay positive
    off = idx + (1 << 20)
    if np.any(off < 0) or np.any(off >= (1 << 21)):
        raise InvalidInputError("voxel index out of range; voxel_size too small for extent")
    return (off[:, 0] << 42) | (off[:, 1] << 21) | off[:, 2]


def filter_masks(original: np.ndarray, mirrored: np.ndarray, size: float, radius: int,
                 margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Per mirrored point: (adjacent to original geometry, occludes original geometry).

    Hash-grid evaluation: occupied original voxels are packed to int64 keys
    and probed for every offset of the Chebyshev neighbourhood; per (x, y)
    column the maximum original z is kept.
    """
    m = len(mirrored)
    if len(original) == 0 or m == 0:
        return np.zeros(m, dtype=bool), np.zeros(m, dtype=bool)
    o_idx = voxel_index(original, size)
    m_idx = voxel_index(mirrored, size)
    occupied = np.unique(_pack(o_idx))
    adjacent = np.zeros(m, dtype=bool)
    r = radius
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                todo = ~adjacent
                if not todo.any():
                    break
                probe = _pack(m_idx[todo] + np.array([dx, dy, dz]))
                hit = np.isin(probe, occupied, assume_unique=False)
                adjacent[np.flatnonzero(todo)[hit]] = True

    col_keys = _pack(np.column_stack([o_idx[:, :2], np.zeros(len(o_idx), dtype=np.int64)]))
    order = np.argsort(col_keys, kind="stable")
    keys_sorted = col_keys[order]
    uniq, start = np.unique(keys_sorted, return_index=True)
    col_max = np.maximum.reduceat(original[order, 2], start)
    probe = _pack(np.column_stack([m_idx[:, :2], np.zeros(m, dtype=np.int64)]))
    pos = np.searchsorted(uniq, probe)
    pos_c = np.minimum(pos, len(uniq) - 1)
    found = uniq[pos_c] == probe
    occluding = found & (col_max[pos_c] > mirrored[:, 2] + margin)
    return adjacent, occluding


def filter_masks_bruteforce(original: np.ndarray, mirrored: np.ndarray, size: float, radius: int,
                            margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Direct O(N*M) evaluation of both removal rules (test oracle)."""
    m = len(mirrored)
    adjacent = np.zeros(m, dtype=bool)
    occluding = np.zeros(m, dtype=bool)
    o_idx = [tuple(int(v) for v in np.floor(p / size)) for p in original]
    for j, q in enumerate(mirrored):
        qi = tuple(int(v) for v in np.floor(q / size))
        col_max = -np.inf
        for p, pi in zip(original, o_idx):
            if max(abs(pi[0] - qi[0]), abs(pi[1] - qi[1]), abs(pi[2] - qi[2])) <= radius:
                adjacent[j] = True
            if pi[0] == qi[0] and pi[1] == qi[1]:
                col_max = max(col_max, p[2])
        occluding[j] = col_max > q[2] + margin
    return adjacent, occluding


def voxel_filter(original: GridPointCloud, mirrored: GridPointCloud,
                 cfg: VoxelFilterConfig | None = None,
                 bruteforce: bool = False) -> tuple[GridPointCloud, FilterReport]:
    """Drop mirrored points that duplicate or occlude original geometry.

    Returns the surviving mirrored cloud (grid indices unchanged) and a
    report with per-rule removal counts. A point matching both rules is
    counted as adjacent.
    """
    cfg = cfg or VoxelFilterConfig()
    o_pts = original.points()
    m_pts = mirrored.points()
    if len(o_pts) == 0:
        logger.warning("voxel filter: original cloud is empty; mirrored cloud returned unchanged")
        size = cfg.voxel_size or 0.0
        report = FilterReport(size, cfg.z_margin or 0.5 * size, len(m_pts), 0, 0, True)
        return mirrored, report
    size, margin = resolve_config(o_pts, cfg)
    fn = filter_masks_bruteforce if bruteforce else filter_masks
    adjacent, occluding = fn(o_pts, m_pts, size, cfg.neighborhood_radius, margin)
    remove = adjacent | occluding
    cells = mirrored.cell_indices()
    valid = np.zeros(mirrored.height * mirrored.width, dtype=bool)
    valid[cells[~remove]] = True
    out = GridPointCloud(mirrored.positions, valid.reshape(mirrored.valid.shape))
    report = FilterReport(size, margin, int((~remove).sum()), int(adjacent.sum()),
                          int((occluding & ~adjacent).sum()))
    return out, report


def symmetric_complete(P_f: GridPointCloud, cfg: VoxelFilterConfig | None = None):
    """Return ``(P_f, P_f_sym, report)``: the input and its filtered mirror."""
    mirrored, report = voxel_filter(P_f, mirror_x(P_f), cfg)
    return P_f, mirrored, report
