"""Tile-based software splatting with analytic color/opacity gradients.

Forward model per pixel (center at ``(u + 0.5, v + 0.5)``): splats sorted by
camera depth (ties by Gaussian index) are composited front to back with
``alpha_i = min(alpha_max, o_i * exp(-0.5 d^T cov2d^-1 d))``; contributions
below ``alpha_min`` are skipped and the background is transparent black.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .core import Z_NEAR, Camera, GeomImage, ImageKind
from .gaussians import GaussianCloud, eval_color_raw, logistic, sh_basis

# numba probes an optional TBB backend on first parallel launch and warns when
# the installed version is too old; it then falls back to another backend
warnings.filterwarnings("ignore", message="The TBB threading layer")

BLUR = 0.3


@dataclass(frozen=True)
class RenderSettings:
    tile: int = 16
    alpha_max: float = 0.999
    alpha_min: float = 1.0 / 255.0
    blur: float = BLUR
    z_near: float = Z_NEAR


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_base: float
    source_index: int


@dataclass
class Splats:
    """Struct-of-arrays of the Gaussians that survived culling, front to back."""

    source_index: np.ndarray  # (K,)
    means: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conics: np.ndarray  # (K, 3): inverse covariance entries a, b, c
    depths: np.ndarray
    colors: np.ndarray  # clamped RGB
    colors_raw: np.ndarray  # unclamped RGB
    basis: np.ndarray  # (K, 4) SH basis of the view direction
    alpha_base: np.ndarray
    extents: np.ndarray  # (K, 2) half-width of the support box in pixels

    def __len__(self):
        return len(self.source_index)

    def order(self) -> np.ndarray:
        """Front-to-back compositing order (depth, then Gaussian index)."""
        return np.lexsort((self.source_index, self.depths))


@dataclass
class RenderOutput:
    color: GeomImage
    alpha: GeomImage
    transmittance: np.ndarray


def _threads():
    value = os.environ.get("SPLATHEAD_THREADS")
    if value:
        numba.set_num_threads(max(1, min(int(value), numba.config.NUMBA_NUM_THREADS)))


def project_gaussians(cloud: GaussianCloud, camera: Camera,
                      settings: RenderSettings = RenderSettings()) -> Splats:
    """EWA projection of a whole cloud, dropping culled Gaussians."""
    n = len(cloud)
    if n == 0:
        return _empty_splats()
    R = camera.R
    t = cloud.positions @ R.T + camera.translation
    front = t[:, 2] > settings.z_near
    idx = np.flatnonzero(front)
    t = t[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * tx / tz**2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * ty / tz**2
    sub = cloud.subset(idx)
    T = J @ R
    cov = np.einsum("nij,njk,nlk->nil", T, sub.covariances(), T)
    cov[:, 0, 0] += settings.blur
    cov[:, 1, 1] += settings.blur
    means = np.column_stack([camera.fx * tx / tz + camera.cx, camera.fy * ty / tz + camera.cy])
    opac = logistic(sub.opacity_logits)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conics = np.column_stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det])
    # Mahalanobis radius beyond which alpha falls under alpha_min, at least 3 sigma
    with np.errstate(divide="ignore"):
        floor_m2 = 2.0 * np.log(np.maximum(opac, 1e-300) / settings.alpha_min)
    m = np.sqrt(np.maximum(floor_m2, 9.0))
    ext = np.column_stack([m * np.sqrt(cov[:, 0, 0]), m * np.sqrt(cov[:, 1, 1])]) + 1.0
    visible = (
        (opac >= settings.alpha_min)
        & (means[:, 0] + ext[:, 0] >= 0) & (means[:, 0] - ext[:, 0] <= camera.width)
        & (means[:, 1] + ext[:, 1] >= 0) & (means[:, 1] - ext[:, 1] <= camera.height)
    )
    keep = np.flatnonzero(visible)
    # store front to back so tile lists walk memory in order
    keep = keep[np.lexsort((idx[keep], tz[keep]))]
    dirs = sub.positions[keep] - camera.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    raw = eval_color_raw(sub.colors[keep], dirs)
    return Splats(
        source_index=idx[keep], means=means[keep], cov2d=cov[keep], conics=conics[keep],
        depths=tz[keep], colors=np.clip(raw, 0.0, 1.0), colors_raw=raw, basis=sh_basis(dirs),
        alpha_base=opac[keep], extents=ext[keep],
    )


def _empty_splats() -> Splats:
    z = np.zeros
    return Splats(z(0, np.int64), z((0, 2)), z((0, 2, 2)), z((0, 3)), z(0), z((0, 3)),
                  z((0, 3)), z((0, 4)), z(0), z((0, 2)))


def project_gaussian(cloud: GaussianCloud, index: int, camera: Camera,
                     settings: RenderSettings = RenderSettings()) -> Splat2D | None:
    """Project one Gaussian of ``cloud``; None when it is culled."""
    splats = project_gaussians(cloud.subset(slice(index, index + 1)), camera, settings)
    if len(splats) == 0:
        return None
    return Splat2D(splats.means[0], splats.cov2d[0], float(splats.depths[0]),
                   splats.colors[0], float(splats.alpha_base[0]), index)


# --------------------------------------------------------------------------
# tile binning


@dataclass
class TileBins:
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray  # (n_tiles + 1,) offsets into pair_splat
    pair_splat: np.ndarray  # splat id per (tile, splat) pair, depth-sorted within a tile


def bin_splats(splats: Splats, width: int, height: int, tile: int) -> TileBins:
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    if len(splats) == 0:
        return TileBins(tiles_x, tiles_y, np.zeros(n_tiles + 1, np.int64), np.zeros(0, np.int64))
    # pixel centers covered by the support box, as tile ranges
    lo = np.floor((splats.means - splats.extents - 0.5) / tile).astype(np.int64)
    hi = np.floor((splats.means + splats.extents - 0.5) / tile).astype(np.int64)
    x0 = np.clip(lo[:, 0], 0, tiles_x - 1)
    x1 = np.clip(hi[:, 0], 0, tiles_x - 1)
    y0 = np.clip(lo[:, 1], 0, tiles_y - 1)
    y1 = np.clip(hi[:, 1], 0, tiles_y - 1)
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    total = int(counts.sum())
    rank = np.empty(len(splats), dtype=np.int64)
    rank[splats.order()] = np.arange(len(splats))
    splat_of_pair = np.repeat(np.arange(len(splats)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - start
    px = x0[splat_of_pair] + local % nx[splat_of_pair]
    py = y0[splat_of_pair] + local // nx[splat_of_pair]
    tile_id = py * tiles_x + px
    key = tile_id * len(splats) + rank[splat_of_pair]
    order = np.argsort(key, kind="stable")
    pair_splat = splat_of_pair[order]
    ranges = np.searchsorted(tile_id[order], np.arange(n_tiles + 1))
    return TileBins(tiles_x, tiles_y, ranges.astype(np.int64), pair_splat.astype(np.int64))


# --------------------------------------------------------------------------
# kernels


@numba.njit(cache=True, inline="always")
def _power(px, py, means, conics, s):
    dx = px - means[s, 0]
    dy = py - means[s, 1]
    return -0.5 * (conics[s, 0] * dx * dx + conics[s, 2] * dy * dy) - conics[s, 1] * dx * dy


@numba.njit(cache=True, inline="always")
def _alpha(power, base, alpha_max):
    g = math.exp(power)
    a = base * g
    if a > alpha_max:
        return alpha_max, g, True
    return a, g, False


@numba.njit(cache=True, parallel=True)
def _forward_tiles(ranges, pair_splat, means, conics, colors, bases, log_floor, width, height,
                   tile, tiles_x, alpha_min, alpha_max, out_color, out_T):
    n_tiles = len(ranges) - 1
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t]
        stop = ranges[t + 1]
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                py = v + 0.5
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for p in range(start, stop):
                    s = pair_splat[p]
                    power = _power(px, py, means, conics, s)
                    if power < log_floor[s]:
                        continue
                    a, _, _ = _alpha(power, bases[s], alpha_max)
                    if a < alpha_min:
                        continue
                    w = a * T
                    r += colors[s, 0] * w
                    g += colors[s, 1] * w
                    b += colors[s, 2] * w
                    T = T * (1.0 - a)
                out_color[v, u, 0] = r
                out_color[v, u, 1] = g
                out_color[v, u, 2] = b
                out_T[v, u] = T


@numba.njit(cache=True, parallel=True)
def _forward_reference(order, means, conics, colors, bases, log_floor, width, height,
                       alpha_min, alpha_max, out_color, out_T):
    n = len(order)
    for v in numba.prange(height):
        for u in range(width):
            px = u + 0.5
            py = v + 0.5
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for i in range(n):
                s = order[i]
                power = _power(px, py, means, conics, s)
                if power < log_floor[s]:
                    continue
                a, _, _ = _alpha(power, bases[s], alpha_max)
                if a < alpha_min:
                    continue
                w = a * T
                r += colors[s, 0] * w
                g += colors[s, 1] * w
                b += colors[s, 2] * w
                T = T * (1.0 - a)
            out_color[v, u, 0] = r
            out_color[v, u, 1] = g
            out_color[v, u, 2] = b
            out_T[v, u] = T


@numba.njit(cache=True, parallel=True)
def _backward_tiles(ranges, pair_splat, means, conics, colors, bases, log_floor, width, height,
                    tile, tiles_x, alpha_min, alpha_max, grad_img, pair_dcolor, pair_dbase):
    n_tiles = len(ranges) - 1
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = ranges[t]
        stop = ranges[t + 1]
        m = stop - start
        hit = np.empty(m, dtype=np.int64)
        alphas = np.empty(m)
        trans = np.empty(m)
        gauss = np.empty(m)
        clamped = np.empty(m, dtype=np.bool_)
        for v in range(ty * tile, min((ty + 1) * tile, height)):
            for u in range(tx * tile, min((tx + 1) * tile, width)):
                px = u + 0.5
                py = v + 0.5
                T = 1.0
                count = 0
                for p in range(start, stop):
                    s = pair_splat[p]
                    power = _power(px, py, means, conics, s)
                    if power < log_floor[s]:
                        continue
                    a, gv, cl = _alpha(power, bases[s], alpha_max)
                    if a < alpha_min:
                        continue
                    hit[count] = p
                    alphas[count] = a
                    trans[count] = T
                    gauss[count] = gv
                    clamped[count] = cl
                    count += 1
                    T = T * (1.0 - a)
                g0 = grad_img[v, u, 0]
                g1 = grad_img[v, u, 1]
                g2 = grad_img[v, u, 2]
                behind = 0.0  # sum over later splats of (color . grad) * alpha * T
                for k in range(count - 1, -1, -1):
                    p = hit[k]
                    s = pair_splat[p]
                    a = alphas[k]
                    Tk = trans[k]
                    w = a * Tk
                    pair_dcolor[p, 0] += w * g0
                    pair_dcolor[p, 1] += w * g1
                    pair_dcolor[p, 2] += w * g2
                    cg = colors[s, 0] * g0 + colors[s, 1] * g1 + colors[s, 2] * g2
                    d_alpha = Tk * cg - behind / (1.0 - a)
                    if not clamped[k]:
                        pair_dbase[p] += d_alpha * gauss[k]
                    behind += cg * w


# --------------------------------------------------------------------------
# public API


def _arrays(splats: Splats, settings: RenderSettings):
    # log of the alpha floor per splat, slightly loosened: a cheap reject
    # before exp(), the exact alpha_min test still follows
    log_floor = np.log(settings.alpha_min / splats.alpha_base) - 1e-6
    return (np.ascontiguousarray(splats.means), np.ascontiguousarray(splats.conics),
            np.ascontiguousarray(splats.colors), np.ascontiguousarray(splats.alpha_base),
            log_floor)


def _output(color, T) -> RenderOutput:
    return RenderOutput(GeomImage(color, ImageKind.COLOR),
                        GeomImage(1.0 - T, ImageKind.FEATURE), T)


def render(cloud: GaussianCloud, camera: Camera, tile: int = 16,
           settings: RenderSettings | None = None) -> RenderOutput:
    """Tiled forward pass."""
    settings = settings or RenderSettings(tile=tile)
    _threads()
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    T = np.ones((h, w))
    splats = project_gaussians(cloud, camera, settings)
    if len(splats):
        bins = bin_splats(splats, w, h, settings.tile)
        _forward_tiles(bins.ranges, bins.pair_splat, *_arrays(splats, settings), w, h, settings.tile,
                       bins.tiles_x, settings.alpha_min, settings.alpha_max, color, T)
    return _output(color, T)


def render_reference(cloud: GaussianCloud, camera: Camera,
                     settings: RenderSettings | None = None) -> RenderOutput:
    """Untiled oracle: every pixel visits every projected splat."""
    settings = settings or RenderSettings()
    _threads()
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    T = np.ones((h, w))
    splats = project_gaussians(cloud, camera, settings)
    if len(splats):
        _forward_reference(splats.order(), *_arrays(splats, settings), w, h, settings.alpha_min,
                           settings.alpha_max, color, T)
    return _output(color, T)


@dataclass
class RenderGradients:
    colors: np.ndarray  # (N, 12) d loss / d SH coefficients
    opacity_logits: np.ndarray  # (N,)


def render_grad_color_opacity(cloud: GaussianCloud, camera: Camera, upstream: np.ndarray,
                              settings: RenderSettings | None = None) -> RenderGradients:
    """Backpropagate a per-pixel RGB gradient to SH coefficients and opacity logits.

    Color channels clamped to 0 or 1 by the SH evaluation get zero gradient,
    as do alphas capped at ``alpha_max`` (w.r.t. opacity) and skipped
    contributions.
    """
    settings = settings or RenderSettings()
    _threads()
    n = len(cloud)
    out = RenderGradients(np.zeros((n, 12)), np.zeros(n))
    h, w = camera.height, camera.width
    upstream = np.ascontiguousarray(upstream, dtype=np.float64).reshape(h, w, 3)
    splats = project_gaussians(cloud, camera, settings)
    if len(splats) == 0:
        return out
    bins = bin_splats(splats, w, h, settings.tile)
    n_pairs = len(bins.pair_splat)
    pair_dcolor = np.zeros((n_pairs, 3))
    pair_dbase = np.zeros(n_pairs)
    _backward_tiles(bins.ranges, bins.pair_splat, *_arrays(splats, settings), w, h, settings.tile,
                    bins.tiles_x, settings.alpha_min, settings.alpha_max, upstream,
                    pair_dcolor, pair_dbase)
    k = len(splats)
    dcolor = np.zeros((k, 3))
    dbase = np.zeros(k)
    np.add.at(dcolor, bins.pair_splat, pair_dcolor)
    np.add.at(dbase, bins.pair_splat, pair_dbase)
    inside = (splats.colors_raw > 0.0) & (splats.colors_raw < 1.0)
    dcolor = np.where(inside, dcolor, 0.0)
    dcoef = np.einsum("nk,nc->nkc", splats.basis, dcolor).reshape(k, 12)
    o = splats.alpha_base
    np.add.at(out.colors, splats.source_index, dcoef)
    np.add.at(out.opacity_logits, splats.source_index, dbase * o * (1.0 - o))
    return out


def transmittance_trace(cloud: GaussianCloud, camera: Camera, u: int, v: int,
                        settings: RenderSettings | None = None) -> np.ndarray:
    """Transmittance before each contributing splat at pixel (u, v), plus the final value."""
    settings = settings or RenderSettings()
    splats = project_gaussians(cloud, camera, settings)
    T = 1.0
    trace = [T]
    px, py = u + 0.5, v + 0.5
    for s in splats.order():
        d = np.array([px, py]) - splats.means[s]
        a_, b_, c_ = splats.conics[s]
        power = -0.5 * (a_ * d[0] ** 2 + c_ * d[1] ** 2) - b_ * d[0] * d[1]
        a = min(settings.alpha_max, splats.alpha_base[s] * math.exp(power))
        if a < settings.alpha_min:
            continue
        T = T * (1.0 - a)
        trace.append(T)
    return np.array(trace)
