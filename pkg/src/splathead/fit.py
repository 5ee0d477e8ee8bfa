"""Image losses and the desk-scale gradient-descent fitting loop.

The training objective on a rendered pair (coarse ``I_c`` before
densification, ``I_tgt`` after) against ground truth ``I_gt`` is::

    L1(I_c, gt) + L1(I_tgt, gt)
      + lambda_p * (edge(I_c, gt) + edge(I_tgt, gt))
      + lambda_ssim * (1 - ssim(I_tgt, gt))

where ``edge`` is an L1 distance between finite-difference image gradients
standing in for a perceptual term.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .core import Camera, GeomImage, GridPointCloud
from .errors import InvalidInputError, NumericalError
from .gaussians import GaussianCloud, Provenance, concat, densify
from .regressors import (
    COLOR, OPACITY, RegressorBundle, cell_features, parse_visible, symmetric_correspondence,
    symmetric_inputs, visible_inputs,
)
from .renderer import RenderSettings, render, render_grad_color_opacity

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossConfig:
    lambda_p: float = 0.01
    lambda_ssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    steps: int = 500
    lr_color: float = 1.0
    lr_opacity: float = 1.0
    lr_net: float = 0.05
    lr_decay: float = 1.0  # per-step multiplicative schedule
    momentum: float = 0.0
    densify: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_ssim < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise InvalidInputError("ssim_window must be a positive odd number")
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")


def _img(x) -> np.ndarray:
    return x.data if isinstance(x, GeomImage) else np.asarray(x, dtype=np.float64)


def _same_shape(a, b):
    a, b = _img(a), _img(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


# --------------------------------------------------------------------------
# losses


def l1_loss(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    return np.sign(a - b) / a.size


def _diffs(x):
    return x[:, 1:] - x[:, :-1], x[1:, :] - x[:-1, :]


def edge_loss(a, b) -> float:
    a, b = _same_shape(a, b)
    ax, ay = _diffs(a)
    bx, by = _diffs(b)
    total = 0.0
    if ax.size:
        total += float(np.mean(np.abs(ax - bx)))
    if ay.size:
        total += float(np.mean(np.abs(ay - by)))
    return total


def edge_grad(a, b) -> np.ndarray:
    a, b = _same_shape(a, b)
    ax, ay = _diffs(a)
    bx, by = _diffs(b)
    g = np.zeros_like(a)
    if ax.size:
        sx = np.sign(ax - bx) / ax.size
        g[:, 1:] += sx
        g[:, :-1] -= sx
    if ay.size:
        sy = np.sign(ay - by) / ay.size
        g[1:, :] += sy
        g[:-1, :] -= sy
    return g


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = window // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _blur(x, kernel):
    # zero-padded 'same' correlation over the two image axes
    y = correlate1d(x, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, kernel, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a, b, window, sigma):
    k = gaussian_kernel(window, sigma)
    mu_a = _blur(a, k)
    mu_b = _blur(b, k)
    s_aa = _blur(a * a, k) - mu_a * mu_a
    s_bb = _blur(b * b, k) - mu_b * mu_b
    s_ab = _blur(a * b, k) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * s_ab + SSIM_C2
    B1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    B2 = s_aa + s_bb + SSIM_C2
    return k, mu_a, mu_b, A1, A2, B1, B2


def ssim(a, b, cfg: LossConfig | None = None) -> float:
    """Mean SSIM with a Gaussian window (zero padding at the borders)."""
    cfg = cfg or LossConfig()
    a, b = _same_shape(a, b)
    _, _, _, A1, A2, B1, B2 = _ssim_terms(a, b, cfg.ssim_window, cfg.ssim_sigma)
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_grad(a, b, cfg: LossConfig | None = None) -> np.ndarray:
    """d ssim(a, b) / d a."""
    cfg = cfg or LossConfig()
    a, b = _same_shape(a, b)
    k, mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b, cfg.ssim_window, cfg.ssim_sigma)
    n = a.size
    # written with the ratios r1, r2 so the gradient is exactly zero when a == b
    r1 = A1 / B1
    r2 = A2 / B2
    S = r1 * r2
    d_mu = (2 * mu_b * r2 - S * 2 * mu_a) / B1 / n
    d_saa = -S / B2 / n
    d_sab = 2 * r1 / B2 / n
    # sigma_aa = E[a^2] - mu_a^2 and sigma_ab = E[ab] - mu_a mu_b
    d_mu_total = d_mu - 2 * mu_a * d_saa - mu_b * d_sab
    return _blur(d_mu_total, k) + 2 * a * _blur(d_saa, k) + b * _blur(d_sab, k)


def psnr(a, b) -> float:
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


@dataclass
class LossTerms:
    total: float
    l1_c: float
    l1_tgt: float
    edge: float
    ssim_term: float
    grad_c: np.ndarray | None = None
    grad_tgt: np.ndarray | None = None

    def row(self) -> dict:
        return {"total": self.total, "l1_c": self.l1_c, "l1_tgt": self.l1_tgt,
                "edge": self.edge, "ssim_term": self.ssim_term}


def total_loss(I_c, I_tgt, I_gt, cfg: LossConfig | None = None, with_grad: bool = False) -> LossTerms:
    """Training objective; ``edge`` holds the unweighted sum of both edge terms."""
    cfg = cfg or LossConfig()
    c, gt = _same_shape(I_c, I_gt)
    t, _ = _same_shape(I_tgt, I_gt)
    l1_c = l1_loss(c, gt)
    l1_t = l1_loss(t, gt)
    edge = edge_loss(c, gt) + edge_loss(t, gt)
    ssim_term = 1.0 - ssim(t, gt, cfg)
    total = l1_c + l1_t + cfg.lambda_p * edge + cfg.lambda_ssim * ssim_term
    terms = LossTerms(total, l1_c, l1_t, edge, ssim_term)
    if with_grad:
        terms.grad_c = l1_grad(c, gt) + cfg.lambda_p * edge_grad(c, gt)
        terms.grad_tgt = (l1_grad(t, gt) + cfg.lambda_p * edge_grad(t, gt)
                          - cfg.lambda_ssim * ssim_grad(t, gt, cfg))
    return terms


# --------------------------------------------------------------------------
# trainable models


class CloudModel:
    """Direct optimization of a cloud's SH colors and opacity logits."""

    def __init__(self, cloud: GaussianCloud):
        self.base = cloud
        self.colors = cloud.colors.copy()
        self.logits = cloud.opacity_logits.copy()

    def params(self) -> dict[str, np.ndarray]:
        return {"color": self.colors.ravel(), "opacity": self.logits}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.colors = params["color"].reshape(-1, 12).copy()
        self.logits = params["opacity"].copy()

    def build(self) -> GaussianCloud:
        return self.base.replace(colors=self.colors, opacity_logits=self.logits)

    def backward(self, d_colors, d_logits) -> dict[str, np.ndarray]:
        return {"color": d_colors.ravel(), "opacity": d_logits}

    def result(self):
        return self.build()


@dataclass
class PipelineModel:
    """Decoder-driven Gaussians; gradients reach the visible decoder and the
    color/opacity offset networks through the rendered colors and opacities.

    Scale/rotation outputs and positions receive no gradient.
    """

    bundle: RegressorBundle
    P_d: GridPointCloud
    F: GeomImage
    P_ds: GridPointCloud | None = None
    prior: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def _nets(self):
        return {"net": [self.bundle.decode, self.bundle.sym.color, self.bundle.sym.opacity]}

    def params(self) -> dict[str, np.ndarray]:
        return {"net": np.concatenate([n.get_flat() for n in self._nets()["net"]])}

    def set_params(self, params) -> None:
        flat = params["net"]
        pos = 0
        for net in self._nets()["net"]:
            net.set_flat(flat[pos:pos + net.num_params])
            pos += net.num_params

    def build(self) -> GaussianCloud:
        X = visible_inputs(self.P_d, self.F)
        raw, acts_v = self.bundle.decode.forward_cache(X)
        if self.prior is not None:
            raw = raw + self.prior
        G_d = parse_visible(raw, self.P_d.points(), self.P_d.cell_indices())
        self._cache = {"acts_v": acts_v, "n_vis": len(G_d)}
        if self.P_ds is None or self.P_ds.count == 0:
            return G_d
        cells, rows, found = symmetric_correspondence(G_d, self.P_ds)
        cells, rows = cells[found], rows[found]
        positions = self.P_ds.points()[found]
        feats = cell_features(self.F, cells)
        sym = self.bundle.sym
        anchors = {"scale": G_d.log_scales, "rotation": G_d.rotations,
                   "color": G_d.colors, "opacity": G_d.opacity_logits[:, None]}
        out = {}
        for family, net in sym.items():
            anchor = anchors[family][rows]
            off, acts = net.forward_cache(symmetric_inputs(positions, feats, anchor))
            out[family] = anchor + off
            self._cache[family] = acts
        self._cache["rows"] = rows
        G_s = GaussianCloud(positions, out["rotation"], out["scale"], out["opacity"][:, 0],
                            out["color"], np.full(len(positions), Provenance.SYMMETRIC), cells)
        return concat(G_d, G_s)

    def backward(self, d_colors, d_logits) -> dict[str, np.ndarray]:
        n_vis = self._cache["n_vis"]
        dc_vis = d_colors[:n_vis].copy()
        do_vis = d_logits[:n_vis].copy()
        sym = self.bundle.sym
        if "rows" in self._cache:
            rows = self._cache["rows"]
            offset = 3 + self.F.channels
            dc_s = d_colors[n_vis:]
            g_c, dx_c = sym.color.backward(self._cache["color"], dc_s)
            np.add.at(dc_vis, rows, dc_s + dx_c[:, offset:])
            do_s = d_logits[n_vis:, None]
            g_o, dx_o = sym.opacity.backward(self._cache["opacity"], do_s)
            np.add.at(do_vis, rows, (do_s + dx_o[:, offset:])[:, 0])
        else:
            g_c = np.zeros(sym.color.num_params)
            g_o = np.zeros(sym.opacity.num_params)
        d_raw = np.zeros((n_vis, self.bundle.decode.n_out))
        d_raw[:, COLOR] = dc_vis
        d_raw[:, OPACITY] = do_vis[:, None]
        g_v, _ = self.bundle.decode.backward(self._cache["acts_v"], d_raw)
        grads = [g_v, g_c, g_o]
        return {"net": np.concatenate(grads)}

    def result(self):
        return self.bundle


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    model: object  # GaussianCloud or RegressorBundle
    trace: list[dict]
    initial_loss: float
    final_loss: float


def render_pair(cloud: GaussianCloud, camera: Camera, use_densify: bool,
                settings: RenderSettings | None = None):
    I_c = render(cloud, camera, settings=settings).color.data
    if not use_densify:
        return I_c, I_c, None
    dense = densify(cloud)
    return I_c, render(dense, camera, settings=settings).color.data, dense


def loss_and_grad(model, targets, cfg: LossConfig, settings: RenderSettings | None = None):
    """Mean objective over target views and its gradient w.r.t. model params."""
    cloud = model.build()
    n = len(cloud)
    d_colors = np.zeros((n, 12))
    d_logits = np.zeros(n)
    rows = []
    for camera, gt in targets:
        gt = _img(gt)
        I_c, I_t, dense = render_pair(cloud, camera, cfg.densify, settings)
        terms = total_loss(I_c, I_t, gt, cfg, with_grad=True)
        rows.append(terms)
        if cfg.densify:
            g_c = render_grad_color_opacity(cloud, camera, terms.grad_c, settings)
            g_t = render_grad_color_opacity(dense, camera, terms.grad_tgt, settings)
            d_colors += g_c.colors + g_t.colors[:n] + g_t.colors[n:]
            d_logits += g_c.opacity_logits + g_t.opacity_logits[:n] + g_t.opacity_logits[n:]
        else:
            g = render_grad_color_opacity(cloud, camera, terms.grad_c + terms.grad_tgt, settings)
            d_colors += g.colors
            d_logits += g.opacity_logits
    k = len(targets)
    mean = {key: sum(t.row()[key] for t in rows) / k for key in rows[0].row()}
    grads = model.backward(d_colors / k, d_logits / k)
    return mean, grads


def fit_scene(init, targets, cfg: LossConfig | None = None,
              settings: RenderSettings | None = None) -> FitResult:
    """Plain (optionally momentum) gradient descent on colors/opacities or decoder weights.

    ``init`` is a :class:`GaussianCloud` (its colors and opacity logits are
    optimized) or a :class:`PipelineModel`. ``targets`` is a list of
    ``(camera, image)`` pairs. The returned trace has one row per step,
    evaluated before that step's update, plus a final row.
    """
    cfg = cfg or LossConfig()
    if not targets:
        raise InvalidInputError("fit_scene needs at least one target view")
    model = CloudModel(init) if isinstance(init, GaussianCloud) else init
    lrs = {"color": cfg.lr_color, "opacity": cfg.lr_opacity, "net": cfg.lr_net}
    params = {k: v.copy() for k, v in model.params().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    trace = []
    for step in range(cfg.steps + 1):
        model.set_params(params)
        row, grads = loss_and_grad(model, targets, cfg, settings)
        if not math.isfinite(row["total"]) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(f"non-finite loss or gradient at step {step}", step=step)
        trace.append({"step": step, **row})
        if step == cfg.steps:
            break
        decay = cfg.lr_decay**step
        for key, g in grads.items():
            velocity[key] = cfg.momentum * velocity[key] + g
            params[key] = params[key] - lrs[key] * decay * velocity[key]
    model.set_params(params)
    return FitResult(model.result(), trace, trace[0]["total"], trace[-1]["total"])


TRACE_FIELDS = ("step", "total", "l1_c", "l1_tgt", "edge", "ssim_term")


def write_trace_csv(path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in TRACE_FIELDS})


def smoothed(values, window: int = 10) -> np.ndarray:
    """Means over consecutive non-overlapping windows (a trailing partial window is dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)
