"""Per-point MLP regressors for geometry refinement, deformation and decoding.

All networks are small tanh MLPs applied independently to each grid cell.
Every stage is residual, so a network whose last layer is zero leaves its
input (or its prior) unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import ExpressionCoeffs, GeomImage, GridPointCloud, ImageKind
from .errors import InvalidInputError
from .gaussians import GaussianCloud, Provenance

logger = logging.getLogger(__name__)

FEATURE_CHANNELS = 8
DECODE_OUT = 20  # log_scale 3, quaternion 4, opacity logit 1, color 12
# slices of the decoder output / Gaussian parameter families
SCALE = slice(0, 3)
ROT = slice(3, 7)
OPACITY = slice(7, 8)
COLOR = slice(8, 20)
FAMILY_DIMS = {"scale": 3, "rotation": 4, "color": 12, "opacity": 1}


class Mlp:
    """Fully connected network: tanh on hidden layers, linear output.

    ``init`` is ``"uniform"`` (U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from
    ``seed``), ``"zero_last"`` (uniform but a zero output layer) or
    ``"zero"`` (all parameters zero).
    """

    def __init__(self, sizes, seed: int = 0, init: str = "uniform"):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise InvalidInputError(f"bad layer sizes {sizes}")
        if init not in ("uniform", "zero_last", "zero"):
            raise InvalidInputError(f"unknown init {init!r}")
        self.sizes = sizes
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            last = i == len(sizes) - 2
            if init == "zero" or (init == "zero_last" and last):
                w[:] = 0.0
                b[:] = 0.0
            self.weights.append(w)
            self.biases.append(b)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise InvalidInputError("parameter vector has the wrong length")
        pos = 0
        for i, w in enumerate(self.weights):
            n = w.size
            self.weights[i] = flat[pos:pos + n].reshape(w.shape).copy()
            pos += n
            m = self.biases[i].size
            self.biases[i] = flat[pos:pos + m].copy()
            pos += m

    def copy(self) -> "Mlp":
        other = Mlp(self.sizes, self.seed, "zero")
        other.set_flat(self.get_flat())
        return other

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise InvalidInputError(f"expected inputs of shape (N, {self.n_in}), got {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        return self.forward_cache(x)[0]

    __call__ = forward

    def forward_cache(self, x):
        h = self._check(x)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Reverse pass: ``(flat parameter gradient, input gradient)``."""
        g = np.asarray(grad_out, dtype=np.float64)
        last = len(self.weights) - 1
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(last, -1, -1):
            if i < last:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts.append(gw.ravel())
            parts.append(gb)
        return np.concatenate(parts), g


def grad(net: Mlp, loss: Callable[[np.ndarray], tuple[float, np.ndarray]], inputs) -> np.ndarray:
    """Exact gradient of ``loss(net(inputs))`` w.r.t. the flat parameters.

    ``loss`` maps the output array to ``(value, d value / d outputs)``.
    """
    out, acts = net.forward_cache(inputs)
    _, g_out = loss(out)
    return net.backward(acts, g_out)[0]


# --------------------------------------------------------------------------
# identity features


def identity_features(color: GeomImage, mask: GeomImage | None = None) -> GeomImage:
    """Fixed per-pixel descriptor: RGB, luminance gradients, normalized (u, v), mask."""
    rgb = color.data[:, :, :3]
    h, w = rgb.shape[:2]
    lum = rgb @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(lum) if min(h, w) > 1 else (np.zeros((h, w)), np.zeros((h, w)))
    uu = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    vv = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    m = np.ones((h, w)) if mask is None else mask.plane()
    feat = np.concatenate([
        rgb, gx[..., None], gy[..., None],
        np.broadcast_to(uu[None, :, None], (h, w, 1)),
        np.broadcast_to(vv[:, None, None], (h, w, 1)),
        m[..., None],
    ], axis=2)
    return GeomImage(feat, ImageKind.FEATURE)


def cell_features(features: GeomImage, cells: np.ndarray) -> np.ndarray:
    return features.data.reshape(-1, features.channels)[cells]


def _check_grid(cloud: GridPointCloud, features: GeomImage) -> None:
    if features.shape[:2] != cloud.valid.shape:
        raise InvalidInputError(
            f"feature raster {features.shape[:2]} does not match grid {cloud.valid.shape}"
        )


# --------------------------------------------------------------------------
# geometry stages


def refine_inputs(P_c: GridPointCloud, features: GeomImage) -> np.ndarray:
    _check_grid(P_c, features)
    return np.hstack([P_c.points(), cell_features(features, P_c.cell_indices())])


def refine_geometry(P_c: GridPointCloud, features: GeomImage, net: Mlp) -> GridPointCloud:
    """Add the network's per-cell offset to every valid point."""
    x = refine_inputs(P_c, features)
    if x.shape[1] != net.n_in or net.n_out != 3:
        raise InvalidInputError("refine network dims do not match [position; feature] -> 3")
    return P_c.with_points(P_c.points() + net(x))


def deform_inputs(P: GridPointCloud, beta_d: ExpressionCoeffs, beta_s: ExpressionCoeffs):
    if beta_d.dim != beta_s.dim:
        raise InvalidInputError("driving and source expressions differ in dimension")
    pts = P.points()
    n = len(pts)
    return np.hstack([pts, np.broadcast_to(beta_d.values, (n, beta_d.dim)),
                      np.broadcast_to(beta_s.values, (n, beta_s.dim))])


def deform(P: GridPointCloud, beta_d: ExpressionCoeffs, beta_s: ExpressionCoeffs,
           net: Mlp) -> GridPointCloud:
    """Expression-driven residual displacement of every valid point."""
    x = deform_inputs(P, beta_d, beta_s)
    if x.shape[1] != net.n_in or net.n_out != 3:
        raise InvalidInputError("deform network dims do not match [position; beta_d; beta_s] -> 3")
    return P.with_points(P.points() + net(x))


# --------------------------------------------------------------------------
# Gaussian decoders


def visible_inputs(P_d: GridPointCloud, F: GeomImage) -> np.ndarray:
    _check_grid(P_d, F)
    return np.hstack([P_d.points(), cell_features(F, P_d.cell_indices())])


def parse_visible(raw: np.ndarray, positions: np.ndarray, cells: np.ndarray) -> GaussianCloud:
    """Split raw 20-wide decoder rows into Gaussian parameters."""
    quat = raw[:, ROT] + np.array([1.0, 0.0, 0.0, 0.0])
    norm = np.linalg.norm(quat, axis=1, keepdims=True)
    degenerate = norm[:, 0] == 0
    quat = np.where(degenerate[:, None], np.array([1.0, 0.0, 0.0, 0.0]),
                    quat / np.where(norm == 0, 1.0, norm))
    return GaussianCloud(
        positions, quat, raw[:, SCALE], raw[:, OPACITY][:, 0], raw[:, COLOR],
        np.full(len(positions), Provenance.VISIBLE), cells,
    )


def decode_visible(P_d: GridPointCloud, F: GeomImage, net: Mlp,
                   prior: np.ndarray | None = None) -> GaussianCloud:
    """Gaussians for the visible cells; positions are the points themselves.

    ``prior`` is an optional ``(N, 20)`` array added to the network output
    before parsing (for example log scales from point spacing and colors
    from the source pixels).
    """
    x = visible_inputs(P_d, F)
    if x.shape[1] != net.n_in or net.n_out != DECODE_OUT:
        raise InvalidInputError("decoder dims do not match [position; F] -> 20")
    raw = net(x)
    if prior is not None:
        raw = raw + prior
    return parse_visible(raw, P_d.points(), P_d.cell_indices())


@dataclass
class SymDecoders:
    """Offset networks for the scale, rotation, color and opacity families."""

    scale: Mlp
    rotation: Mlp
    color: Mlp
    opacity: Mlp

    def items(self):
        return [("scale", self.scale), ("rotation", self.rotation),
                ("color", self.color), ("opacity", self.opacity)]


def anchor_params(G_d: GaussianCloud) -> dict[str, np.ndarray]:
    return {
        "scale": G_d.log_scales, "rotation": G_d.rotations,
        "color": G_d.colors, "opacity": G_d.opacity_logits[:, None],
    }


def symmetric_correspondence(G_d: GaussianCloud, P_ds: GridPointCloud):
    """Rows of G_d matching each valid mirrored cell, plus the skip mask."""
    cells = P_ds.cell_indices()
    lookup = -np.ones(P_ds.height * P_ds.width, dtype=np.int64)
    ok = (G_d.grid_index >= 0) & (G_d.grid_index < len(lookup))
    lookup[G_d.grid_index[ok]] = np.flatnonzero(ok)
    rows = lookup[cells]
    return cells, rows, rows >= 0


def symmetric_inputs(positions, feats, anchor) -> np.ndarray:
    return np.hstack([positions, feats, anchor])


def decode_symmetric(G_d: GaussianCloud, F: GeomImage, P_ds: GridPointCloud, nets: SymDecoders,
                     return_skipped: bool = False):
    """Gaussians for the mirrored cells as offsets from their visible twins.

    The twin of a mirrored cell is the visible Gaussian with the same grid
    index. Every family is ``anchor + net([position; F(cell); anchor])``;
    rotations are stored un-normalized so zero offsets copy bits exactly.
    """
    if len(G_d) == 0:
        raise InvalidInputError("visible Gaussians are required")
    _check_grid(P_ds, F)
    cells, rows, found = symmetric_correspondence(G_d, P_ds)
    skipped = int((~found).sum())
    if skipped:
        logger.warning("sym decoder: %d mirrored cells have no visible source; skipped", skipped)
    cells, rows = cells[found], rows[found]
    positions = P_ds.points()[found]
    feats = cell_features(F, cells)
    anchors = anchor_params(G_d)
    params = {}
    for family, net in nets.items():
        anchor = anchors[family][rows]
        x = symmetric_inputs(positions, feats, anchor)
        if x.shape[1] != net.n_in or net.n_out != FAMILY_DIMS[family]:
            raise InvalidInputError(f"sym {family} network dims do not match")
        params[family] = anchor + net(x)
    cloud = GaussianCloud(
        positions, params["rotation"], params["scale"], params["opacity"][:, 0], params["color"],
        np.full(len(positions), Provenance.SYMMETRIC), cells,
    )
    return (cloud, skipped) if return_skipped else cloud


# --------------------------------------------------------------------------
# bundle + checkpoints


@dataclass
class RegressorBundle:
    refine: Mlp
    deform: Mlp
    decode: Mlp
    sym: SymDecoders

    @classmethod
    def create(cls, feature_channels: int = FEATURE_CHANNELS, expression_dim: int = 64,
               hidden: int = 32, seed: int = 0, init: str = "zero_last") -> "RegressorBundle":
        c = feature_channels
        sym_in = 3 + c
        return cls(
            refine=Mlp([3 + c, hidden, 3], seed, init),
            deform=Mlp([3 + 2 * expression_dim, hidden, 3], seed + 1, init),
            decode=Mlp([3 + c, hidden, DECODE_OUT], seed + 2, init),
            sym=SymDecoders(
                scale=Mlp([sym_in + 3, hidden, 3], seed + 3, init),
                rotation=Mlp([sym_in + 4, hidden, 4], seed + 4, init),
                color=Mlp([sym_in + 12, hidden, 12], seed + 5, init),
                opacity=Mlp([sym_in + 1, hidden, 1], seed + 6, init),
            ),
        )

    def named(self) -> list[tuple[str, Mlp]]:
        return [("refine", self.refine), ("deform", self.deform), ("decode", self.decode)] + [
            (f"sym_{name}", net) for name, net in self.sym.items()
        ]

    def save(self, path) -> None:
        save_checkpoint(path, dict(self.named()))

    @classmethod
    def load(cls, path) -> "RegressorBundle":
        nets = load_checkpoint(path)
        try:
            return cls(nets["refine"], nets["deform"], nets["decode"], SymDecoders(
                nets["sym_scale"], nets["sym_rotation"], nets["sym_color"], nets["sym_opacity"]))
        except KeyError as exc:
            raise InvalidInputError(f"checkpoint is missing network {exc}") from None


CHECKPOINT_MAGIC = "splathead-mlp-v1"


def save_checkpoint(path, nets: dict[str, Mlp]) -> None:
    """One JSON header line, then all parameters as little-endian float64."""
    header = {"format": CHECKPOINT_MAGIC, "nets": [
        {"name": name, "sizes": net.sizes, "seed": net.seed, "count": net.num_params}
        for name, net in nets.items()
    ]}
    payload = np.concatenate([net.get_flat() for net in nets.values()]) if nets else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, Mlp]:
    blob = Path(path).read_bytes()
    line, sep, rest = blob.partition(b"\n")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"bad checkpoint header: {exc}") from None
    if not sep or header.get("format") != CHECKPOINT_MAGIC:
        raise InvalidInputError("not a splathead checkpoint")
    flat = np.frombuffer(rest, dtype="<f8")
    total = sum(entry["count"] for entry in header["nets"])
    if len(rest) != 8 * total:
        raise InvalidInputError(f"checkpoint payload holds {len(rest)} bytes, expected {8 * total}")
    nets = {}
    pos = 0
    for entry in header["nets"]:
        net = Mlp(entry["sizes"], entry["seed"], "zero")
        if net.num_params != entry["count"]:
            raise InvalidInputError(f"parameter count mismatch for {entry['name']}")
        net.set_flat(flat[pos:pos + entry["count"]].astype(np.float64))
        pos += entry["count"]
        nets[entry["name"]] = net
    return nets
