"""Procedural head-like scenes: a sphere-traced SDF rendered to depth, normal and color.

The head is an ellipsoid smoothly joined with spherical bumps (ears, nose)
plus an optional low-amplitude sinusoidal perturbation that breaks the
left/right symmetry. World frame: x to the head's side, y down, z away from
a frontal camera (the face looks toward -z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GeomImage, ImageKind, yaw_camera
from .errors import InvalidInputError

MAX_STEPS = 256
SURFACE_EPS = 1e-5
FAR = 100.0
NORMAL_H = 1e-4
LIGHT_DIR = np.array([0.0, -0.5, -1.0]) / math.sqrt(1.25)  # on the x = 0 plane

SKIN = (0.85, 0.62, 0.50)
HAIR = (0.25, 0.16, 0.10)
EAR = (0.80, 0.50, 0.45)


@dataclass
class Bump:
    center: tuple[float, float, float]
    radius: float
    side: str = "center"  # "left" (x < 0), "right" (x > 0) or "center"

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        if len(self.center) != 3:
            raise InvalidInputError("bump center must have three coordinates")
        self.radius = float(self.radius)


def _default_ears():
    return [Bump((-0.8, 0.05, 0.05), 0.2, "left"), Bump((0.8, 0.05, 0.05), 0.2, "right")]


@dataclass
class SynthConfig:
    radii: tuple[float, float, float] = (0.8, 1.0, 0.9)
    ears: list[Bump] = field(default_factory=_default_ears)
    nose: Bump | None = field(default_factory=lambda: Bump((0.0, 0.1, -0.88), 0.15))
    asymmetry: float = 0.0
    image_size: int = 128
    camera_distance: float = 4.0
    fov_degrees: float = 40.0
    seed: int = 0
    mirrored: bool = False  # evaluate the perturbation at (-x, y, z)

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        self.ears = [b if isinstance(b, Bump) else Bump(**b) for b in self.ears]
        if isinstance(self.nose, dict):
            self.nose = Bump(**self.nose)
        if len(self.radii) != 3 or min(self.radii) <= 0:
            raise InvalidInputError("head radii must be three positive numbers")
        for b in self.bumps():
            if not 0 < b.radius < min(self.radii):
                raise InvalidInputError("bump radii must be positive and smaller than the head radii")
            if b.side not in ("left", "right", "center"):
                raise InvalidInputError(f"unknown bump side {b.side!r}")
        if self.asymmetry < 0:
            raise InvalidInputError("asymmetry amplitude must be >= 0")
        if self.image_size <= 0:
            raise InvalidInputError("image_size must be positive")

    def bumps(self) -> list[Bump]:
        return list(self.ears) + ([self.nose] if self.nose is not None else [])

    def camera(self) -> Camera:
        """Frontal camera looking at the head center."""
        n = self.image_size
        return Camera.looking_at_origin(self.camera_distance, n, n, self.fov_degrees)


def mirror_config(cfg: SynthConfig) -> SynthConfig:
    """The x-mirrored scene (bump centers negated, sides swapped, perturbation mirrored)."""
    swap = {"left": "right", "right": "left", "center": "center"}

    def flip(b: Bump) -> Bump:
        x, y, z = b.center
        return Bump((-x, y, z), b.radius, swap[b.side])

    out = SynthConfig(cfg.radii, [flip(b) for b in cfg.ears],
                      flip(cfg.nose) if cfg.nose is not None else None, cfg.asymmetry,
                      cfg.image_size, cfg.camera_distance, cfg.fov_degrees, cfg.seed,
                      not cfg.mirrored)
    return out


def _smin(a, b, k):
    h = np.maximum(k - np.abs(a - b), 0.0) / k
    return np.minimum(a, b) - h * h * k * 0.25


def _ellipsoid(p, radii):
    r = np.asarray(radii)
    k0 = np.linalg.norm(p / r, axis=1)
    k1 = np.linalg.norm(p / (r * r), axis=1)
    return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)


def _perturbation_waves(cfg: SynthConfig):
    rng = np.random.default_rng(cfg.seed)
    freqs = rng.uniform(2.0, 5.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    phases = rng.uniform(0.0, 2 * math.pi, size=3)
    return freqs, phases


def sdf(cfg: SynthConfig, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance (approximate) and region label per point.

    Labels: 0 head, 1 + i for bump ``i`` of :meth:`SynthConfig.bumps`.
    """
    p = np.asarray(p, dtype=np.float64)
    d = _ellipsoid(p, cfg.radii)
    label = np.zeros(len(p), dtype=np.int64)
    k = 0.05 * min(cfg.radii)
    best = d.copy()
    for i, b in enumerate(cfg.bumps()):
        db = np.linalg.norm(p - np.asarray(b.center), axis=1) - b.radius
        closer = db < best
        label[closer] = i + 1
        best = np.minimum(best, db)
        d = _smin(d, db, k)
    if cfg.asymmetry > 0:
        freqs, phases = _perturbation_waves(cfg)
        q = p.copy()
        if cfg.mirrored:
            q[:, 0] = -q[:, 0]
        d = d + cfg.asymmetry * np.sin(q @ freqs.T + phases).sum(axis=1) / 3.0
    return d, label


def _lipschitz(cfg: SynthConfig) -> float:
    if cfg.asymmetry == 0:
        return 1.0
    freqs, _ = _perturbation_waves(cfg)
    return 1.0 + cfg.asymmetry * float(np.linalg.norm(freqs, axis=1).mean())


def _normals(cfg: SynthConfig, p: np.ndarray) -> np.ndarray:
    g = np.zeros_like(p)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = NORMAL_H
        g[:, axis] = (sdf(cfg, p + e)[0] - sdf(cfg, p - e)[0]) / (2 * NORMAL_H)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _albedo(cfg: SynthConfig, p: np.ndarray, label: np.ndarray) -> np.ndarray:
    out = np.tile(np.asarray(SKIN), (len(p), 1))
    n_ears = len(cfg.ears)
    is_ear = (label >= 1) & (label <= n_ears)
    out[is_ear] = EAR
    b = cfg.radii[1]
    hair = ((p[:, 1] < -0.45 * b) | (p[:, 2] > 0.35 * cfg.radii[2])) & ~is_ear
    out[hair] = HAIR
    return out


def trace(cfg: SynthConfig, origins: np.ndarray, dirs: np.ndarray):
    """Sphere tracing; returns ``(t, hit)`` per ray."""
    n = len(dirs)
    origins = np.broadcast_to(origins, (n, 3))
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    step_scale = 1.0 / _lipschitz(cfg)
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d, _ = sdf(cfg, origins[idx] + t[idx, None] * dirs[idx])
        done = d < SURFACE_EPS
        hit[idx[done]] = True
        t[idx[~done]] += step_scale * d[~done]
        gone = t[idx] > FAR
        active[idx[done | gone]] = False
    return t, hit


def synth_scene(cfg: SynthConfig, camera: Camera | None = None):
    """Render ``(color, depth, normal, mask)`` images of the scene.

    Depth is camera z of the first hit, normals are unit SDF gradients in
    the camera frame and color is albedo under Lambert shading with a fixed
    light lying on the x = 0 plane. Missed pixels are zero everywhere.
    """
    camera = camera or cfg.camera()
    w, h = camera.width, camera.height
    center = camera.center
    d0 = np.linalg.norm(center)
    if sdf(cfg, center[None])[0][0] <= 0 or d0 == 0:
        raise InvalidInputError("camera must be outside the surface")
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    cam_dirs = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy,
                         np.ones_like(u)], axis=-1).reshape(-1, 3)
    world_dirs = cam_dirs @ camera.R  # R^T applied to each row
    world_dirs /= np.linalg.norm(world_dirs, axis=1, keepdims=True)
    t, hit = trace(cfg, center, world_dirs)
    pts = center + t[hit, None] * world_dirs[hit]
    n_world = _normals(cfg, pts)
    _, label = sdf(cfg, pts)
    shade = 0.3 + 0.7 * np.maximum(n_world @ LIGHT_DIR, 0.0)
    rgb = np.clip(_albedo(cfg, pts, label) * shade[:, None], 0.0, 1.0)

    color = np.zeros((h * w, 3))
    depth = np.zeros((h * w, 1))
    normal = np.zeros((h * w, 3))
    color[hit] = rgb
    depth[hit, 0] = camera.world_to_camera(pts)[:, 2]
    n_cam = n_world @ camera.R.T
    normal[hit] = n_cam / np.linalg.norm(n_cam, axis=1, keepdims=True)
    mask = hit.astype(np.float64).reshape(h, w, 1)
    return (
        GeomImage(color.reshape(h, w, 3), ImageKind.COLOR),
        GeomImage(depth.reshape(h, w, 1), ImageKind.DEPTH),
        GeomImage(normal.reshape(h, w, 3), ImageKind.NORMAL),
        GeomImage(mask, ImageKind.MASK),
    )


def synth_profile_pair(cfg: SynthConfig, yaw: float, camera: Camera | None = None):
    """Scenes seen from ``yaw_camera(+yaw)`` and ``yaw_camera(-yaw)``.

    Each bundle is ``(camera, (color, depth, normal, mask))``.
    """
    base = camera or cfg.camera()
    out = []
    for angle in (yaw, -yaw):
        cam = yaw_camera(base, angle)
        out.append((cam, synth_scene(cfg, cam)))
    return tuple(out)
