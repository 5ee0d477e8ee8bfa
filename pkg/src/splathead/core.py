"""Domain types, rotation math and the pinhole camera model.

Conventions: right-handed frames, cameras look down +z with y pointing down
so that camera y follows pixel rows. Camera rotation/translation map world
points into the camera frame, ``x_cam = R @ x_world + t``. Pixel ``(u, v)``
has its center at ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, InvalidInputError

Z_NEAR = 1e-4
DEFAULT_EXPRESSION_DIM = 64


class ImageKind(enum.Enum):
    DEPTH = "depth"
    NORMAL = "normal"
    COLOR = "color"
    FEATURE = "feature"
    MASK = "mask"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GeomImage:
    """A float raster stored as an ``(height, width, channels)`` array."""

    data: np.ndarray
    kind: ImageKind = ImageKind.FEATURE

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise InvalidInputError(f"raster must be 2D or 3D, got shape {data.shape}")
        if self.kind is ImageKind.MASK:
            if data.shape[2] != 1:
                raise InvalidInputError("mask rasters have one channel")
            if not np.all((data == 0.0) | (data == 1.0)):
                raise InvalidInputError("mask values must be 0 or 1")
        elif self.kind is ImageKind.DEPTH and data.shape[2] != 1:
            raise InvalidInputError("depth rasters have one channel")
        elif self.kind is ImageKind.NORMAL:
            if data.shape[2] != 3:
                raise InvalidInputError("normal rasters have three channels")
            norm = np.linalg.norm(data, axis=2)
            valid = norm > 0
            if np.any(np.abs(norm[valid] - 1.0) > 1e-5):
                raise InvalidInputError("normal raster contains non-unit vectors")
        elif self.kind is ImageKind.COLOR and data.shape[2] != 3:
            raise InvalidInputError("color rasters have three channels")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def plane(self) -> np.ndarray:
        """Single-channel rasters as a 2D array."""
        if self.channels != 1:
            raise InvalidInputError("plane() needs a single-channel raster")
        return self.data[:, :, 0]

    @classmethod
    def mask(cls, values) -> "GeomImage":
        return cls(np.asarray(values, dtype=np.float64), ImageKind.MASK)


@dataclass(frozen=True, eq=False)
class GridPointCloud:
    """3D points laid out on the pixel grid they came from.

    ``positions`` has shape ``(height, width, 3)`` and ``valid`` shape
    ``(height, width)``. Cells are addressed by their row-major flat index.
    """

    positions: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if pos.ndim != 3 or pos.shape[2] != 3 or valid.shape != pos.shape[:2]:
            raise InvalidInputError(
                f"bad grid cloud shapes: positions {pos.shape}, valid {valid.shape}"
            )
        if not np.all(np.isfinite(pos[valid])):
            raise InvalidInputError("valid cells must hold finite positions")
        # invalid cells carry zeros so that equality checks stay meaningful
        pos = np.where(valid[:, :, None], pos, 0.0)
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    def cell_indices(self) -> np.ndarray:
        """Flat indices of the valid cells, ascending."""
        return np.flatnonzero(self.valid.ravel())

    def points(self) -> np.ndarray:
        """Valid positions as an ``(N, 3)`` array in cell order."""
        return self.positions.reshape(-1, 3)[self.cell_indices()]

    def with_points(self, points: np.ndarray) -> "GridPointCloud":
        """Copy with the valid cells' positions replaced (same order as points())."""
        pos = self.positions.reshape(-1, 3).copy()
        pos[self.cell_indices()] = points
        return GridPointCloud(pos.reshape(self.height, self.width, 3), self.valid)

    @classmethod
    def from_points(cls, points, cells, height: int, width: int) -> "GridPointCloud":
        pos = np.zeros((height * width, 3))
        valid = np.zeros(height * width, dtype=bool)
        cells = np.asarray(cells, dtype=np.int64)
        pos[cells] = points
        valid[cells] = True
        return cls(pos.reshape(height, width, 3), valid.reshape(height, width))


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def normalized(self) -> "Quaternion":
        q = self.as_array()
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise InvalidInputError("cannot normalize a zero or non-finite quaternion")
        return Quaternion(*(q / n))

    def to_matrix(self) -> np.ndarray:
        return quat_to_rotation(self)

    @classmethod
    def from_matrix(cls, rot: np.ndarray) -> "Quaternion":
        x, y, z, w = Rotation.from_matrix(np.asarray(rot, dtype=np.float64)).as_quat()
        if w < 0:
            w, x, y, z = -w, -x, -y, -z
        return cls(float(w), float(x), float(y), float(z))


def quats_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batch version of :func:`quat_to_rotation` for ``(N, 4)`` wxyz arrays."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise InvalidInputError("zero-norm or non-finite quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion."""
    arr = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=np.float64)
    if arr.shape != (4,):
        raise InvalidInputError("expected a single wxyz quaternion")
    return quats_to_rotations(arr[None])[0]


def rotation_y(degrees: float) -> np.ndarray:
    """Rotation about the world y axis (the vertical axis, pointing down)."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: Quaternion = field(default_factory=Quaternion)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "rotation", self.rotation.normalized())

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotation(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.R

    def replace(self, **changes) -> "Camera":
        fields = dict(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, rotation=self.rotation,
            translation=self.translation, width=self.width, height=self.height,
        )
        fields.update(changes)
        return Camera(**fields)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "rotation": [float(v) for v in self.rotation.as_array()],
            "translation": [float(v) for v in self.translation],
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        known = {"fx", "fy", "cx", "cy", "rotation", "translation", "width", "height"}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown camera keys: {sorted(unknown)}")
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            rotation=Quaternion(*map(float, d.get("rotation", (1.0, 0.0, 0.0, 0.0)))),
            translation=np.asarray(d.get("translation", (0.0, 0.0, 0.0)), dtype=np.float64),
            width=int(d.get("width", 256)), height=int(d.get("height", 256)),
        )

    @classmethod
    def looking_at_origin(cls, distance: float, width: int, height: int, fov_degrees: float = 30.0):
        """Frontal camera on the -z axis looking at the world origin."""
        f = 0.5 * width / math.tan(math.radians(fov_degrees) / 2)
        return cls(f, f, width / 2, height / 2, Quaternion(), np.array([0.0, 0.0, distance]),
                   width, height)


@dataclass(frozen=True, eq=False)
class ExpressionCoeffs:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("expression coefficients must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, dim: int = DEFAULT_EXPRESSION_DIM) -> "ExpressionCoeffs":
        return cls(np.zeros(dim))


def project(camera: Camera, p, z_near: float = Z_NEAR):
    """Project world point(s) to ``(u, v, depth)``.

    Accepts a single 3-vector (returns a tuple of floats) or an ``(N, 3)``
    array (returns three arrays).
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    cam = camera.world_to_camera(np.atleast_2d(pts))
    z = cam[:, 2]
    if np.any(~(z > z_near)):
        raise BehindCameraError(f"point(s) at or behind the near plane z={z_near}")
    u = camera.fx * cam[:, 0] / z + camera.cx
    v = camera.fy * cam[:, 1] / z + camera.cy
    if single:
        return float(u[0]), float(v[0]), float(z[0])
    return u, v, z


def unproject(camera: Camera, u, v, depth):
    """Inverse of :func:`project`: pixel coordinates plus camera-z to world point(s)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise InvalidInputError("unproject needs positive depth")
    x = (u - camera.cx) / camera.fx * d
    y = (v - camera.cy) / camera.fy * d
    cam = np.stack(np.broadcast_arrays(x, y, d), axis=-1)
    return camera.camera_to_world(cam)


def yaw_camera(base: Camera, yaw: float, pivot=(0.0, 0.0, 0.0)) -> Camera:
    """Orbit a camera about the vertical axis through ``pivot`` by ``yaw`` degrees.

    Positive yaw moves the camera center from -z toward -x for a camera in
    front of the pivot (it then sees more of the scene's -x side).
    """
    if not abs(yaw) <= 90.0:
        raise InvalidInputError(f"|yaw| must be <= 90 degrees, got {yaw}")
    if yaw == 0:
        return base
    pivot = np.asarray(pivot, dtype=np.float64)
    ry = rotation_y(yaw)
    rot = base.R @ ry.T
    center = pivot + ry @ (base.center - pivot)
    return base.replace(rotation=Quaternion.from_matrix(rot), translation=-rot @ center)
