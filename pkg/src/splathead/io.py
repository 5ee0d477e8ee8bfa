"""File formats: PFM rasters, binary PLY clouds, PNG previews and the JSON pipeline config."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DEFAULT_EXPRESSION_DIM, Camera, GeomImage, GridPointCloud, ImageKind
from .errors import InvalidInputError, SplatHeadError
from .fit import LossConfig
from .gaussians import GaussianCloud
from .surface_recon import BiniConfig
from .symmetry import VoxelFilterConfig
from .synth import Bump, SynthConfig


class FormatError(InvalidInputError):
    """Malformed or truncated file contents."""


class StorageError(SplatHeadError, OSError):
    """The file system refused a read or write."""


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc.strerror or exc}") from None


def _write_bytes(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc.strerror or exc}") from None


# --------------------------------------------------------------------------
# PFM


def pfm_bytes(image: GeomImage | np.ndarray, little_endian: bool = True) -> bytes:
    data = image.data if isinstance(image, GeomImage) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3 or data.shape[2] not in (1, 3):
        raise InvalidInputError(f"PFM stores 1 or 3 channels, got shape {data.shape}")
    if np.isnan(data).any():
        raise InvalidInputError("NaN values cannot be written to PFM")
    h, w, c = data.shape
    tag = "PF" if c == 3 else "Pf"
    scale = -1.0 if little_endian else 1.0
    header = f"{tag}\n{w} {h}\n{scale}\n".encode("ascii")
    rows = np.ascontiguousarray(data[::-1].astype("<f4" if little_endian else ">f4"))
    return header + rows.tobytes()


def write_pfm(path, image: GeomImage | np.ndarray, little_endian: bool = True) -> None:
    _write_bytes(path, pfm_bytes(image, little_endian))


_PFM_HEADER = re.compile(rb"\A(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def parse_pfm(blob: bytes) -> np.ndarray:
    """Decode PFM bytes to an ``(H, W, C)`` float64 array."""
    m = _PFM_HEADER.match(blob)
    if not m:
        raise FormatError("malformed PFM header")
    c = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError("malformed PFM scale") from None
    if scale == 0 or w <= 0 or h <= 0:
        raise FormatError("PFM size and scale must be nonzero")
    payload = blob[m.end():]
    need = 4 * w * h * c
    if len(payload) < need:
        raise FormatError(f"truncated PFM payload: {len(payload)} of {need} bytes")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[:need], dtype=dtype).reshape(h, w, c)[::-1]
    return data.astype(np.float64)


def read_pfm(path, kind: ImageKind | None = None) -> GeomImage:
    """Read a PFM file; 1-channel defaults to DEPTH and 3-channel to COLOR."""
    data = parse_pfm(_read_bytes(path))
    if kind is None:
        kind = ImageKind.DEPTH if data.shape[2] == 1 else ImageKind.COLOR
    return GeomImage(data, kind)


# --------------------------------------------------------------------------
# PNG previews


def write_png(path, image: GeomImage | np.ndarray) -> None:
    from PIL import Image

    data = image.data if isinstance(image, GeomImage) else np.asarray(image, dtype=np.float64)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    px = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(px).save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from None


def read_png(path) -> np.ndarray:
    """8-bit PNG as floats in [0, 1]; RGBA keeps its alpha channel."""
    from PIL import Image

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB", "RGBA"):
                img = img.convert("RGBA" if "A" in img.mode else "RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from None
    return arr[:, :, None] if arr.ndim == 2 else arr


# --------------------------------------------------------------------------
# PLY

PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
    "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2",
    "uint16": "u2", "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}

GAUSSIAN_FLOATS = (
    ["x", "y", "z"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    + ["opacity"] + [f"f_dc_{i}" for i in range(3)] + [f"f_rest_{i}" for i in range(9)]
)


def _rest_index(ch: int, k: int) -> int:
    # channel-major layout of the higher-order coefficients (k = 1..3)
    return ch * 3 + (k - 1)


def _ply_header(count: int, props: list[tuple[str, str]], comments=()) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {count}")
    lines += [f"property {t} {name}" for name, t in props]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _parse_ply(blob: bytes):
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    payload = blob[end + len(b"end_header\n"):]
    count = None
    props = []
    comments = []
    fmt = None
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1:]
        elif parts[0] == "comment":
            comments.append(" ".join(parts[1:]))
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is not None or int(parts[2]) != 0:
                raise FormatError(f"unsupported PLY element {parts[1]!r}")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list" or parts[1] not in PLY_TYPES:
                raise FormatError(f"unsupported PLY property type {parts[1]!r}")
            props.append((parts[2], "<" + PLY_TYPES[parts[1]]))
    if fmt != ["binary_little_endian", "1.0"]:
        raise FormatError("only binary_little_endian 1.0 PLY is supported")
    if count is None:
        raise FormatError("PLY has no vertex element")
    dtype = np.dtype(props)
    need = dtype.itemsize * count
    if len(payload) != need:
        raise FormatError(f"PLY vertex count mismatch: payload {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=dtype, count=count), comments


def _require(rec, names):
    missing = [n for n in names if n not in rec.dtype.names]
    if missing:
        raise FormatError(f"PLY is missing properties {missing}")


def gaussian_ply_bytes(cloud: GaussianCloud) -> bytes:
    props = [(n, "float") for n in GAUSSIAN_FLOATS] + [("provenance", "uchar"), ("grid_index", "int")]
    dtype = np.dtype([(n, "<f4") for n in GAUSSIAN_FLOATS] + [("provenance", "u1"), ("grid_index", "<i4")])
    rec = np.zeros(len(cloud), dtype=dtype)
    for i, axis in enumerate("xyz"):
        rec[axis] = cloud.positions[:, i]
    for i in range(3):
        rec[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i]
    rec["opacity"] = cloud.opacity_logits
    for ch in range(3):
        rec[f"f_dc_{ch}"] = cloud.colors[:, ch]
        for k in range(1, 4):
            rec[f"f_rest_{_rest_index(ch, k)}"] = cloud.colors[:, 3 * k + ch]
    rec["provenance"] = cloud.provenance
    rec["grid_index"] = cloud.grid_index
    return _ply_header(len(cloud), props) + rec.tobytes()


def write_gaussian_ply(path, cloud: GaussianCloud) -> None:
    _write_bytes(path, gaussian_ply_bytes(cloud))


def read_gaussian_ply(path) -> GaussianCloud:
    rec, _ = _parse_ply(_read_bytes(path))
    _require(rec, GAUSSIAN_FLOATS + ["provenance"])
    n = len(rec)

    def col(name):
        return rec[name].astype(np.float64)

    colors = np.zeros((n, 12))
    for ch in range(3):
        colors[:, ch] = col(f"f_dc_{ch}")
        for k in range(1, 4):
            colors[:, 3 * k + ch] = col(f"f_rest_{_rest_index(ch, k)}")
    grid = rec["grid_index"].astype(np.int64) if "grid_index" in rec.dtype.names else np.full(n, -1)
    return GaussianCloud(
        np.column_stack([col(a) for a in "xyz"]),
        np.column_stack([col(f"rot_{i}") for i in range(4)]),
        np.column_stack([col(f"scale_{i}") for i in range(3)]),
        col("opacity"), colors, rec["provenance"].astype(np.int64), grid,
    )


def points_ply_bytes(cloud: GridPointCloud) -> bytes:
    props = [("x", "float"), ("y", "float"), ("z", "float"), ("grid_index", "int")]
    rec = np.zeros(cloud.count, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("grid_index", "<i4")])
    pts = cloud.points()
    for i, axis in enumerate("xyz"):
        rec[axis] = pts[:, i]
    rec["grid_index"] = cloud.cell_indices()
    return _ply_header(cloud.count, props, [f"grid_size {cloud.height} {cloud.width}"]) + rec.tobytes()


def write_points_ply(path, cloud: GridPointCloud) -> None:
    _write_bytes(path, points_ply_bytes(cloud))


def read_points_ply(path) -> GridPointCloud:
    rec, comments = _parse_ply(_read_bytes(path))
    _require(rec, ["x", "y", "z", "grid_index"])
    size = [c.split()[1:] for c in comments if c.startswith("grid_size")]
    if not size or len(size[0]) != 2:
        raise FormatError("point PLY lacks a 'grid_size H W' comment")
    h, w = int(size[0][0]), int(size[0][1])
    pts = np.column_stack([rec[a].astype(np.float64) for a in "xyz"])
    return GridPointCloud.from_points(pts, rec["grid_index"].astype(np.int64), h, w)


# --------------------------------------------------------------------------
# pipeline config


def _default_camera() -> dict:
    return SynthConfig().camera().to_dict()


@dataclass
class PipelineConfig:
    bini: BiniConfig = field(default_factory=BiniConfig)
    voxel: VoxelFilterConfig = field(default_factory=VoxelFilterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    camera: dict = field(default_factory=_default_camera)
    expression_dim: int = DEFAULT_EXPRESSION_DIM
    hidden: int = 32
    net_init: str = "zero_last"
    seed: int = 0
    source_yaw: float = 40.0
    opacity: float = 0.95
    scale_factor: float = 1.0

    def __post_init__(self):
        Camera.from_dict(self.camera)  # validate early
        if self.expression_dim < 1 or self.hidden < 1:
            raise InvalidInputError("expression_dim and hidden must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise InvalidInputError("opacity must lie in (0, 1)")
        if not self.scale_factor > 0:
            raise InvalidInputError("scale_factor must be positive")

    def make_camera(self) -> Camera:
        return Camera.from_dict(self.camera)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise InvalidInputError("config must be a JSON object")
        nested = {"bini": BiniConfig, "voxel": VoxelFilterConfig, "loss": LossConfig,
                  "synth": SynthConfig}
        kwargs = _check_keys(cls, d, "config")
        for key, sub in nested.items():
            if key in kwargs:
                kwargs[key] = _build(sub, kwargs[key], key)
        return cls(**kwargs)


def _check_keys(cls, d, where):
    if not isinstance(d, dict):
        raise InvalidInputError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {unknown}")
    return dict(d)


def _build(cls, d, where):
    kwargs = _check_keys(cls, d, where)
    if cls is SynthConfig:
        if "ears" in kwargs:
            kwargs["ears"] = [Bump(**_check_keys(Bump, e, f"{where}.ears")) for e in kwargs["ears"]]
        if kwargs.get("nose") is not None:
            kwargs["nose"] = Bump(**_check_keys(Bump, kwargs["nose"], f"{where}.nose"))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"bad value in {where}: {exc}") from None


def load_config(path) -> PipelineConfig:
    try:
        d = json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"config {path} is not valid JSON: {exc}") from None
    return PipelineConfig.from_dict(d)


def config_json(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def save_config(path, cfg: PipelineConfig) -> None:
    _write_bytes(path, config_json(cfg).encode("utf-8"))


def write_json(path, obj) -> None:
    _write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_camera(path) -> Camera:
    try:
        d = json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"camera {path} is not valid JSON: {exc}") from None
    try:
        return Camera.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"bad camera file {path}: {exc}") from None
