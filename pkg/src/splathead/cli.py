"""Command line front end.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 I/O failure.
Failures print one JSON object ``{"error": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .core import ExpressionCoeffs, GeomImage, ImageKind, yaw_camera
from .errors import InvalidInputError, NumericalError
from .fit import LossConfig, PipelineModel, fit_scene, psnr, ssim, write_trace_csv
from .io import (
    PipelineConfig, StorageError, load_config, read_camera, read_gaussian_ply, read_pfm,
    read_png, read_points_ply, save_config, write_gaussian_ply, write_json, write_pfm, write_png,
    write_points_ply,
)
from .pipeline import Geometry, ViewBundle, decode_cloud, final_cloud, run_pipeline, source_prior
from .regressors import RegressorBundle, deform, identity_features, refine_geometry
from .renderer import render
from .surface_recon import reconstruct
from .symmetry import symmetric_complete
from .synth import synth_scene

logger = logging.getLogger("splathead")

PSNR_INF_SENTINEL = 999.0

EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


# --------------------------------------------------------------------------
# helpers


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
        cfg.loss.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    return out


def _bundle(cfg: PipelineConfig, checkpoint) -> RegressorBundle:
    if checkpoint:
        return RegressorBundle.load(checkpoint)
    return RegressorBundle.create(expression_dim=cfg.expression_dim, hidden=cfg.hidden,
                                  seed=cfg.seed, init=cfg.net_init)


def _expression(path, dim) -> ExpressionCoeffs:
    if not path:
        return ExpressionCoeffs.zeros(dim)
    try:
        values = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path} is not valid JSON: {exc}") from None
    coeffs = ExpressionCoeffs(np.asarray(values, dtype=np.float64))
    if coeffs.dim != dim:
        raise InvalidInputError(f"expression in {path} has {coeffs.dim} values, expected {dim}")
    return coeffs


def _read_image(path) -> np.ndarray:
    if str(path).lower().endswith(".pfm"):
        return read_pfm(path).data
    return read_png(path)


def _color(path) -> GeomImage:
    data = _read_image(path)
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return GeomImage(np.clip(data[:, :, :3], 0.0, 1.0), ImageKind.COLOR)


def _yaws(text: str) -> list[float]:
    try:
        yaws = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidInputError(f"bad --yaw list {text!r}") from None
    if not yaws:
        raise InvalidInputError("--yaw needs at least one angle")
    return yaws


def _yaw_tag(yaw: float) -> str:
    return f"yaw{yaw:+g}"


def _load_view(directory) -> ViewBundle:
    d = Path(directory)
    return ViewBundle(
        read_camera(d / "camera.json"),
        read_pfm(d / "color.pfm", ImageKind.COLOR),
        read_pfm(d / "depth.pfm", ImageKind.DEPTH),
        read_pfm(d / "normal.pfm", ImageKind.NORMAL),
        read_pfm(d / "mask.pfm", ImageKind.MASK),
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: PipelineConfig) -> dict:
    out = _out_dir(args)
    camera = yaw_camera(cfg.synth.camera(), args.yaw)
    color, depth, normal, mask = synth_scene(cfg.synth, camera)
    write_pfm(out / "color.pfm", color)
    write_pfm(out / "depth.pfm", depth)
    write_pfm(out / "normal.pfm", normal)
    write_pfm(out / "mask.pfm", mask)
    write_png(out / "color.png", color)
    write_png(out / "mask.png", mask)
    write_json(out / "camera.json", camera.to_dict())
    return {"pixels": int(mask.data.sum()), "out_dir": str(out)}


def cmd_recon(args, cfg: PipelineConfig) -> dict:
    out = _out_dir(args)
    depth = read_pfm(args.depth, ImageKind.DEPTH)
    normal = read_pfm(args.normal, ImageKind.NORMAL)
    mask = read_pfm(args.mask, ImageKind.MASK)
    camera = read_camera(args.camera)
    P = reconstruct(depth, normal, mask, camera, cfg.bini)
    if args.checkpoint:
        if not args.color:
            raise InvalidInputError("--checkpoint refinement needs --color for the feature map")
        features = identity_features(_color(args.color), mask)
        P = refine_geometry(P, features, RegressorBundle.load(args.checkpoint).refine)
    write_points_ply(out / "P_f.ply", P)
    return {"points": P.count}


def cmd_mirror(args, cfg: PipelineConfig) -> dict:
    out = _out_dir(args)
    P_f = read_points_ply(args.points)
    _, P_fs, report = symmetric_complete(P_f, cfg.voxel)
    write_points_ply(out / "P_fs.ply", P_fs)
    write_json(out / "filter_report.json", report.to_dict())
    return report.to_dict()


def cmd_decode(args, cfg: PipelineConfig) -> dict:
    out = _out_dir(args)
    bundle = _bundle(cfg, args.checkpoint)
    dim = bundle.deform.n_in // 2 - 1
    beta_d = _expression(args.beta_d, dim)
    beta_s = _expression(args.beta_s, dim)
    P_f = read_points_ply(args.points)
    P_fs = read_points_ply(args.sym) if args.sym else None
    color = _color(args.color)
    mask = read_pfm(args.mask, ImageKind.MASK) if args.mask else GeomImage.mask(P_f.valid[..., None])
    if color.shape[:2] != P_f.valid.shape:
        raise InvalidInputError("color image and point grid differ in size")
    features = identity_features(color, mask)
    P_d = deform(P_f, beta_d, beta_s, bundle.deform)
    P_ds = deform(P_fs, beta_d, beta_s, bundle.deform) if P_fs is not None else None
    geometry = Geometry(P_f, P_d, P_ds, None)
    prior = source_prior(P_d, color, cfg.opacity, cfg.scale_factor)
    cloud = decode_cloud(bundle, geometry, features, prior)
    write_gaussian_ply(out / "gaussians.ply", cloud)
    n_sym = len(cloud) - P_d.count
    return {"gaussians": len(cloud), "visible": P_d.count, "symmetric": n_sym}


def _composite(image: np.ndarray, alpha: np.ndarray, bg_path) -> np.ndarray:
    bg = _read_image(bg_path)
    if bg.shape[:2] != image.shape[:2]:
        raise InvalidInputError(f"background is {bg.shape[:2]}, frames are {image.shape[:2]}")
    if bg.shape[2] == 1:
        bg = np.repeat(bg, 3, axis=2)
    # the renderer output is premultiplied by alpha
    return image + (1.0 - alpha) * bg[:, :, :3]


def cmd_render(args, cfg: PipelineConfig) -> dict:
    out = _out_dir(args)
    cloud = read_gaussian_ply(args.gaussians)
    camera = read_camera(args.camera) if args.camera else cfg.make_camera()
    if not args.no_densify:
        cloud = final_cloud(cloud)
    frames = []
    # frames render one after another; each render is internally parallel
    for yaw in _yaws(args.yaw):
        result = render(cloud, yaw_camera(camera, yaw))
        image, alpha = result.color.data, result.alpha.data
        if args.composite:
            image = _composite(image, alpha, args.composite)
        tag = _yaw_tag(yaw)
        write_png(out / f"frame_{tag}.png", image)
        write_pfm(out / f"alpha_{tag}.pfm", alpha)
        frames.append(tag)
    return {"frames": frames, "gaussians": len(cloud)}


def cmd_fit(args, cfg: PipelineConfig) -> dict:
    out = _out_dir(args)
    if not args.scene:
        raise InvalidInputError("fit needs at least one --scene directory")
    targets = []
    for d in args.scene:
        d = Path(d)
        targets.append((read_camera(d / "camera.json"), read_pfm(d / "color.pfm", ImageKind.COLOR)))
    loss_cfg = cfg.loss
    if args.steps is not None:
        loss_cfg = LossConfig(**{**vars(loss_cfg), "steps": args.steps})
    if args.gaussians:
        result = fit_scene(read_gaussian_ply(args.gaussians), targets, loss_cfg)
        write_gaussian_ply(out / "fitted.ply", result.model)
    elif args.source:
        view = _load_view(args.source)
        bundle = _bundle(cfg, args.checkpoint)
        base = run_pipeline(view, bundle, cfg.bini, cfg.voxel, opacity=cfg.opacity,
                            scale_factor=cfg.scale_factor)
        g = base.geometry
        model = PipelineModel(bundle, g.P_d, base.features, g.P_ds, base.prior)
        result = fit_scene(model, targets, loss_cfg)
        result.model.save(out / "checkpoint.bin")
        write_gaussian_ply(out / "fitted.ply", model.build())
    else:
        raise InvalidInputError("fit needs --gaussians or --source")
    write_trace_csv(out / "loss_trace.csv", result.trace)
    return {"initial_loss": result.initial_loss, "final_loss": result.final_loss,
            "steps": len(result.trace) - 1}


def cmd_eval(args, cfg: PipelineConfig) -> dict:
    a = _read_image(args.image_a)
    b = _read_image(args.image_b)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    value = psnr(a, b)
    report = {
        "psnr": PSNR_INF_SENTINEL if math.isinf(value) else value,
        "ssim": ssim(a, b, cfg.loss),
    }
    if args.out_dir is not None:
        write_json(_out_dir(args) / "eval.json", report)
    return report


# --------------------------------------------------------------------------
# parser + entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every config seed")
    common.add_argument("--config", default=None, help="pipeline config JSON")
    common.add_argument("--out-dir", default=None,
                        help="output directory (default: current; eval writes no file unless given)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="splathead", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic head bundle")
    p.add_argument("--yaw", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("recon", parents=[common], help="depth + normals + mask -> P_f.ply")
    p.add_argument("--depth", required=True)
    p.add_argument("--normal", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--color", help="source color (needed with --checkpoint)")
    p.add_argument("--checkpoint", help="regressor checkpoint for refinement")
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("mirror", parents=[common], help="P_f.ply -> P_fs.ply + filter report")
    p.add_argument("--points", required=True)
    p.set_defaults(func=cmd_mirror)

    p = sub.add_parser("decode", parents=[common], help="point clouds + image -> gaussians.ply")
    p.add_argument("--points", required=True, help="visible cloud P_f")
    p.add_argument("--sym", help="mirrored cloud P_fs")
    p.add_argument("--color", required=True)
    p.add_argument("--mask")
    p.add_argument("--checkpoint")
    p.add_argument("--beta-d", help="JSON list of driving expression coefficients")
    p.add_argument("--beta-s", help="JSON list of source expression coefficients")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", parents=[common], help="gaussians.ply -> PNG frames + alpha PFM")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--camera", help="camera JSON (default: config camera)")
    p.add_argument("--yaw", default="0", help="comma-separated yaw angles in degrees")
    p.add_argument("--composite", help="background image to alpha-over")
    p.add_argument("--no-densify", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", parents=[common], help="fit colors/opacities or regressors to views")
    p.add_argument("--scene", action="append", help="target bundle directory (repeatable)")
    p.add_argument("--gaussians", help="initial cloud to optimize directly")
    p.add_argument("--source", help="source bundle directory for pipeline fitting")
    p.add_argument("--checkpoint", help="initial regressors for pipeline fitting")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("config", parents=[common], help="write the effective config JSON")
    p.set_defaults(func=cmd_config)
    return parser


def cmd_config(args, cfg: PipelineConfig) -> dict:
    path = _out_dir(args) / "config.json"
    save_config(path, cfg)
    return {"config": str(path)}


def _fail(code: int, exc: Exception) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        report = args.func(args, cfg)
    except StorageError as exc:
        return _fail(EXIT_IO, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except InvalidInputError as exc:
        return _fail(EXIT_INVALID, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    print(json.dumps(report, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
