"""The ``geodiff`` command.

Subcommands:

- ``checkpoint``: create (optionally toy-train) a model checkpoint
- ``invert``: invert an image once and save the trajectory for reuse
- ``preview``: geometry-only warp/disocclusion previews for a transform
- ``edit``: run a full edit; writes the report directory (images, CSV, figures)
- ``metric warp-error``: score an edited image against the commanded warp
- ``serve``: start the HTTP service the browser UI consumes

Exit codes: 0 success, 2 validation error, 3 runtime failure.  The model
checkpoint is found via --checkpoint or the GEODIFF_CHECKPOINT env var.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .geometry import EditTransform, GeometryError, build_field, rotation_from_axis_angle
from .pipeline import EditConfig, PipelineError, resolve_depth, run_edit, warp_error
from .raster import load_image, load_mask, load_pfm, save_image

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_VALIDATION):
        super().__init__(msg)
        self.code = code


def _checkpoint_path(args) -> str:
    path = args.checkpoint or os.environ.get("GEODIFF_CHECKPOINT")
    if not path:
        raise CliError("no checkpoint: pass --checkpoint or set GEODIFF_CHECKPOINT")
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    return path


def _load_model(args):
    from .diffnet import load_model

    return load_model(_checkpoint_path(args))


def _transform_from_args(args) -> EditTransform:
    """Build a transform from --transform JSON or from the flag shorthand."""
    if getattr(args, "transform", None):
        try:
            return EditTransform.from_json(json.loads(Path(args.transform).read_text())
                                           if Path(args.transform).exists()
                                           else args.transform)
        except (json.JSONDecodeError, GeometryError, KeyError, TypeError) as exc:
            raise CliError(f"bad transform: {exc}")
    kind = getattr(args, "kind", None)
    if kind is None:
        raise CliError("specify --kind or --transform")
    depth_source = _depth_source(args)
    try:
        if kind == "identity":
            return EditTransform(kind="identity")
        if kind == "remove":
            return EditTransform(kind="remove")
        if kind == "translate2d":
            return EditTransform(kind="translate2d", offset=(args.dx, args.dy))
        if kind == "scale2d":
            return EditTransform(kind="scale2d", scale2d=(args.sx, args.sy),
                                 pivot2d=(args.px, args.py))
        if kind in ("rotate3d", "rigid3d"):
            axis = {"x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1)}.get(args.axis)
            if axis is None:
                raise CliError(f"bad axis {args.axis!r} (use x, y, or z)")
            R = rotation_from_axis_angle(axis, args.angle)
            return EditTransform(kind="rigid3d", rotation=tuple(map(tuple, R.tolist())),
                                 translation=(args.tx, args.ty, args.tz),
                                 depth_source=depth_source)
        if kind == "translate3d":
            return EditTransform(kind="rigid3d", translation=(args.tx, args.ty, args.tz),
                                 depth_source=depth_source)
        if kind == "scale3d":
            return EditTransform(kind="scale3d", scale3d=(args.sx, args.sy, args.sz),
                                 depth_source=depth_source)
    except GeometryError as exc:
        raise CliError(str(exc))
    raise CliError(f"unknown kind {kind!r}")


def _depth_source(args) -> str:
    spec = getattr(args, "depth", None)
    if spec is None:
        return "constant:0.5"
    if spec.startswith("const:") or spec.startswith("constant:"):
        return "constant:" + spec.split(":", 1)[1]
    return "file"


def _load_depth(args, h, w):
    spec = getattr(args, "depth", None)
    if spec and not (spec.startswith("const:") or spec.startswith("constant:")):
        depth = load_pfm(spec)
        if depth.shape != (h, w):
            raise CliError(f"depth {depth.shape} does not match image {(h, w)}")
        return depth
    return None


# --- subcommand bodies -----------------------------------------------------


def cmd_checkpoint(args) -> int:
    from .diffnet import ModelConfig
    from .toytrain import make_checkpoint

    make_checkpoint(args.out, ModelConfig(), seed=args.seed,
                    train_steps=args.train_steps, log_every=args.log_every)
    print(f"wrote checkpoint {args.out} "
          f"({'trained ' + str(args.train_steps) + ' steps' if args.train_steps else 'random init'})")
    return EXIT_OK


def cmd_invert(args) -> int:
    from .pipeline import encode_image
    from .sampler import invert

    model, schedule = _load_model(args)
    image = load_image(args.image)
    z0 = encode_image(image, model.cfg.latent_size, model.cfg.latent_channels)
    traj = invert(model, schedule, z0, model.null_text.detach(), n_steps=args.steps)
    traj.save(args.out)
    print(f"inverted {args.image} in {args.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_preview(args) -> int:
    from . import report
    from .geometry import mask_algebra

    image = load_image(args.image)
    mask = load_mask(args.mask)
    h, w = image.shape[:2]
    transform = _transform_from_args(args)
    depth = _load_depth(args, h, w)
    if depth is None:
        depth = resolve_depth(transform, h, w, None)
    field = build_field(transform, h, w, depth)
    masks = mask_algebra(mask, field)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "warp_overlay.png", report.mask_overlay(image, masks.m_disocc))
    save_image(out / "m_obj_t.png", masks.m_obj_t[:, :, None])
    save_image(out / "m_disocc.png", masks.m_disocc[:, :, None])
    print(f"preview written to {out}/ "
          f"(transformed mask {int(masks.m_obj_t.sum())} px, "
          f"disocclusion {int(masks.m_disocc.sum())} px)")
    return EXIT_OK


def cmd_edit(args) -> int:
    from . import report
    from .sampler import Trajectory

    model, schedule = _load_model(args)
    image = load_image(args.image)
    mask = load_mask(args.mask)
    h, w = image.shape[:2]

    cfg_obj = {}
    if args.config:
        try:
            cfg_obj = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"bad config file: {exc}")
    if "transform" not in cfg_obj:
        cfg_obj["transform"] = _transform_from_args(args).to_json()
    if args.steps is not None:
        cfg_obj["steps"] = args.steps
        cfg_obj.setdefault("share_until_step", min(45, args.steps))
        cfg_obj.setdefault("optimize_first_n", min(32, args.steps))
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    if args.no_optimize:
        cfg_obj["optimization_enabled"] = False
    if args.no_share:
        cfg_obj["sharing_enabled"] = False
    if args.diagnostics:
        cfg_obj["diagnostics"] = True
    try:
        config = EditConfig.from_json(cfg_obj)
    except (PipelineError, GeometryError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid config: {exc}")

    depth = _load_depth(args, h, w)
    trajectory = Trajectory.load(args.trajectory) if args.trajectory else None

    def progress(done, total, rec):
        if args.verbose:
            print(f"\rstep {done}/{total}", end="", file=sys.stderr)

    try:
        result = run_edit(image, mask, config, model, schedule, depth=depth,
                          trajectory=trajectory, progress=progress)
    except PipelineError as exc:
        raise CliError(str(exc))
    if args.verbose:
        print(file=sys.stderr)
    paths = report.write_edit_report(result, image, args.out,
                                     config_json=config.to_json())
    we = result.warp_error_edited
    we_str = "undefined" if (isinstance(we, float) and math.isnan(we)) else f"{we:.4f}"
    print(f"edited image: {paths['edited.png']}")
    print(f"warp error: {we_str} (input anchor "
          f"{result.warp_error_input:.4f})" if not math.isnan(result.warp_error_input)
          else f"warp error: {we_str}")
    print(f"report: {args.out}/ (loss_curves.csv, loss_curves.png, summary.png)")
    return EXIT_OK


def cmd_metric_warp_error(args) -> int:
    image = load_image(args.input)
    edited = load_image(args.edited)
    mask = load_mask(args.mask)
    h, w = image.shape[:2]
    transform = _transform_from_args(args)
    depth = _load_depth(args, h, w)
    if depth is None:
        depth = resolve_depth(transform, h, w, None)
    field = build_field(transform, h, w, depth)
    value = warp_error(image, edited, mask, field)
    print("warp-error: " + ("undefined (empty transformed foreground)"
                            if math.isnan(value) else f"{value:.6f}"))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    model, schedule = _load_model(args)
    frontend = args.frontend
    if frontend is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend"
        frontend = str(candidate) if (candidate / "index.html").is_file() else None
    app = create_app(model, schedule, max_workers=args.workers, frontend_dir=frontend)
    print(f"serving on http://{args.host}:{args.port}"
          + (f" (UI at /app)" if frontend else ""))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_transform_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transform", help="transform JSON (inline or a file path)")
    p.add_argument("--kind", choices=["identity", "remove", "translate2d", "scale2d",
                                      "rotate3d", "rigid3d", "translate3d", "scale3d"])
    p.add_argument("--dx", type=float, default=0.0, help="2D offset x (px)")
    p.add_argument("--dy", type=float, default=0.0, help="2D offset y (px)")
    p.add_argument("--sx", type=float, default=1.0, help="scale factor x")
    p.add_argument("--sy", type=float, default=1.0, help="scale factor y")
    p.add_argument("--sz", type=float, default=1.0, help="scale factor z")
    p.add_argument("--px", type=float, default=0.0, help="2D pivot x (px)")
    p.add_argument("--py", type=float, default=0.0, help="2D pivot y (px)")
    p.add_argument("--axis", default="z", help="rotation axis: x, y, or z")
    p.add_argument("--angle", type=float, default=0.0, help="rotation angle (deg)")
    p.add_argument("--tx", type=float, default=0.0, help="3D translation x (m)")
    p.add_argument("--ty", type=float, default=0.0, help="3D translation y (m)")
    p.add_argument("--tz", type=float, default=0.0, help="3D translation z (m)")
    p.add_argument("--depth", help="depth source: a PFM path or const:<meters>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geodiff",
                                     description="geometry-driven image editing")
    parser.add_argument("--checkpoint", help="model checkpoint (.gdck); "
                        "defaults to $GEODIFF_CHECKPOINT")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("checkpoint", help="create a model checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--train-steps", type=int, default=1200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(fn=cmd_checkpoint)

    p = sub.add_parser("invert", help="invert an image, save the trajectory")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("preview", help="geometry-only warp preview")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    _add_transform_flags(p)
    p.set_defaults(fn=cmd_preview)

    p = sub.add_parser("edit", help="run a full edit and write its report")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="EditConfig JSON file")
    p.add_argument("--trajectory", help="reuse a saved inversion trajectory")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-optimize", action="store_true")
    p.add_argument("--no-share", action="store_true")
    p.add_argument("--diagnostics", action="store_true")
    p.add_argument("--verbose", action="store_true")
    _add_transform_flags(p)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("metric", help="editing metrics")
    msub = p.add_subparsers(dest="metric", required=True)
    m = msub.add_parser("warp-error", help="forward-warp agreement metric")
    m.add_argument("--input", required=True)
    m.add_argument("--edited", required=True)
    m.add_argument("--mask", required=True)
    _add_transform_flags(m)
    m.set_defaults(fn=cmd_metric_warp_error)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--frontend", help="directory of built UI assets to mount at /app")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (GeometryError, PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc, (GeometryError, ValueError)) else EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - unexpected failure path
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
