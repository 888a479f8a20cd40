"""``mei3d`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .deformation import FieldError, RbfField, deform
from .mesh import Mesh, ObjParseError, save_obj
from .models import ModelError
from .optim import (FitRecord, OptimizationError, evaluate_response, fit_mesh_chamfer, synthesize_mei,
                    write_trace)
from .renderer import DegenerateImageError, Renderer, RenderError, write_image
from .sweeps import export_heatmap, sweep_light, sweep_pose, write_exemplars

log = logging.getLogger("mei3d")


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


def _versions() -> dict:
    return {"mei3d": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def _set_threads(args, cfg: RunConfig) -> None:
    threads = args.threads
    deterministic = args.deterministic or cfg.deterministic or threads == 1
    if deterministic:
        threads = 1
    if threads is not None:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be a non-negative integer")
        cfg.seed = args.seed
        cfg.optimizer.seed = args.seed
        if cfg.fit is not None:
            cfg.fit.seed = args.seed
    out = Path(args.out) if args.out else cfg.default_output()
    out.mkdir(parents=True, exist_ok=True)
    _set_threads(args, cfg)
    return cfg, out


def _manifest(cfg: RunConfig, out: Path, command: str, **extra) -> None:
    data = {
        "command": command,
        "config_path": str(cfg.path),
        "config": cfg.raw,
        "seed": cfg.seed,
        "deterministic": bool(cfg.deterministic),
        "threads": torch.get_num_threads(),
        "versions": _versions(),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _load_field(path, base: Mesh) -> RbfField:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"field file not found: {p}")
    try:
        field = RbfField.load(p)
    except (FieldError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read field file {p}: {exc}") from exc
    if len(field.centers) != base.n_vertices:
        raise UsageError(f"field has {len(field.centers)} kernels but the mesh has {base.n_vertices} vertices")
    return field


def _require_model(cfg: RunConfig):
    model = cfg.build_model()
    if model is None:
        raise ConfigError("model: this command needs a response model")
    return model


# ---------------------------------------------------------------- commands


def cmd_synthesize(args) -> int:
    cfg, out = _prepare(args)
    base = cfg.build_mesh()
    model = _require_model(cfg)
    opt = cfg.optimizer
    if opt.snapshot_every:
        opt.snapshot_dir = str(out / "snapshots")
    try:
        res = synthesize_mei(base, cfg.scene, model, opt)
    finally:
        model.close()
    res.field.save(out / "field.json")
    save_obj(res.mesh.as_mesh(), out / "mesh.obj")
    write_image(res.image, out / "image.pgm", window="minmax")
    write_image(res.image, out / "image.png", window="minmax")
    write_image(Renderer(base).render(res.mesh.vertices, cfg.scene), out / "render.pgm")
    write_trace(res.trace, out / "trace.csv")
    _manifest(cfg, out, "synthesize", final_response=res.response, steps=res.trace[-1].step,
              converged=res.converged)
    print(f"final response {res.response!r} after {res.trace[-1].step} steps -> {out}")
    return 0


def cmd_fit_mesh(args) -> int:
    cfg, out = _prepare(args)
    if cfg.fit is None:
        raise ConfigError("fit: section missing")
    source = cfg.build_mesh()
    target = cfg.build_mesh(cfg.fit_target, where="fit.target")
    res = fit_mesh_chamfer(source, target, cfg.fit)
    res.field.save(out / "field.json")
    save_obj(res.mesh.as_mesh(), out / "fitted.obj")
    write_trace(res.trace, out / "chamfer_trace.csv", fields=FitRecord.FIELDS)
    _manifest(cfg, out, "fit-mesh", initial_chamfer=res.initial_chamfer, final_chamfer=res.final_chamfer,
              ratio=res.final_chamfer / res.initial_chamfer if res.initial_chamfer > 0 else 0.0)
    print(f"chamfer {res.initial_chamfer!r} -> {res.final_chamfer!r} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _prepare(args)
    base = cfg.build_mesh()
    field = _load_field(args.field, base) if args.field else None
    mesh = deform(base, field) if field is not None else base
    model = _require_model(cfg)
    try:
        if args.pose:
            grid = sweep_pose(mesh, cfg.scene, model, cfg.pose["azimuths"], cfg.pose["elevations"],
                              cfg.normalization)
            export_heatmap(grid, out / "pose.csv")
        else:
            n_ex = args.exemplars if args.exemplars is not None else cfg.light["exemplars"]
            grid = sweep_light(mesh, cfg.scene, model, cfg.light["azimuths"], cfg.light["elevations"],
                               cfg.light.get("radius"), cfg.normalization, n_exemplars=n_ex)
            export_heatmap(grid, out / "dome.csv")
            write_exemplars(grid, out / "dome")
    except ValueError as exc:
        if isinstance(exc, (RenderError, ModelError)):
            raise
        raise ConfigError(f"sweep: {exc}") from exc
    finally:
        model.close()
    _manifest(cfg, out, "sweep-pose" if args.pose else "sweep-light",
              field=str(Path(args.field).resolve()) if args.field else None)
    print(f"sweep written to {out}")
    return 0


def cmd_render(args) -> int:
    cfg, out = _prepare(args)
    base = cfg.build_mesh()
    field = _load_field(args.field, base) if args.field else None
    verts = deform(base, field).vertices if field is not None else base.vertices
    renderer = Renderer(base)
    write_image(renderer.render(verts, cfg.scene), out / "render.pgm")
    model = cfg.build_model()
    response = None
    if model is not None:
        try:
            response, image = evaluate_response(verts, cfg.scene, model, cfg.normalization, renderer)
        finally:
            model.close()
        write_image(image, out / "image.pgm", window="minmax")
        print(f"response {response!r}")
    _manifest(cfg, out, "render", response=response,
              field=str(Path(args.field).resolve()) if args.field else None)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out", help="output directory (default: config output_dir, else "
                                      "$MEI3D_OUTPUT_ROOT/<config name>, else runs/<config name>)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="torch intra-op threads; 1 implies deterministic mode")
    common.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mei3d", description="Maximally exciting 3D mesh stimuli.")
    p.add_argument("--version", action="version", version=f"mei3d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synthesize", parents=[common], help="optimise a mesh deformation against a model") \
        .set_defaults(func=cmd_synthesize)
    sub.add_parser("fit-mesh", parents=[common], help="deform a source mesh onto a target by Chamfer loss") \
        .set_defaults(func=cmd_fit_mesh)

    sw = sub.add_parser("sweep", parents=[common], help="pose or light sweep around a stimulus")
    mode = sw.add_mutually_exclusive_group(required=True)
    mode.add_argument("--pose", action="store_true")
    mode.add_argument("--light", action="store_true")
    sw.add_argument("--field", help="saved deformation field (default: undeformed mesh)")
    sw.add_argument("--exemplars", type=int, help="renders to keep per tertile (light sweep)")
    sw.set_defaults(func=cmd_sweep)

    rd = sub.add_parser("render", parents=[common], help="render once and print the model response")
    rd.add_argument("--field", help="saved deformation field")
    rd.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("mei3d: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, UsageError, ObjParseError) as exc:
        print(f"mei3d: error: {exc}", file=sys.stderr)
        return 2
    except OptimizationError as exc:
        print(f"mei3d: optimisation failed at step {exc.step}: {exc}", file=sys.stderr)
        return 1
    except (RenderError, ModelError, DegenerateImageError, FieldError, OSError, RuntimeError, ValueError) as exc:
        print(f"mei3d: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
