"""Strict YAML run configuration.

Unknown keys are rejected; relative paths resolve against the config file's
directory. Angles for Gabor orientation/phase are in degrees.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .mesh import Mesh, load_obj, make_ellipsoid, make_sheet, make_sphere, make_torus
from .models import ComplexCell, ExternalModel, GaborFilter, ResponseModel, SimpleCell
from .optim import FitConfig, OptimizationConfig
from .regularizers import RegularizerWeights
from .renderer import NormalizationSpec, Scene

OUTPUT_ROOT_ENV = "MEI3D_OUTPUT_ROOT"

TOP_KEYS = {"seed", "deterministic", "output_dir", "scene", "normalization", "mesh", "model", "optimizer",
            "regularizers", "fit", "sweep"}
MESH_KEYS = {
    "sheet": {"nx", "ny", "extent"},
    "sphere": {"subdivisions", "radius"},
    "torus": {"major_r", "minor_r", "n_major", "n_minor"},
    "ellipsoid": {"axes", "subdivisions"},
    "obj": {"path", "scale"},
    "bunny": {"scale"},
}
MODEL_KEYS = {
    "simple": {"orientation_deg", "frequency", "phase_deg", "sigma", "center", "amplitude", "norm_budget"},
    "complex": {"orientation_deg", "frequency", "phase_deg", "sigma", "center", "amplitude", "norm_budget"},
    "external": {"command", "timeout"},
}
OPTIMIZER_KEYS = {"max_steps", "lr", "init_scale", "init_offset_std", "optimize_scales", "snapshot_every",
                  "convergence_window", "convergence_threshold"}
FIT_KEYS = {"target", "max_steps", "lr", "n_samples", "n_eval_samples", "eval_every", "init_scale", "nn_method"}
POSE_KEYS = {"azimuths", "elevations"}
LIGHT_KEYS = {"azimuths", "elevations", "radius", "exemplars"}


class ConfigError(ValueError):
    pass


def _check_keys(section: Any, allowed: set[str], where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    return section


def _build(cls, section: dict, where: str, **extra):
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _angles(spec, where: str) -> np.ndarray | None:
    if spec is None:
        return None
    if isinstance(spec, dict):
        _check_keys(spec, {"start", "stop", "step"}, where)
        try:
            start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        except KeyError as exc:
            raise ConfigError(f"{where}.{exc.args[0]}: missing") from None
        if step <= 0:
            raise ConfigError(f"{where}.step: must be > 0")
        return np.arange(start, stop + step / 2, step)
    if isinstance(spec, list) and all(isinstance(x, (int, float)) for x in spec):
        return np.array(spec, dtype=np.float64)
    raise ConfigError(f"{where}: expected a list of angles or {{start, stop, step}}")


@dataclass
class RunConfig:
    path: Path
    raw: dict
    seed: int = 0
    deterministic: bool = True
    output_dir: Path | None = None
    scene: Scene = field(default_factory=Scene)
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    mesh: dict = field(default_factory=lambda: {"kind": "sheet"})
    model: dict | None = None
    optimizer: OptimizationConfig = field(default_factory=OptimizationConfig)
    fit: FitConfig | None = None
    fit_target: dict | None = None
    pose: dict = field(default_factory=dict)
    light: dict = field(default_factory=dict)

    @property
    def directory(self) -> Path:
        return self.path.parent

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.directory / p).resolve()

    def default_output(self) -> Path:
        if self.output_dir is not None:
            return self.output_dir
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root or "runs") / self.path.stem

    # -------------------------------------------------------- builders

    def build_mesh(self, spec: dict | None = None, where: str = "mesh") -> Mesh:
        return build_mesh(spec if spec is not None else self.mesh, self, where)

    def build_model(self) -> ResponseModel | None:
        if self.model is None:
            return None
        return build_model(self.model, self.scene, self)


def build_mesh(spec: dict, cfg: RunConfig, where: str = "mesh") -> Mesh:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in MESH_KEYS:
        raise ConfigError(f"{where}.kind: expected one of {sorted(MESH_KEYS)}, got {kind!r}")
    _check_keys(spec, MESH_KEYS[kind], where)
    try:
        if kind == "sheet":
            return make_sheet(**spec)
        if kind == "sphere":
            return make_sphere(**spec)
        if kind == "torus":
            return make_torus(**spec)
        if kind == "ellipsoid":
            return make_ellipsoid(**spec)
        scale = float(spec.pop("scale", 1.0))
        if kind == "bunny":
            with resources.as_file(resources.files("mei3d") / "data" / "bunny_lowpoly.obj") as p:
                m = load_obj(p)
        else:
            if "path" not in spec:
                raise ConfigError(f"{where}.path: missing")
            p = cfg.resolve(spec["path"])
            if not p.is_file():
                raise ConfigError(f"{where}.path: no such file {p}")
            m = load_obj(p)
        return Mesh(m.vertices * scale, m.faces)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build_model(spec: dict, scene: Scene, cfg: RunConfig | None = None) -> ResponseModel:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "external":
        if "command" not in spec:
            raise ConfigError("model.command: missing")
        cwd = cfg.directory if cfg is not None else None
        return ExternalModel(spec["command"], timeout=float(spec.get("timeout", 60.0)), cwd=cwd)
    budget = float(spec.pop("norm_budget", 25.0))
    g = {}
    if "orientation_deg" in spec:
        g["orientation"] = math.radians(float(spec.pop("orientation_deg")))
    if "phase_deg" in spec:
        g["phase"] = math.radians(float(spec.pop("phase_deg")))
    if "center" in spec:
        g["center"] = tuple(float(x) for x in spec.pop("center"))
    g.update(spec)
    gabor = _build(GaborFilter, g, "model")
    cls = SimpleCell if kind == "simple" else ComplexCell
    return cls(gabor, scene.width, scene.height, norm_budget=budget)


def load_config(path) -> RunConfig:
    path = Path(path).resolve()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    _check_keys(raw, TOP_KEYS, "config")
    cfg = RunConfig(path=path, raw=raw)

    if "seed" in raw:
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed: must be a non-negative integer")
        cfg.seed = raw["seed"]
    if "deterministic" in raw:
        cfg.deterministic = bool(raw["deterministic"])
    if "output_dir" in raw:
        cfg.output_dir = cfg.resolve(raw["output_dir"])

    scene = dict(_check_keys(raw.get("scene"), {f.name for f in dataclasses.fields(Scene)}, "scene"))
    cfg.scene = _build(Scene, scene, "scene")
    norm = _check_keys(raw.get("normalization"), {f.name for f in dataclasses.fields(NormalizationSpec)},
                       "normalization")
    cfg.normalization = _build(NormalizationSpec, norm, "normalization")

    mesh = raw.get("mesh", {"kind": "sheet"})
    if not isinstance(mesh, dict) or mesh.get("kind") not in MESH_KEYS:
        raise ConfigError(f"mesh.kind: expected one of {sorted(MESH_KEYS)}")
    _check_keys({k: v for k, v in mesh.items() if k != "kind"}, MESH_KEYS[mesh["kind"]], "mesh")
    cfg.mesh = mesh

    if raw.get("model") is not None:
        model = raw["model"]
        if not isinstance(model, dict) or model.get("kind") not in MODEL_KEYS:
            raise ConfigError(f"model.kind: expected one of {sorted(MODEL_KEYS)}")
        _check_keys({k: v for k, v in model.items() if k != "kind"}, MODEL_KEYS[model["kind"]], "model")
        if model["kind"] != "external":
            build_model(model, cfg.scene)  # validate early
        cfg.model = model

    regs = _check_keys(raw.get("regularizers"), {"lap", "edge", "area", "arap"}, "regularizers")
    for k, v in regs.items():
        if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
            raise ConfigError(f"regularizers.{k}: weight must be a finite number >= 0, got {v!r}")
    weights = _build(RegularizerWeights, regs, "regularizers")
    opt = _check_keys(raw.get("optimizer"), OPTIMIZER_KEYS, "optimizer")
    cfg.optimizer = _build(OptimizationConfig, opt, "optimizer", weights=weights, seed=cfg.seed,
                           normalization=cfg.normalization)

    if raw.get("fit") is not None:
        fit = dict(_check_keys(raw["fit"], FIT_KEYS, "fit"))
        target = fit.pop("target", None)
        if target is None:
            raise ConfigError("fit.target: missing")
        if not isinstance(target, dict) or target.get("kind") not in MESH_KEYS:
            raise ConfigError(f"fit.target.kind: expected one of {sorted(MESH_KEYS)}")
        _check_keys({k: v for k, v in target.items() if k != "kind"}, MESH_KEYS[target["kind"]], "fit.target")
        cfg.fit_target = target
        cfg.fit = _build(FitConfig, fit, "fit", weights=weights, seed=cfg.seed)

    sweep = _check_keys(raw.get("sweep"), {"pose", "light"}, "sweep")
    pose = _check_keys(sweep.get("pose"), POSE_KEYS, "sweep.pose")
    cfg.pose = {k: _angles(pose.get(k), f"sweep.pose.{k}") for k in POSE_KEYS}
    light = _check_keys(sweep.get("light"), LIGHT_KEYS, "sweep.light")
    cfg.light = {k: _angles(light.get(k), f"sweep.light.{k}") for k in ("azimuths", "elevations")}
    if light.get("radius") is not None:
        r = float(light["radius"])
        if not r > 0:
            raise ConfigError("sweep.light.radius: must be > 0")
        cfg.light["radius"] = r
    ex = light.get("exemplars", 0)
    if not isinstance(ex, int) or ex < 0:
        raise ConfigError("sweep.light.exemplars: must be a non-negative integer")
    cfg.light["exemplars"] = ex
    return cfg
