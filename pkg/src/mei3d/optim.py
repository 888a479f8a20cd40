"""Adam, gradient checking, loss assembly and the two optimisation loops.

The objective for stimulus synthesis is

    total = -f(normalize(render(deform(base; offsets, log_scales))))
            + lap * L_lap + edge * L_edge + area * L_area + arap * L_arap

and the mesh-fitting loop swaps -f(...) for a Chamfer loss against a target.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .deformation import DeformedMesh, RbfField, displacement_torch, squared_distances
from .mesh import Mesh, build_topology
from .models import ResponseModel, model_response
from .regularizers import (
    ReferenceGeometry,
    RegularizerWeights,
    arap_loss,
    area_loss,
    chamfer_loss,
    edge_loss,
    laplacian_loss,
    sample_barycentric,
)
from .renderer import NormalizationSpec, Renderer, Scene, normalize_torch, write_image

log = logging.getLogger(__name__)

REG_NAMES = ("lap", "edge", "area", "arap")


class OptimizationError(RuntimeError):
    def __init__(self, msg: str, last_good: RbfField | None = None, step: int | None = None):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


# ---------------------------------------------------------------- Adam


class Adam:
    """Bias-corrected Adam over a dict of float64 numpy arrays, updated in place."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise OptimizationError(f"gradient for {k!r} has shape {g.shape}, parameter has {params[k].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.flatnonzero(~np.isfinite(g.ravel()))[0])
                raise OptimizationError(f"non-finite gradient for {k!r} at flat index {bad}", step=self.t)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------- gradient checks


@dataclass
class GradCheck:
    max_rel_error: float
    index: int
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradients(fn: Callable, point, h: float = 1e-5, grad: Callable | None = None,
                    floor_ratio: float = 1e-3) -> GradCheck:
    """Compare a reverse-mode gradient with central differences, coordinate by coordinate.

    ``fn`` maps a 1-D float64 tensor to a scalar tensor. Without ``grad`` the
    analytic gradient comes from autograd through ``fn``. The per-coordinate
    error is |a - n| / max(|a|, |n|, floor_ratio * max|n|), so coordinates with
    negligible gradient are judged against the overall gradient scale.
    """
    x0 = torch.from_numpy(np.array(point, dtype=np.float64))
    if grad is not None:
        analytic = np.asarray(grad(x0.clone()), dtype=np.float64).ravel()
    else:
        x = x0.clone().requires_grad_(True)
        y = fn(x)
        (g,) = torch.autograd.grad(y, x, allow_unused=True)
        analytic = np.zeros(x0.numel()) if g is None else g.detach().numpy().ravel().copy()
    numeric = np.empty(x0.numel())
    with torch.no_grad():
        for i in range(x0.numel()):
            xp, xm = x0.clone(), x0.clone()
            xp.view(-1)[i] += h
            xm.view(-1)[i] -= h
            fp, fm = float(fn(xp)), float(fn(xm))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise OptimizationError(f"non-finite evaluation at coordinate {i}")
            # the representable step, not 2h, is what separates the two samples
            numeric[i] = (fp - fm) / float(xp.view(-1)[i] - xm.view(-1)[i])
    floor = max(floor_ratio * float(np.abs(numeric).max(initial=0.0)), 1e-300)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / den
    i = int(np.argmax(rel)) if len(rel) else 0
    return GradCheck(float(rel[i]) if len(rel) else 0.0, i, analytic, numeric)


# ---------------------------------------------------------------- configs and traces


@dataclass
class OptimizationConfig:
    max_steps: int = 2000
    lr: float = 0.01
    weights: RegularizerWeights = field(default_factory=RegularizerWeights)
    seed: int = 0
    init_scale: float | None = None  # kernel sigma at start; None -> mean edge length
    init_offset_std: float = 0.0  # seeded noise on the starting offsets
    optimize_scales: bool = True
    snapshot_every: int = 0
    snapshot_dir: str | None = None
    convergence_window: int = 100
    convergence_threshold: float = 1e-4
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")
        if self.init_offset_std < 0:
            raise ValueError("init_offset_std must be >= 0")
        if self.convergence_window < 1:
            raise ValueError("convergence_window must be >= 1")


@dataclass
class TraceRecord:
    step: int
    response: float
    lap: float
    edge: float
    area: float
    arap: float
    total: float
    offset_norm: float
    mean_sigma: float

    FIELDS = ("step", "response", "lap", "edge", "area", "arap", "total", "offset_norm", "mean_sigma")

    def row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else f"{x:.17g}"


def write_trace(records, path, fields=None) -> None:
    fields = fields or type(records[0]).FIELDS
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in fields])


# ---------------------------------------------------------------- pipeline


class Pipeline:
    """Everything fixed during one optimisation: base mesh, topology, scene, model."""

    def __init__(self, base: Mesh, scene: Scene, model: ResponseModel | None,
                 weights: RegularizerWeights = RegularizerWeights(),
                 normalization: NormalizationSpec = NormalizationSpec(), centers: np.ndarray | None = None):
        self.base = base
        self.scene = scene
        self.model = model
        self.weights = weights
        self.normalization = normalization
        self.topo = build_topology(base)
        self.ref = ReferenceGeometry.from_mesh(base, self.topo)
        self.renderer = Renderer(base, self.topo)
        self.centers = base.vertices if centers is None else np.asarray(centers, dtype=np.float64)
        self._base_t = torch.from_numpy(base.vertices.copy())
        self._d2 = torch.from_numpy(squared_distances(base.vertices, self.centers))

    def vertices(self, offsets: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
        return self._base_t + displacement_torch(self._d2, offsets, log_scales)

    def regularizers(self, verts: torch.Tensor) -> dict[str, torch.Tensor]:
        return {
            "lap": laplacian_loss(verts, self.topo),
            "edge": edge_loss(verts, self.topo),
            "area": area_loss(verts, self.base.faces),
            "arap": arap_loss(verts, self.ref, self.topo),
        }

    def image(self, verts: torch.Tensor, light: torch.Tensor | None = None) -> torch.Tensor:
        return normalize_torch(self.renderer.render_torch(verts, self.scene, light), self.normalization)

    def regularized(self, verts: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        regs = self.regularizers(verts)
        pen = sum(getattr(self.weights, k) * regs[k] for k in REG_NAMES)
        return pen, regs

    def total_loss(self, offsets: torch.Tensor, log_scales: torch.Tensor):
        """(total, response, regularizer dict, normalised image) as tensors."""
        verts = self.vertices(offsets, log_scales)
        if not torch.isfinite(verts).all():
            raise OptimizationError("deformed mesh has non-finite vertices")
        img = self.image(verts)
        r = model_response(img, self.model)
        pen, regs = self.regularized(verts)
        total = -r + pen
        for name, val in [("response", r), *regs.items()]:
            if not math.isfinite(float(val.detach())):
                raise OptimizationError(f"non-finite {name} term in total loss")
        return total, r, regs, img


def evaluate_response(vertices, scene: Scene, model: ResponseModel,
                      normalization: NormalizationSpec = NormalizationSpec(), renderer: Renderer | None = None,
                      faces=None) -> tuple[float, np.ndarray]:
    """Render + normalise + respond without gradients. Shared by synthesis, sweeps and the CLI."""
    if renderer is None:
        if faces is None:
            raise ValueError("evaluate_response needs a renderer or the face list")
        renderer = Renderer(faces)
    with torch.no_grad():
        v = torch.from_numpy(np.array(vertices, dtype=np.float64))
        img = normalize_torch(renderer.render_torch(v, scene), normalization).numpy()
    return float(model.respond(img)), img


def total_loss(field: RbfField, base: Mesh, scene: Scene, model: ResponseModel,
               weights: RegularizerWeights, normalization: NormalizationSpec = NormalizationSpec()):
    """Scalar loss and its decomposed trace record for one parameter state."""
    pipe = Pipeline(base, scene, model, weights, normalization, centers=field.centers)
    with torch.no_grad():
        total, r, regs, _ = pipe.total_loss(torch.from_numpy(field.offsets), torch.from_numpy(field.log_scales))
    rec = TraceRecord(
        0, r.item(), *(regs[k].item() for k in REG_NAMES), total.item(),
        float(np.linalg.norm(field.offsets)), float(field.scales.mean()),
    )
    return total.item(), rec


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthesisResult:
    field: RbfField
    mesh: DeformedMesh
    image: np.ndarray  # normalised image fed to the model
    response: float
    trace: list[TraceRecord]
    converged: bool


def _snapshot(directory, step: int, field: RbfField, image: np.ndarray | None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    field.save(d / f"field_{step:06d}.json")
    if image is not None:
        write_image(image, d / f"render_{step:06d}.pgm", window="minmax")


def _converged(best: list[float], window: int, threshold: float) -> bool:
    if len(best) <= window:
        return False
    old, new = best[-1 - window], best[-1]
    return (new - old) < threshold * max(abs(old), 1e-12)


def synthesize_mei(base: Mesh, scene: Scene, model: ResponseModel, cfg: OptimizationConfig = OptimizationConfig(),
                   field: RbfField | None = None) -> SynthesisResult:
    """Adam on (offsets, log_scales) minimising -response + weighted regularizers."""
    if field is None:
        field = RbfField.identity(base, cfg.init_scale, cfg.init_offset_std, cfg.seed)
    field = field.copy()
    pipe = Pipeline(base, scene, model, cfg.weights, cfg.normalization, centers=field.centers)
    opt = Adam(cfg.lr)
    params = {"offsets": field.offsets, "log_scales": field.log_scales}
    trace: list[TraceRecord] = []
    best: list[float] = []
    converged = False
    last_good = field.copy()

    for step in range(cfg.max_steps + 1):
        off = torch.from_numpy(params["offsets"]).requires_grad_(True)
        ls = torch.from_numpy(params["log_scales"]).requires_grad_(cfg.optimize_scales)
        try:
            total, r, regs, img = pipe.total_loss(off, ls)
        except Exception as exc:
            if cfg.snapshot_dir:
                _snapshot(Path(cfg.snapshot_dir), step, last_good, None)
            raise OptimizationError(f"step {step}: {exc}", last_good=last_good, step=step) from exc
        last_good = RbfField(field.centers, params["offsets"].copy(), params["log_scales"].copy())
        trace.append(TraceRecord(
            step, r.item(), *(regs[k].item() for k in REG_NAMES), total.item(),
            float(np.linalg.norm(params["offsets"])), float(np.exp(params["log_scales"]).mean()),
        ))
        best.append(max(trace[-1].response, best[-1]) if best else trace[-1].response)
        if cfg.snapshot_every and cfg.snapshot_dir and step % cfg.snapshot_every == 0:
            _snapshot(cfg.snapshot_dir, step, last_good, img.detach().numpy())
        if step == cfg.max_steps:
            break
        if _converged(best, cfg.convergence_window, cfg.convergence_threshold):
            converged = True
            break
        total.backward()
        grads = {"offsets": off.grad.numpy().copy()}
        grads["log_scales"] = ls.grad.numpy().copy() if cfg.optimize_scales else np.zeros_like(params["log_scales"])
        try:
            opt.step(params, grads)
        except OptimizationError as exc:
            raise OptimizationError(f"step {step}: {exc}", last_good=last_good, step=step) from exc
        if step % 100 == 0:
            log.info("step %d response %.4f total %.5f", step, trace[-1].response, trace[-1].total)

    final = RbfField(field.centers, params["offsets"].copy(), params["log_scales"].copy())
    verts = pipe.vertices(torch.from_numpy(final.offsets), torch.from_numpy(final.log_scales)).detach().numpy()
    verts.setflags(write=False)
    response, image = evaluate_response(verts, scene, model, cfg.normalization, pipe.renderer)
    return SynthesisResult(final, DeformedMesh(base, verts), image, response, trace, converged)


# ---------------------------------------------------------------- Chamfer fitting


@dataclass
class FitConfig:
    max_steps: int = 400
    lr: float = 0.01
    weights: RegularizerWeights = field(default_factory=RegularizerWeights)
    seed: int = 0
    n_samples: int = 2000
    n_eval_samples: int = 5000
    eval_every: int = 10
    init_scale: float | None = None
    nn_method: str = "kdtree"

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.n_samples < 1 or self.n_eval_samples < 1 or self.eval_every < 1:
            raise ValueError("sample counts and eval_every must be >= 1")
        if self.nn_method not in ("brute", "kdtree"):
            raise ValueError("nn_method must be 'brute' or 'kdtree'")


@dataclass
class FitRecord:
    step: int
    chamfer: float
    lap: float
    edge: float
    area: float
    arap: float
    total: float
    eval_chamfer: float  # NaN between evaluation steps
    best_chamfer: float
    offset_norm: float
    mean_sigma: float

    FIELDS = ("step", "chamfer", "lap", "edge", "area", "arap", "total", "eval_chamfer", "best_chamfer",
              "offset_norm", "mean_sigma")


@dataclass
class FitResult:
    field: RbfField  # best state by evaluation Chamfer
    mesh: DeformedMesh
    trace: list[FitRecord]
    initial_chamfer: float
    final_chamfer: float


def fit_mesh_chamfer(source: Mesh, target: Mesh, cfg: FitConfig = FitConfig()) -> FitResult:
    """Deform ``source`` towards ``target`` by minimising Chamfer + weighted regularizers.

    Training samples on the deforming source are redrawn every step; a fixed
    evaluation sample set scores states every ``eval_every`` steps and the
    best-scoring state is returned.
    """
    field = RbfField.identity(source, cfg.init_scale)
    pipe = Pipeline(source, Scene(), None, cfg.weights, centers=field.centers)
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**31 - 1, size=4)
    target_train = torch.from_numpy(
        sample_barycentric(target.vertices, target.faces, cfg.n_samples, int(seeds[0])).points(target.vertices, target.faces)
    )
    target_eval = sample_barycentric(target.vertices, target.faces, cfg.n_eval_samples, int(seeds[1])).points(
        target.vertices, target.faces
    )
    eval_src = sample_barycentric(source.vertices, source.faces, cfg.n_eval_samples, int(seeds[2]))

    def evaluate(verts_np) -> float:
        return chamfer_loss(eval_src.points(verts_np, source.faces), target_eval, cfg.nn_method)

    opt = Adam(cfg.lr)
    params = {"offsets": field.offsets, "log_scales": field.log_scales}
    trace: list[FitRecord] = []
    initial = evaluate(source.vertices)
    best_val, best_field = initial, field.copy()
    train_seed = int(seeds[3])

    for step in range(cfg.max_steps + 1):
        off = torch.from_numpy(params["offsets"]).requires_grad_(True)
        ls = torch.from_numpy(params["log_scales"]).requires_grad_(True)
        verts = pipe.vertices(off, ls)
        vn = verts.detach().numpy()
        if not np.all(np.isfinite(vn)):
            raise OptimizationError(f"step {step}: deformed mesh has non-finite vertices", best_field, step)
        ev = float("nan")
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            ev = initial if step == 0 else evaluate(vn)
            if ev < best_val:
                best_val = ev
                best_field = RbfField(field.centers, params["offsets"].copy(), params["log_scales"].copy())
        samples = sample_barycentric(vn, source.faces, cfg.n_samples, train_seed + step)
        ch = chamfer_loss(samples.points(verts, source.faces), target_train, cfg.nn_method)
        pen, regs = pipe.regularized(verts)
        total = ch + pen
        trace.append(FitRecord(
            step, ch.item(), *(regs[k].item() for k in REG_NAMES), total.item(), ev, best_val,
            float(np.linalg.norm(params["offsets"])), float(np.exp(params["log_scales"]).mean()),
        ))
        if step == cfg.max_steps:
            break
        total.backward()
        opt.step(params, {"offsets": off.grad.numpy().copy(), "log_scales": ls.grad.numpy().copy()})
        if step % 100 == 0:
            log.info("fit step %d chamfer %.6f best %.6f", step, ch.item(), best_val)

    with torch.no_grad():
        verts = pipe.vertices(torch.from_numpy(best_field.offsets), torch.from_numpy(best_field.log_scales)).numpy()
    verts.setflags(write=False)
    return FitResult(best_field, DeformedMesh(source, verts), trace, initial, best_val)
