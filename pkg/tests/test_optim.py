import csv
import math
import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mei3d.deformation import RbfField, deform
from mei3d.mesh import Mesh, build_topology, make_ellipsoid, make_sheet, make_sphere
from mei3d.models import ComplexCell, ExternalModel, GaborFilter, ModelError, ResponseModel, SimpleCell
from mei3d.optim import (Adam, FitConfig, OptimizationConfig, OptimizationError, Pipeline, TraceRecord,
                         check_gradients, evaluate_response, fit_mesh_chamfer, synthesize_mei, total_loss,
                         write_trace)
from mei3d.regularizers import (ReferenceGeometry, RegularizerWeights, arap_loss, area_loss, edge_loss,
                                laplacian_loss)
from mei3d.renderer import NormalizationSpec, Scene, normalize_image, render

SMALL = Scene(width=32, height=32)


class ConstantModel(ResponseModel):
    """Fixed response with an identically zero gradient."""

    def evaluate(self, img):
        return 0.3, np.zeros_like(img)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_first_step():
    p = {"x": np.array([1.0, -2.0, 3.0])}
    Adam().step(p, {"x": np.zeros(3)})
    assert np.array_equal(p["x"], [1.0, -2.0, 3.0])


@pytest.mark.parametrize("g", [2.5, -0.003, 1e-9])
def test_adam_first_step_hand(g):
    lr, eps = 0.01, 1e-8
    p = {"x": np.array([0.7])}
    Adam(lr, eps=eps).step(p, {"x": np.array([g])})
    # t = 1: m_hat = g, v_hat = g^2
    assert p["x"][0] == pytest.approx(0.7 - lr * g / (abs(g) + eps), rel=1e-15, abs=1e-17)


def test_adam_two_steps_hand():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    g1, g2 = 1.0, -3.0
    x = 2.0
    m = (1 - b1) * g1
    v = (1 - b2) * g1**2
    x -= lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2**2
    x -= lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
    p = {"x": np.array([2.0])}
    opt = Adam(lr, b1, b2, eps)
    opt.step(p, {"x": np.array([g1])})
    opt.step(p, {"x": np.array([g2])})
    assert p["x"][0] == pytest.approx(x, rel=1e-14)


def test_adam_errors():
    opt = Adam()
    with pytest.raises(OptimizationError):
        opt.step({"x": np.zeros(2)}, {"x": np.zeros(3)})
    with pytest.raises(OptimizationError, match="non-finite"):
        opt.step({"x": np.zeros(2)}, {"x": np.array([0.0, np.inf])})
    with pytest.raises(ValueError):
        Adam(lr=0)


def test_adam_deterministic(rng):
    grads = rng.normal(size=(30, 5))
    runs = []
    for _ in range(2):
        p = {"x": np.zeros(5)}
        opt = Adam(0.1)
        for g in grads:
            opt.step(p, {"x": g.copy()})
        runs.append(p["x"].tobytes())
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- gradient checks


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 20))
def test_check_gradients_quadratic(seed, n):
    x = np.random.default_rng(seed).normal(size=n) * 3
    # central differences carry no truncation error on a quadratic, so a wide
    # step only shrinks cancellation error
    assert check_gradients(lambda t: (t**2).sum(), x, h=1e-2).max_rel_error < 1e-9


def test_check_gradients_reports_wrong_gradient():
    res = check_gradients(lambda t: (t**2).sum(), np.array([1.0, 2.0]), grad=lambda t: np.array([2.0, 5.0]))
    assert res.index == 1 and res.max_rel_error > 0.1


def test_check_gradients_nonfinite():
    with pytest.raises(OptimizationError):
        check_gradients(lambda t: torch.log(t).sum(), np.array([1e-6]), h=1e-5)


def test_composite_deform_regularizers_gradient(rng):
    base = make_sphere(0)  # 12 vertices
    pipe = Pipeline(base, SMALL, None, RegularizerWeights(1.0, 2.0, 3.0, 0.5))
    k = base.n_vertices

    def fn(x):
        off, ls = x[: 3 * k].view(k, 3), x[3 * k :]
        pen, _ = pipe.regularized(pipe.vertices(off, ls))
        return pen

    x = np.concatenate([rng.normal(size=3 * k) * 0.1, np.log(rng.uniform(0.4, 1.0, k))])
    assert check_gradients(fn, x).max_rel_error < 1e-6


def test_full_pipeline_gradient():
    rng = np.random.default_rng(5)
    base = make_sphere(1, 0.8)  # 42 vertices
    model = ComplexCell(GaborFilter(frequency=0.12, sigma=5), 32, 32)
    pipe = Pipeline(base, SMALL, model, RegularizerWeights(lap=0.5))
    k = base.n_vertices

    def fn(x):
        total, *_ = pipe.total_loss(x[: 3 * k].view(k, 3), x[3 * k :])
        return total

    x = np.concatenate([rng.normal(size=3 * k) * 0.02, np.full(k, math.log(0.3))])
    assert check_gradients(fn, x, h=1e-4).max_rel_error < 1e-2


# ---------------------------------------------------------------- total loss


def test_total_all_lambda_zero():
    base = make_sphere(1, 0.8)
    model = SimpleCell(GaborFilter(frequency=0.12, sigma=5), 32, 32)
    field = RbfField.identity(base, offset_std=0.05, seed=1)
    total, rec = total_loss(field, base, SMALL, model, RegularizerWeights())
    assert total == -rec.response


def test_total_fresh_sheet():
    base = make_sheet(12, 12, 2.0)
    model = SimpleCell(GaborFilter(frequency=0.12, sigma=5), 32, 32)
    total, rec = total_loss(RbfField.identity(base), base, SMALL, model, RegularizerWeights(1, 1, 1, 1))
    assert rec.edge <= 1e-12 and rec.area <= 1e-12 and rec.arap <= 1e-12
    topo = build_topology(base)
    assert rec.lap == pytest.approx(laplacian_loss(base.vertices, topo), rel=1e-15)
    assert rec.lap > 0  # boundary vertices sit off their 1-ring mean


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_total_equals_components(seed):
    rng = np.random.default_rng(seed)
    base = make_sphere(1, 0.8)
    w = RegularizerWeights(*rng.uniform(0, 3, 4))
    model = SimpleCell(GaborFilter(frequency=0.12, sigma=5, orientation=0.4), 32, 32)
    field = RbfField(base.vertices, rng.normal(size=(42, 3)) * 0.05, np.log(rng.uniform(0.2, 0.5, 42)))
    total, rec = total_loss(field, base, SMALL, model, w)
    # independent recomputation through the public numpy entry points
    v = deform(base, field).vertices
    topo = build_topology(base)
    ref = ReferenceGeometry.from_mesh(base, topo)
    regs = [laplacian_loss(v, topo), edge_loss(v, topo), area_loss(v, base.faces), arap_loss(v, ref, topo)]
    r = model.respond(normalize_image(render(deform(base, field), SMALL)))
    expected = -r + w.lap * regs[0] + w.edge * regs[1] + w.area * regs[2] + w.arap * regs[3]
    assert total == pytest.approx(expected, abs=1e-12)
    assert rec.response == pytest.approx(r, abs=1e-12)


# ---------------------------------------------------------------- synthesis loop


def _sheet_run(**kw):
    base = make_sheet(10, 10, 2.0)
    model = SimpleCell(GaborFilter(frequency=0.08, sigma=6), 32, 32)
    cfg = OptimizationConfig(**{"max_steps": 15, "lr": 0.003, "weights": RegularizerWeights(lap=1.0), **kw})
    return base, model, synthesize_mei(base, SMALL, model, cfg)


def test_trace_total_consistent():
    _, _, res = _sheet_run()
    assert [r.step for r in res.trace] == list(range(16))
    for r in res.trace:
        assert r.total == pytest.approx(-r.response + 1.0 * r.lap, abs=1e-9)


def test_synthesis_improves_and_final_response_consistent():
    base, model, res = _sheet_run(max_steps=40)
    assert res.trace[-1].response > res.trace[0].response
    r, img = evaluate_response(res.mesh.vertices, SMALL, model, faces=base.faces)
    assert r == res.response
    assert abs(np.linalg.norm(res.image) - 25.0) < 1e-9


def test_synthesis_deterministic(tmp_path):
    a = _sheet_run()[2]
    b = _sheet_run()[2]
    write_trace(a.trace, tmp_path / "a.csv")
    write_trace(b.trace, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.field.offsets.tobytes() == b.field.offsets.tobytes()


def test_huge_lambda_stays_put():
    # Adam is invariant to gradient scale, so a huge weight only pins the mesh
    # where its term is stationary; on the fresh sheet that holds for edge,
    # area and arap but not the Laplacian (boundary vertices).
    base = make_sheet(10, 10, 2.0)
    model = SimpleCell(GaborFilter(frequency=0.08, sigma=6), 32, 32)
    cfg = OptimizationConfig(max_steps=300, lr=0.01, weights=RegularizerWeights(0.0, 1e6, 1e6, 1e6),
                             convergence_window=10**6)
    res = synthesize_mei(base, SMALL, model, cfg)
    disp = np.linalg.norm(res.mesh.vertices - base.vertices, axis=1).max()
    assert disp < 0.01 * base.extent()


@pytest.mark.xfail(strict=True, reason="the uniform Laplacian is not stationary at the sheet boundary and Adam "
                                        "normalises away the weight, so the mesh drifts towards the smoother shape")
def test_huge_lambda_all_terms_stays_put():
    base = make_sheet(10, 10, 2.0)
    model = SimpleCell(GaborFilter(frequency=0.08, sigma=6), 32, 32)
    cfg = OptimizationConfig(max_steps=300, lr=0.01, weights=RegularizerWeights(1e6, 1e6, 1e6, 1e6),
                             convergence_window=10**6)
    res = synthesize_mei(base, SMALL, model, cfg)
    disp = np.linalg.norm(res.mesh.vertices - base.vertices, axis=1).max()
    assert disp < 0.01 * base.extent()


def test_zero_gradient_model_never_moves():
    base = make_sheet(8, 8, 2.0)
    cfg = OptimizationConfig(max_steps=10, lr=0.1)
    start = RbfField.identity(base, offset_std=0.01, seed=2)
    res = synthesize_mei(base, SMALL, ConstantModel(), cfg, field=start)
    assert np.array_equal(res.field.offsets, start.offsets)
    assert np.array_equal(res.field.log_scales, start.log_scales)


def test_convergence_stops_early():
    base = make_sheet(8, 8, 2.0)
    cfg = OptimizationConfig(max_steps=500, lr=0.1, convergence_window=5, convergence_threshold=1e-4)
    res = synthesize_mei(base, SMALL, ConstantModel(), cfg)
    assert res.converged and len(res.trace) == 6


def test_snapshots_written(tmp_path):
    _sheet_run(max_steps=10, snapshot_every=5, snapshot_dir=str(tmp_path))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [f"{kind}_{s:06d}.{ext}" for kind, ext in (("field", "json"), ("render", "pgm"))
                     for s in (0, 5, 10)]


def test_nan_model_aborts_with_last_good(tmp_path):
    base = make_sheet(8, 8, 2.0)
    cfg = OptimizationConfig(max_steps=5, snapshot_dir=str(tmp_path))
    with ExternalModel([sys.executable, "-m", "mei3d.echo_model", "--nan"]) as model:
        with pytest.raises(OptimizationError) as exc:
            synthesize_mei(base, SMALL, model, cfg)
    assert exc.value.step == 0 and exc.value.last_good is not None
    assert (tmp_path / "field_000000.json").exists()


def test_config_validation():
    for kw in ({"max_steps": 0}, {"lr": 0.0}, {"init_scale": -1.0}, {"convergence_window": 0}):
        with pytest.raises(ValueError):
            OptimizationConfig(**kw)


def test_trace_csv_format(tmp_path):
    rec = TraceRecord(3, 0.1, 0.2, 0.0, 1e-20, 0.5, -0.1, 1.0, 0.3)
    write_trace([rec], tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == list(TraceRecord.FIELDS)
    assert [float(x) for x in rows[1]] == [3, 0.1, 0.2, 0.0, 1e-20, 0.5, -0.1, 1.0, 0.3]


# ---------------------------------------------------------------- Chamfer fitting


def test_fit_target_equals_source():
    m = make_sphere(2)
    res = fit_mesh_chamfer(m, m, FitConfig(max_steps=20, n_samples=500, n_eval_samples=2000))
    assert res.final_chamfer <= res.initial_chamfer
    # sampling noise only: mean squared spacing of 2000 points on a unit sphere
    assert res.initial_chamfer < 4 * math.pi / 2000 * 2


def test_fit_best_so_far_monotone_and_improves():
    src = make_sphere(2)
    tgt = make_ellipsoid((1.0, 1.0, 1.6), 2)
    res = fit_mesh_chamfer(src, tgt, FitConfig(max_steps=60, n_samples=800, n_eval_samples=1500,
                                               weights=RegularizerWeights(lap=1.0)))
    best = [r.best_chamfer for r in res.trace]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert res.final_chamfer < 0.7 * res.initial_chamfer
    assert res.final_chamfer == best[-1]


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(nn_method="octree")
    with pytest.raises(ValueError):
        FitConfig(n_samples=0)
