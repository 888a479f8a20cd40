import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mei3d.deformation import DeformedMesh, FieldError, RbfField, deform, deform_gradient
from mei3d.mesh import Mesh, make_sphere, mean_edge_length

from conftest import tetrahedron


def _point_mesh(points):
    pts = np.asarray(points, dtype=np.float64)
    # faces are irrelevant to deformation; pad to three vertices when needed
    if len(pts) < 3:
        pts = np.vstack([pts, np.array([[50.0, 0, 0], [0, 50.0, 0]])[: 3 - len(pts)]])
    return Mesh(pts, np.array([[0, 1, 2]]))


def _brute_deform(verts, centers, offsets, sigmas):
    out = np.array(verts, dtype=np.float64)
    for i, v in enumerate(verts):
        for c, d, s in zip(centers, offsets, sigmas):
            out[i] += d * math.exp(-float(np.sum((v - c) ** 2)) / (2 * s * s))
    return out


def test_single_kernel_at_center():
    base = _point_mesh([[0.3, -0.2, 0.1]])
    field = RbfField([[0.3, -0.2, 0.1]], [[0, 0, 0.5]], [0.0])
    out = deform(base, field)
    assert np.array_equal(out.vertices[0] - base.vertices[0], [0, 0, 0.5])


def test_zero_offsets_identity():
    base = make_sphere(2)
    out = deform(base, RbfField.identity(base))
    assert np.array_equal(out.vertices, base.vertices)
    assert out.faces is base.faces


def test_two_kernels_hand_oracle():
    s1, s2 = 0.7, 0.4
    v = np.zeros(3)
    c1 = np.array([s1, 0, 0])
    c2 = np.array([0, 2 * s2, 0])
    d1, d2 = np.array([1.0, 2.0, -1.0]), np.array([-0.5, 0.25, 3.0])
    base = _point_mesh([v])
    field = RbfField(np.vstack([c1, c2]), np.vstack([d1, d2]), np.log([s1, s2]))
    dv = deform(base, field).vertices[0] - v
    expected = d1 * math.exp(-0.5) + d2 * math.exp(-2.0)
    assert np.allclose(dv, expected, rtol=0, atol=1e-15)


def test_huge_sigma_sums_offsets():
    base = make_sphere(1)
    k = base.n_vertices
    d = np.array([0.01, -0.02, 0.005])
    field = RbfField(base.vertices, np.tile(d, (k, 1)), np.full(k, math.log(1e6)))
    dv = deform(base, field).vertices - base.vertices
    assert np.max(np.abs(dv - k * d)) < 1e-6


def test_matches_brute_formula(rng):
    base = tetrahedron()
    centers = rng.normal(size=(5, 3))
    offsets = rng.normal(size=(5, 3))
    sig = rng.uniform(0.3, 2.0, 5)
    field = RbfField(centers, offsets, np.log(sig))
    ref = _brute_deform(base.vertices, centers, offsets, sig)
    assert np.allclose(deform(base, field).vertices, ref, rtol=0, atol=1e-13)


def test_linear_in_offsets(rng):
    base = make_sphere(1)
    ls = np.log(rng.uniform(0.2, 0.8, base.n_vertices))
    a, b = rng.normal(size=(2, base.n_vertices, 3)) * 0.1
    da = deform(base, RbfField(base.vertices, a, ls)).vertices - base.vertices
    db = deform(base, RbfField(base.vertices, b, ls)).vertices - base.vertices
    dab = deform(base, RbfField(base.vertices, a + b, ls)).vertices - base.vertices
    assert np.allclose(dab, da + db, rtol=0, atol=1e-13)


def test_rejects_nonfinite():
    base = make_sphere(0)
    f = RbfField.identity(base)
    f.offsets[3, 1] = np.nan
    with pytest.raises(FieldError):
        deform(base, f)


def test_field_shape_validation():
    with pytest.raises(FieldError):
        RbfField(np.zeros((3, 3)), np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(FieldError):
        RbfField(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


def test_identity_defaults_to_mean_edge():
    base = make_sphere(2)
    f = RbfField.identity(base)
    assert np.allclose(f.scales, mean_edge_length(base), rtol=1e-15)
    assert np.array_equal(f.centers, base.vertices)
    assert np.all(f.scales > 0)


def test_identity_noise_is_seeded():
    base = make_sphere(1)
    a = RbfField.identity(base, offset_std=0.1, seed=3)
    b = RbfField.identity(base, offset_std=0.1, seed=3)
    c = RbfField.identity(base, offset_std=0.1, seed=4)
    assert np.array_equal(a.offsets, b.offsets) and not np.array_equal(a.offsets, c.offsets)


def test_field_file_round_trip(tmp_path, rng):
    base = make_sphere(1)
    f = RbfField(base.vertices, rng.normal(size=(42, 3)), rng.normal(size=42))
    p = tmp_path / "f.json"
    f.save(p)
    g = RbfField.load(p)
    for name in ("centers", "offsets", "log_scales"):
        assert np.array_equal(getattr(f, name), getattr(g, name))


def test_field_load_rejects_other_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "something-else"}')
    with pytest.raises(FieldError):
        RbfField.load(p)


def test_deformed_vertices_read_only():
    base = make_sphere(0)
    out = deform(base, RbfField.identity(base))
    assert isinstance(out, DeformedMesh)
    with pytest.raises(ValueError):
        out.vertices[0, 0] = 1.0


# ---------------------------------------------------------------- adjoint


def _loss_and_fd(base, field, adj, h=1e-5):
    def loss(f):
        return float(np.sum(adj * deform(base, f).vertices))

    g_off = np.empty_like(field.offsets)
    for idx in np.ndindex(field.offsets.shape):
        p, m = field.copy(), field.copy()
        p.offsets[idx] += h
        m.offsets[idx] -= h
        g_off[idx] = (loss(p) - loss(m)) / (2 * h)
    g_log = np.empty_like(field.log_scales)
    for k in range(field.n_kernels):
        p, m = field.copy(), field.copy()
        p.log_scales[k] += h
        m.log_scales[k] -= h
        g_log[k] = (loss(p) - loss(m)) / (2 * h)
    return g_off, g_log


def _rel(a, n):
    floor = 1e-3 * np.abs(n).max()
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))


def test_adjoint_zero():
    base = make_sphere(1)
    f = RbfField(base.vertices, np.ones((42, 3)), np.zeros(42))
    go, gl = deform_gradient(base, f, np.zeros((42, 3)))
    assert not go.any() and not gl.any()


def test_adjoint_single_kernel_identity():
    base = _point_mesh([[0.0, 0.0, 0.0]])
    f = RbfField([[0.0, 0.0, 0.0]], [[0.2, 0.1, 0.3]], [math.log(0.01)])
    adj = np.zeros((3, 3))
    adj[0] = [1.5, -2.0, 0.25]
    go, _ = deform_gradient(base, f, adj)
    assert np.allclose(go[0], adj[0], rtol=0, atol=1e-300)


def test_adjoint_shape_mismatch():
    base = make_sphere(0)
    with pytest.raises(FieldError):
        deform_gradient(base, RbfField.identity(base), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_adjoint_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    base = make_sphere(0)
    f = RbfField(base.vertices, rng.normal(size=(12, 3)) * 0.3, np.log(rng.uniform(0.3, 1.2, 12)))
    adj = rng.normal(size=(12, 3))
    go, gl = deform_gradient(base, f, adj)
    no, nl = _loss_and_fd(base, f, adj)
    assert _rel(go, no) < 1e-6
    assert _rel(gl, nl) < 1e-6


def test_adjoint_matches_autograd(rng):
    import torch

    from mei3d.deformation import displacement_torch, squared_distances

    base = make_sphere(1)
    f = RbfField(base.vertices, rng.normal(size=(42, 3)) * 0.1, np.log(rng.uniform(0.2, 0.6, 42)))
    adj = rng.normal(size=(42, 3))
    off = torch.tensor(f.offsets, requires_grad=True)
    ls = torch.tensor(f.log_scales, requires_grad=True)
    d2 = torch.from_numpy(squared_distances(base.vertices, f.centers))
    (displacement_torch(d2, off, ls) * torch.from_numpy(adj)).sum().backward()
    go, gl = deform_gradient(base, f, adj)
    assert np.allclose(go, off.grad.numpy(), rtol=1e-12, atol=1e-14)
    assert np.allclose(gl, ls.grad.numpy(), rtol=1e-10, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_translation_of_base_equivariant(seed, tx, ty, tz):
    rng = np.random.default_rng(seed)
    base = tetrahedron()
    f = RbfField(base.vertices, rng.normal(size=(4, 3)), rng.normal(size=4) * 0.3)
    t = np.array([tx, ty, tz])
    moved = Mesh(base.vertices + t, base.faces)
    g = RbfField(f.centers + t, f.offsets, f.log_scales)
    assert np.allclose(deform(moved, g).vertices, deform(base, f).vertices + t, atol=1e-12)
