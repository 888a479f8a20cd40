"""Geometric regularizers on (deformed) vertex positions, plus Chamfer fitting loss.

All losses take a torch float64 vertex tensor of shape (V, 3) and return a
scalar tensor, so gradients come from autograd. Numpy inputs are accepted and
give a plain float back.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .mesh import Mesh, Topology, face_areas

DEGENERATE_EDGE = 1e-9


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizerWeights:
    lap: float = 0.0
    edge: float = 0.0
    area: float = 0.0
    arap: float = 0.0

    def __post_init__(self):
        for name in ("lap", "edge", "area", "arap"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"regularizer weight {name!r} must be finite and >= 0, got {val}")


@dataclass(frozen=True, eq=False)
class ReferenceGeometry:
    """Unit edge directions of the undeformed mesh, one row per topology edge."""

    directions: np.ndarray  # (E, 3); zero rows for degenerate edges
    valid: np.ndarray  # (E,) bool
    n_degenerate: int

    @classmethod
    def from_mesh(cls, mesh: Mesh, topo: Topology, eps: float = DEGENERATE_EDGE) -> "ReferenceGeometry":
        e = topo.edges
        vec = mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]]
        length = np.linalg.norm(vec, axis=1)
        valid = length >= eps
        dirs = np.zeros_like(vec)
        dirs[valid] = vec[valid] / length[valid, None]
        return cls(dirs, valid, int((~valid).sum()))


def _numpy_in_float_out(fn):
    @functools.wraps(fn)
    def wrapper(vertices, *args, **kwargs):
        if isinstance(vertices, torch.Tensor):
            return fn(vertices, *args, **kwargs)
        with torch.no_grad():
            out = fn(torch.from_numpy(np.array(vertices, dtype=np.float64)), *args, **kwargs)
        return float(out)

    return wrapper


def _edge_index(topo: Topology) -> tuple[torch.Tensor, torch.Tensor]:
    e = torch.from_numpy(topo.edges)
    return e[:, 0], e[:, 1]


@_numpy_in_float_out
def laplacian_loss(vertices: torch.Tensor, topo: Topology) -> torch.Tensor:
    """Mean squared distance of each vertex from the centroid of its 1-ring."""
    n = vertices.shape[0]
    counts = np.array([len(nb) for nb in topo.neighbors])
    if (counts == 0).any():
        raise TopologyError(f"vertex {int(np.flatnonzero(counts == 0)[0])} has no neighbors")
    src, dst = (torch.from_numpy(a) for a in topo.neighbor_pairs())
    sums = torch.zeros_like(vertices).index_add_(0, src, vertices[dst])
    means = sums / torch.from_numpy(counts).to(vertices.dtype)[:, None]
    return ((vertices - means) ** 2).sum() / n


@_numpy_in_float_out
def edge_loss(vertices: torch.Tensor, topo: Topology) -> torch.Tensor:
    """Population variance of edge lengths."""
    if topo.n_edges < 1:
        raise TopologyError("edge loss needs at least one edge")
    i, j = _edge_index(topo)
    lengths = torch.linalg.vector_norm(vertices[i] - vertices[j], dim=1)
    return ((lengths - lengths.mean()) ** 2).mean()


def triangle_areas(vertices: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    f = torch.from_numpy(np.array(faces, dtype=np.int64))
    v0, v1, v2 = vertices[f[:, 0]], vertices[f[:, 1]], vertices[f[:, 2]]
    cross = torch.linalg.cross(v1 - v0, v2 - v0, dim=1)
    # sqrt(x + 0) has an infinite derivative at 0; collapsed faces are legal but
    # must not poison the gradient.
    sq = (cross**2).sum(1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, 0.5 * torch.sqrt(safe), torch.zeros_like(sq))


@_numpy_in_float_out
def area_loss(vertices: torch.Tensor, faces: np.ndarray) -> torch.Tensor:
    """Population variance of triangle areas."""
    if len(faces) < 1:
        raise TopologyError("area loss needs at least one face")
    a = triangle_areas(vertices, faces)
    return ((a - a.mean()) ** 2).mean()


@_numpy_in_float_out
def arap_loss(vertices: torch.Tensor, ref: ReferenceGeometry, topo: Topology) -> torch.Tensor:
    """Squared component of each edge orthogonal to its original direction.

    Degenerate reference edges are skipped; the mean runs over the rest.
    """
    if len(ref.directions) != topo.n_edges:
        raise TopologyError(f"reference has {len(ref.directions)} edges, topology has {topo.n_edges}")
    keep = torch.from_numpy(np.flatnonzero(ref.valid))
    if len(keep) == 0:
        return vertices.sum() * 0.0
    i, j = _edge_index(topo)
    vec = (vertices[i] - vertices[j])[keep]
    d = torch.from_numpy(ref.directions)[keep]
    resid = vec - (vec * d).sum(1, keepdim=True) * d
    return (resid**2).sum() / len(keep)


# ---------------------------------------------------------------- Chamfer


def nearest_neighbors(query: np.ndarray, ref: np.ndarray, method: str = "brute", chunk: int = 2048):
    """Index into ``ref`` of the nearest point for every query, and its squared distance."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if not len(query) or not len(ref):
        raise ValueError("nearest-neighbor search on an empty point set")
    if method == "kdtree":
        _, idx = cKDTree(ref).query(query, k=1)
        idx = np.asarray(idx, dtype=np.int64)
    elif method == "brute":
        idx = np.empty(len(query), dtype=np.int64)
        for s in range(0, len(query), chunk):
            q = query[s : s + chunk]
            diff = q[:, None, :] - ref[None, :, :]
            idx[s : s + chunk] = np.einsum("ijk,ijk->ij", diff, diff).argmin(1)
    else:
        raise ValueError(f"unknown nearest-neighbor method {method!r}")
    diff = query - ref[idx]
    return idx, np.einsum("ij,ij->i", diff, diff)


def chamfer_loss(points_a, points_b, method: str = "brute"):
    """Symmetric mean squared nearest-neighbor distance between two point sets."""
    is_t = isinstance(points_a, torch.Tensor) or isinstance(points_b, torch.Tensor)
    a = torch.as_tensor(points_a, dtype=torch.float64)
    b = torch.as_tensor(points_b, dtype=torch.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer loss on an empty point set")
    an, bn = a.detach().numpy(), b.detach().numpy()
    ia, _ = nearest_neighbors(an, bn, method)
    ib, _ = nearest_neighbors(bn, an, method)
    ia, ib = torch.from_numpy(ia), torch.from_numpy(ib)
    loss = ((a - b[ia]) ** 2).sum(1).mean() + ((b - a[ib]) ** 2).sum(1).mean()
    return loss if is_t else float(loss)


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Face ids and barycentric weights; positions follow the mesh as it deforms."""

    face_index: np.ndarray  # (n,)
    barycentric: np.ndarray  # (n, 3)

    def points(self, vertices, faces: np.ndarray):
        f = np.asarray(faces)[self.face_index]
        if isinstance(vertices, torch.Tensor):
            ft = torch.from_numpy(np.array(f))
            w = torch.from_numpy(self.barycentric)
            return sum(w[:, k : k + 1] * vertices[ft[:, k]] for k in range(3))
        v = np.asarray(vertices)
        return sum(self.barycentric[:, k : k + 1] * v[f[:, k]] for k in range(3))


def sample_barycentric(vertices: np.ndarray, faces: np.ndarray, n: int, seed: int) -> SurfaceSamples:
    if n < 1:
        raise ValueError("need at least one sample")
    areas = face_areas(np.asarray(vertices), np.asarray(faces))
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero total area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    r = np.sqrt(u)
    bary = np.stack([1.0 - r, r * (1.0 - v), r * v], axis=1)
    return SurfaceSamples(face.astype(np.int64), bary)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform random points on the mesh surface, deterministic in ``seed``."""
    return sample_barycentric(mesh.vertices, mesh.faces, n, seed).points(mesh.vertices, mesh.faces)
