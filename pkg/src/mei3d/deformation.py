"""Gaussian RBF displacement field over a base mesh.

Each kernel k has a frozen center c_k, an offset delta_k and a scale
sigma_k = exp(log_scale_k). A base vertex v moves by

    dv = sum_k delta_k * exp(-|v - c_k|^2 / (2 sigma_k^2))

The weights are not normalised (no partition of unity).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .mesh import Mesh, mean_edge_length

FIELD_FORMAT = "mei3d-rbf-field"


class FieldError(ValueError):
    pass


@dataclass(eq=False)
class RbfField:
    centers: np.ndarray  # (K, 3)
    offsets: np.ndarray  # (K, 3)
    log_scales: np.ndarray  # (K,)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1)
        k = len(self.centers)
        if k < 1:
            raise FieldError("field needs at least one kernel")
        if len(self.offsets) != k or len(self.log_scales) != k:
            raise FieldError(
                f"inconsistent kernel counts: centers={k} offsets={len(self.offsets)} "
                f"log_scales={len(self.log_scales)}"
            )

    @property
    def n_kernels(self) -> int:
        return len(self.centers)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def check_finite(self) -> None:
        for name in ("centers", "offsets", "log_scales"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FieldError(f"field parameter {name!r} has non-finite entries")

    def copy(self) -> "RbfField":
        return RbfField(self.centers.copy(), self.offsets.copy(), self.log_scales.copy())

    @classmethod
    def identity(cls, base: Mesh, scale: float | None = None, offset_std: float = 0.0, seed: int = 0) -> "RbfField":
        """Kernels on every base vertex; zero offsets unless ``offset_std`` > 0."""
        if scale is None:
            scale = mean_edge_length(base)
        offsets = np.zeros_like(base.vertices)
        if offset_std > 0:
            offsets = np.random.default_rng(seed).normal(0.0, offset_std, size=offsets.shape)
        return cls(base.vertices.copy(), offsets, np.full(base.n_vertices, np.log(scale)))

    # ------------------------------------------------------------ files

    def to_dict(self) -> dict:
        return {
            "format": FIELD_FORMAT,
            "version": 1,
            "n_kernels": self.n_kernels,
            "centers": self.centers.tolist(),
            "offsets": self.offsets.tolist(),
            "log_scales": self.log_scales.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RbfField":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != FIELD_FORMAT:
            raise FieldError(f"{path}: not an RBF field file")
        field = cls(data["centers"], data["offsets"], data["log_scales"])
        field.check_finite()
        return field


@dataclass(frozen=True, eq=False)
class DeformedMesh:
    base: Mesh
    vertices: np.ndarray

    @property
    def faces(self) -> np.ndarray:
        return self.base.faces

    def as_mesh(self) -> Mesh:
        return Mesh(self.vertices, self.base.faces)


def squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


def displacement_torch(sq_dist: torch.Tensor, offsets: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """Differentiable displacement given precomputed |v_i - c_k|^2 of shape (V, K)."""
    inv = torch.exp(-2.0 * log_scales)  # 1 / sigma^2
    w = torch.exp(-0.5 * sq_dist * inv[None, :])
    return w @ offsets


def deform(base: Mesh, field: RbfField) -> DeformedMesh:
    field.check_finite()
    d2 = torch.from_numpy(squared_distances(base.vertices, field.centers))
    with torch.no_grad():
        dv = displacement_torch(d2, torch.from_numpy(field.offsets), torch.from_numpy(field.log_scales))
    verts = base.vertices + dv.numpy()
    verts.setflags(write=False)
    return DeformedMesh(base, verts)


def deform_gradient(base: Mesh, field: RbfField, vertex_adjoint) -> tuple[np.ndarray, np.ndarray]:
    """Pull dL/dv' back to (dL/d offsets, dL/d log_scales).

    With w_ik the kernel weight of vertex i under kernel k:
        dL/d delta_k     = sum_i a_i w_ik
        dL/d log sigma_k = sum_i (a_i . delta_k) w_ik |v_i - c_k|^2 / sigma_k^2
    """
    a = np.asarray(vertex_adjoint, dtype=np.float64)
    if a.shape != base.vertices.shape:
        raise FieldError(f"vertex adjoint has shape {a.shape}, expected {base.vertices.shape}")
    field.check_finite()
    d2 = squared_distances(base.vertices, field.centers)
    inv = np.exp(-2.0 * field.log_scales)
    w = np.exp(-0.5 * d2 * inv[None, :])
    g_offsets = w.T @ a
    proj = a @ field.offsets.T  # (V, K): a_i . delta_k
    g_log = np.einsum("ik,ik->k", proj * w, d2) * inv
    return g_offsets, g_log
