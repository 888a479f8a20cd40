"""Triangle meshes, derived topology, primitive generators and OBJ I/O.

Indices are 0-based internally; OBJ files are 1-based on disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_SUBDIVISIONS = 7
MAX_VERTICES = 2_000_000


class MeshError(ValueError):
    """Structurally invalid mesh (bad indices, degenerate faces, size cap)."""


class ObjParseError(MeshError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertices contain non-finite values")
        if len(v) > MAX_VERTICES:
            raise MeshError(f"{len(v)} vertices exceeds cap of {MAX_VERTICES}")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range for {len(v)} vertices")
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                t = int(np.flatnonzero(degenerate)[0])
                raise MeshError(f"face {t} has repeated indices {tuple(f[t])}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces)

    def extent(self) -> float:
        """Length of the bounding-box diagonal."""
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


@dataclass(frozen=True, eq=False)
class Topology:
    edges: np.ndarray  # (E, 2) int64, rows (min, max), lexicographically sorted
    neighbors: tuple  # per-vertex sorted index arrays
    edge_faces: tuple = field(repr=False)  # per-edge tuple of adjacent face ids

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbor_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (vertex, neighbor) index arrays, both directions of every edge."""
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return src, dst

    def boundary_edges(self) -> np.ndarray:
        return np.array([len(fs) == 1 for fs in self.edge_faces], dtype=bool)


def build_topology(mesh: Mesh) -> Topology:
    faces = mesh.faces
    if len(faces) == 0:
        empty = np.zeros((0, 2), dtype=np.int64)
        return Topology(empty, tuple(np.zeros(0, np.int64) for _ in range(mesh.n_vertices)), ())
    half = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    face_id = np.tile(np.arange(len(faces)), 3)
    und = np.sort(half, axis=1)
    edges, inverse = np.unique(und, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((face_id, inverse))
    split = np.flatnonzero(np.diff(inverse[order])) + 1
    edge_faces = tuple(tuple(int(t) for t in grp) for grp in np.split(face_id[order], split))

    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    counts = np.bincount(src, minlength=mesh.n_vertices)
    nbrs = tuple(np.split(dst, np.cumsum(counts)[:-1]))
    return Topology(edges.astype(np.int64), nbrs, edge_faces)


def euler_characteristic(mesh: Mesh, topo: Topology | None = None) -> int:
    topo = topo or build_topology(mesh)
    return mesh.n_vertices - topo.n_edges + mesh.n_faces


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return np.cross(v1 - v0, v2 - v0)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(vertices, faces), axis=1)


def mean_edge_length(mesh: Mesh, topo: Topology | None = None) -> float:
    topo = topo or build_topology(mesh)
    e = topo.edges
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean())


# ---------------------------------------------------------------- primitives


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    p = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
            [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
            [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(v: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = list(v)
    cache: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = cache.get(key)
        if idx is None:
            m = verts[a] + verts[b]
            verts.append(m / np.linalg.norm(m))
            idx = cache[key] = len(verts) - 1
        return idx

    out = []
    for a, b, c in f:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(verts), np.array(out, dtype=np.int64)


def make_sphere(subdivisions: int = 2, radius: float = 1.0) -> Mesh:
    """Icosphere centered at the origin with outward-facing winding."""
    if subdivisions < 0:
        raise MeshError("subdivisions must be >= 0")
    if subdivisions > MAX_SUBDIVISIONS:
        raise MeshError(f"subdivisions={subdivisions} exceeds cap of {MAX_SUBDIVISIONS}")
    if not radius > 0:
        raise MeshError("radius must be > 0")
    v, f = _icosahedron()
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return Mesh(v, f)


def make_sheet(nx: int = 16, ny: int = 16, extent: float = 2.0) -> Mesh:
    """Planar sheet in z=0 built from equilateral triangles.

    Odd rows are shifted by half a column so every triangle is equilateral;
    ``extent`` is the x-width of the unshifted rows. Faces wind
    counter-clockwise seen from +z.
    """
    if nx < 2 or ny < 2:
        raise MeshError("sheet needs nx, ny >= 2")
    if nx * ny > MAX_VERTICES:
        raise MeshError(f"{nx * ny} vertices exceeds cap of {MAX_VERTICES}")
    if not extent > 0:
        raise MeshError("extent must be > 0")
    dx = extent / (nx - 1)
    dy = dx * math.sqrt(3.0) / 2.0
    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    x = i * dx + (j % 2) * (dx / 2.0)
    y = j * dy
    v = np.stack([x.ravel(), y.ravel(), np.zeros(nx * ny)], axis=1)
    v[:, 0] -= (v[:, 0].min() + v[:, 0].max()) / 2.0
    v[:, 1] -= (v[:, 1].min() + v[:, 1].max()) / 2.0

    faces = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a, b = r * nx + c, r * nx + c + 1
            cc, d = a + nx, b + nx
            if r % 2 == 0:
                faces += [(a, b, cc), (b, d, cc)]
            else:
                faces += [(a, d, cc), (a, b, d)]
    return Mesh(v, np.array(faces, dtype=np.int64))


def make_torus(major_r: float = 1.0, minor_r: float = 0.3, n_major: int = 24, n_minor: int = 12) -> Mesh:
    if not major_r > minor_r > 0:
        raise MeshError("torus needs major_r > minor_r > 0")
    if n_major < 3 or n_minor < 3:
        raise MeshError("torus needs n_major, n_minor >= 3")
    if n_major * n_minor > MAX_VERTICES:
        raise MeshError(f"{n_major * n_minor} vertices exceeds cap of {MAX_VERTICES}")
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    U, W = np.meshgrid(u, w, indexing="ij")
    ring = major_r + minor_r * np.cos(W)
    v = np.stack([ring * np.cos(U), ring * np.sin(U), minor_r * np.sin(W)], axis=-1).reshape(-1, 3)

    faces = []
    for a in range(n_major):
        a1 = (a + 1) % n_major
        for b in range(n_minor):
            b1 = (b + 1) % n_minor
            p, q = a * n_minor + b, a1 * n_minor + b
            r, s = a1 * n_minor + b1, a * n_minor + b1
            faces += [(p, q, r), (p, r, s)]
    return Mesh(v, np.array(faces, dtype=np.int64))


def make_ellipsoid(axes=(1.0, 1.0, 1.6), subdivisions: int = 2) -> Mesh:
    s = make_sphere(subdivisions, 1.0)
    return Mesh(s.vertices * np.asarray(axes, dtype=np.float64), s.faces)


# ---------------------------------------------------------------- OBJ I/O


def _obj_index(token: str, n: int, path, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        k = int(head)
    except ValueError:
        raise ObjParseError(path, lineno, f"bad face index {token!r}") from None
    if k == 0:
        raise ObjParseError(path, lineno, "face index 0 is invalid in OBJ")
    return k - 1 if k > 0 else n + k


def load_obj(path) -> Mesh:
    """Read ``v`` and ``f`` records; everything else is ignored.

    Polygons with more than three corners are fan-triangulated.
    """
    path = Path(path)
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(path, lineno, "vertex needs 3 coordinates")
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError:
                    raise ObjParseError(path, lineno, f"bad vertex {line!r}") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, lineno, "face needs at least 3 indices")
                idx = [_obj_index(t, len(verts), path, lineno) for t in parts[1:]]
                for k in idx:
                    if not 0 <= k < len(verts):
                        raise ObjParseError(
                            path, lineno, f"face index {k + 1} out of range ({len(verts)} vertices so far)"
                        )
                if len(set(idx)) != len(idx):
                    raise ObjParseError(path, lineno, f"face has repeated indices {parts[1:]}")
                for t in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[t], idx[t + 1]))
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: Mesh, path) -> None:
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
