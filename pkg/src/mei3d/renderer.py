"""Minimal differentiable renderer and image normalisation.

Camera sits at (0, 0, camera_height) looking down -z with +y as image up and
+x as image right. Visibility is decided without gradients (nearest covering
face per pixel, nearest silhouette edge per pixel); everything continuous is
then recomputed in torch so gradients reach vertex positions and the light.

Pixel value = w * shade + (1 - w) * background, with w a truncated logistic
of the signed screen-space distance (pixels) to the nearest silhouette edge,
positive inside the coverage. The logistic is rescaled to hit exactly 0 and 1
at +-5 softness, so far-away pixels are exactly background. Band pixels
outside the coverage are shaded like the nearest silhouette point; when
several edges share that point (a common vertex) their shades are averaged,
which keeps the image independent of how edges are numbered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .mesh import Mesh, Topology, build_topology

SILHOUETTE_CUTOFF = 5.0
_LOGIT_LO = 1.0 / (1.0 + math.exp(SILHOUETTE_CUTOFF))
_LOGIT_SPAN = 1.0 - 2.0 * _LOGIT_LO


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    camera_height: float = 2.7
    fov_degrees: float = 60.0
    width: int = 128
    height: int = 128
    light_position: tuple = (0.0, 0.3, 2.6)
    light_intensity: float = 1.6
    ambient: float = 0.3
    background: float = 0.5
    softness: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "light_position", tuple(float(x) for x in self.light_position))
        if len(self.light_position) != 3:
            raise ValueError("light_position needs 3 coordinates")
        scalars = dict(
            camera_height=self.camera_height, fov_degrees=self.fov_degrees,
            light_intensity=self.light_intensity, ambient=self.ambient,
            background=self.background, softness=self.softness,
        )
        for name, val in scalars.items():
            if not math.isfinite(val):
                raise ValueError(f"scene.{name} must be finite")
        if not all(math.isfinite(x) for x in self.light_position):
            raise ValueError("scene.light_position must be finite")
        if self.camera_height <= 0:
            raise ValueError("scene.camera_height must be > 0")
        if not 0 < self.fov_degrees < 180:
            raise ValueError("scene.fov_degrees must lie in (0, 180)")
        if self.width < 8 or self.height < 8:
            raise ValueError("scene resolution must be at least 8x8")
        if self.light_intensity < 0:
            raise ValueError("scene.light_intensity must be >= 0")
        if not 0 <= self.ambient <= 1:
            raise ValueError("scene.ambient must lie in [0, 1]")
        if not 0 <= self.background <= 1:
            raise ValueError("scene.background must lie in [0, 1]")
        if self.softness <= 0:
            raise ValueError("scene.softness must be > 0")

    def with_(self, **kw) -> "Scene":
        return replace(self, **kw)

    @property
    def camera(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.camera_height])

    def ray_directions(self) -> np.ndarray:
        """(H*W, 3) un-normalised ray directions through pixel centers; z component is -1."""
        t = math.tan(math.radians(self.fov_degrees) / 2.0)
        aspect = self.width / self.height
        cols = (np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0
        rows = 1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0
        yy, xx = np.meshgrid(rows, cols, indexing="ij")
        d = np.stack([xx * t * aspect, yy * t, -np.ones_like(xx)], axis=-1)
        return d.reshape(-1, 3)

    def pixel_centers(self) -> np.ndarray:
        r, c = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return np.stack([c.ravel(), r.ravel()], axis=1)


def project(vertices, scene: Scene):
    """World points to continuous pixel coordinates (x right, y down). Works on numpy and torch."""
    t = math.tan(math.radians(scene.fov_degrees) / 2.0)
    aspect = scene.width / scene.height
    depth = scene.camera_height - vertices[:, 2]
    nx = vertices[:, 0] / (depth * t * aspect)
    ny = vertices[:, 1] / (depth * t)
    px = (nx + 1.0) * (scene.width / 2.0)
    py = (1.0 - ny) * (scene.height / 2.0)
    if isinstance(vertices, torch.Tensor):
        return torch.stack([px, py], dim=1), depth
    return np.stack([px, py], axis=1), depth


def silhouette_weight(d, softness: float):
    """Truncated logistic of the signed distance d (pixels)."""
    x = torch.clamp(d / softness, -SILHOUETTE_CUTOFF, SILHOUETTE_CUTOFF)
    w = (torch.sigmoid(x) - _LOGIT_LO) / _LOGIT_SPAN
    # pin the ends so the band edges are exactly 0 and 1, not one ulp off
    return torch.where(x >= SILHOUETTE_CUTOFF, torch.ones_like(w), torch.where(x <= -SILHOUETTE_CUTOFF, torch.zeros_like(w), w))


@dataclass
class _Visibility:
    covered_pix: np.ndarray
    covered_face: np.ndarray
    band_pix: np.ndarray
    band_edge: np.ndarray  # index into silhouette arrays
    tie_group: np.ndarray  # index into band_pix, one entry per (pixel, tied nearest edge)
    tie_edge: np.ndarray  # index into silhouette arrays
    band_inside: np.ndarray
    sil_edges: np.ndarray  # (S, 2) vertex ids
    sil_faces: np.ndarray  # (S,) shading face per silhouette edge
    face_sign: np.ndarray  # (F,) +1 if winding normal faces the camera


def _rasterize(p2: np.ndarray, invz: np.ndarray, faces: np.ndarray, scene: Scene):
    """Nearest covering face per pixel via bounding-box candidate pairs."""
    W, H = scene.width, scene.height
    tri = p2[faces]  # (F, 3, 2)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    lo = np.floor(tri.min(1) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(1) - 0.5).astype(np.int64)
    c0, r0 = np.clip(lo[:, 0], 0, W - 1), np.clip(lo[:, 1], 0, H - 1)
    c1, r1 = np.clip(hi[:, 0], 0, W - 1), np.clip(hi[:, 1], 0, H - 1)
    ok = (np.abs(area2) > 1e-12) & (hi[:, 0] >= 0) & (lo[:, 0] <= W - 1) & (hi[:, 1] >= 0) & (lo[:, 1] <= H - 1)
    ncol = np.where(ok, c1 - c0 + 1, 0)
    nrow = np.where(ok, r1 - r0 + 1, 0)
    cnt = ncol * nrow
    total = int(cnt.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    fid = np.repeat(np.arange(len(faces)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(total) - start
    col = c0[fid] + local % ncol[fid]
    row = r0[fid] + local // ncol[fid]
    qx, qy = col + 0.5, row + 0.5

    def edge_fn(u, v):
        return (v[fid, 0] - u[fid, 0]) * (qy - u[fid, 1]) - (v[fid, 1] - u[fid, 1]) * (qx - u[fid, 0])

    inv_area = 1.0 / area2[fid]
    w0 = edge_fn(b, c) * inv_area
    w1 = edge_fn(c, a) * inv_area
    w2 = edge_fn(a, b) * inv_area
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    fid, pix = fid[inside], (row * W + col)[inside]
    iz = (w0[inside] * invz[faces[fid, 0]] + w1[inside] * invz[faces[fid, 1]] + w2[inside] * invz[faces[fid, 2]])
    order = np.lexsort((-iz, pix))
    pix, fid = pix[order], fid[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    return pix[first], fid[first]


def _nearest_segments(p2a: np.ndarray, p2b: np.ndarray, band: float, scene: Scene):
    """Pixels within ``band`` of some segment, with the nearest segment and its distance.

    Candidate (pixel, segment) pairs come from each segment's bounding box grown by ``band``.
    """
    W, H = scene.width, scene.height
    lo = np.floor(np.minimum(p2a, p2b) - band - 0.5).astype(np.int64)
    hi = np.ceil(np.maximum(p2a, p2b) + band - 0.5).astype(np.int64)
    c0, r0 = np.clip(lo[:, 0], 0, W - 1), np.clip(lo[:, 1], 0, H - 1)
    c1, r1 = np.clip(hi[:, 0], 0, W - 1), np.clip(hi[:, 1], 0, H - 1)
    ok = (hi[:, 0] >= 0) & (lo[:, 0] <= W - 1) & (hi[:, 1] >= 0) & (lo[:, 1] <= H - 1)
    ncol = np.where(ok, c1 - c0 + 1, 0)
    cnt = ncol * np.where(ok, r1 - r0 + 1, 0)
    total = int(cnt.sum())
    if total == 0:
        empty = np.zeros(0, np.int64)
        return empty, empty, np.zeros(0), empty, empty
    sid = np.repeat(np.arange(len(p2a)), cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    col = c0[sid] + local % ncol[sid]
    row = r0[sid] + local // ncol[sid]
    qx, qy = col + 0.5, row + 0.5
    ax, ay = p2a[sid, 0], p2a[sid, 1]
    abx, aby = p2b[sid, 0] - ax, p2b[sid, 1] - ay
    den = np.maximum(abx * abx + aby * aby, 1e-300)
    t = np.clip(((qx - ax) * abx + (qy - ay) * aby) / den, 0.0, 1.0)
    rx, ry = qx - ax - t * abx, qy - ay - t * aby
    d2 = rx * rx + ry * ry
    near = d2 < band * band
    pix, sid, d2 = (row * W + col)[near], sid[near], d2[near]
    order = np.lexsort((sid, d2, pix))
    pix, sid, d2 = pix[order], sid[order], d2[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    group = np.cumsum(first) - 1
    # segments sharing the nearest point (typically a common endpoint) are ties;
    # they are all reported so shading does not depend on segment numbering
    dmin = d2[first][group]
    tie = d2 <= dmin * (1.0 + 1e-9) + 1e-18
    return pix[first], sid[first], np.sqrt(d2[first]), group[tie], sid[tie]


class Renderer:
    """Renders any vertex positions sharing one face list."""

    def __init__(self, mesh_or_faces, topo: Topology | None = None):
        if isinstance(mesh_or_faces, Mesh):
            mesh = mesh_or_faces
        else:
            faces = np.asarray(mesh_or_faces, dtype=np.int64).reshape(-1, 3)
            n = int(faces.max()) + 1 if faces.size else 0
            mesh = Mesh(np.zeros((n, 3)), faces)
        self.faces = mesh.faces
        self.topo = topo if topo is not None else build_topology(mesh)
        self._faces_t = torch.from_numpy(self.faces.copy())
        ef = self.topo.edge_faces
        self._edge_nfaces = np.array([len(x) for x in ef], dtype=np.int64)

    # --------------------------------------------------------- visibility

    def _visibility(self, verts: np.ndarray, scene: Scene) -> _Visibility:
        faces = self.faces
        cam = scene.camera
        n = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
        to_cam = cam[None] - verts[faces].mean(1)
        face_sign = np.where((n * to_cam).sum(1) >= 0, 1.0, -1.0)

        p2, depth = project(verts, scene)
        covered_pix, covered_face = _rasterize(p2, 1.0 / depth, faces, scene)

        # silhouette: boundary edges and edges between front- and back-facing faces
        sil, sil_face = [], []
        for e, fs in enumerate(self.topo.edge_faces):
            signs = face_sign[list(fs)]
            if len(fs) == 1:
                sil.append(e)
                sil_face.append(fs[0])
            elif signs.min() != signs.max():
                sil.append(e)
                sil_face.append(fs[int(np.argmax(signs))])
        sil_edges = self.topo.edges[np.array(sil, dtype=np.int64)] if sil else np.zeros((0, 2), np.int64)
        sil_faces = np.array(sil_face, dtype=np.int64)

        P = scene.width * scene.height
        covered = np.zeros(P, dtype=bool)
        covered[covered_pix] = True
        if len(sil_edges) == 0:
            empty = np.zeros(0, np.int64)
            return _Visibility(covered_pix, covered_face, empty, empty, empty, empty, np.zeros(0, bool),
                               sil_edges, sil_faces, face_sign)

        band = SILHOUETTE_CUTOFF * scene.softness
        band_pix, band_edge, _, tie_group, tie_edge = _nearest_segments(
            p2[sil_edges[:, 0]], p2[sil_edges[:, 1]], band, scene)
        return _Visibility(covered_pix, covered_face, band_pix, band_edge, tie_group, tie_edge, covered[band_pix],
                           sil_edges, sil_faces, face_sign)

    # --------------------------------------------------------- rendering

    def _shade(self, p, nrm, light, scene: Scene):
        lvec = light[None, :] - p
        r2 = (lvec**2).sum(1)
        cos = (nrm * lvec).sum(1) / torch.sqrt(r2)
        val = scene.ambient + scene.light_intensity * torch.relu(cos) / r2
        return torch.clamp(val, 0.0, 1.0)

    def _unit_normals(self, verts, face_ids, face_sign):
        f = self._faces_t[face_ids]
        v0, v1, v2 = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
        n = torch.linalg.cross(v1 - v0, v2 - v0, dim=1)
        n = n / torch.linalg.vector_norm(n, dim=1, keepdim=True)
        return n * torch.from_numpy(face_sign[face_ids])[:, None], v0

    def render_torch(self, verts: torch.Tensor, scene: Scene, light: torch.Tensor | None = None) -> torch.Tensor:
        """Differentiable render; returns an (H, W) float64 tensor."""
        H, W = scene.height, scene.width
        bg = torch.full((H * W,), float(scene.background), dtype=torch.float64)
        if len(self.faces) == 0:
            return bg.reshape(H, W)
        vn = verts.detach().numpy()
        if not np.all(np.isfinite(vn)):
            raise RenderError("non-finite vertex positions")
        if np.any(vn[:, 2] >= scene.camera_height * (1.0 - 1e-9)):
            raise RenderError("mesh reaches the camera plane; every vertex needs z < camera_height")
        if light is None:
            light = torch.tensor(scene.light_position, dtype=torch.float64)
        vis = self._visibility(vn, scene)
        cam = torch.tensor(scene.camera, dtype=torch.float64)
        rays = torch.from_numpy(scene.ray_directions())

        w = torch.zeros(H * W, dtype=torch.float64)
        shade = torch.zeros(H * W, dtype=torch.float64)

        # covered pixels: shade the nearest face at the ray/plane hit point
        if len(vis.covered_pix):
            pix = torch.from_numpy(vis.covered_pix)
            nrm, v0 = self._unit_normals(verts, vis.covered_face, vis.face_sign)
            d = rays[pix]
            s = (nrm * (v0 - cam)).sum(1) / (nrm * d).sum(1)
            p = cam + s[:, None] * d
            shade = shade.index_put((pix,), self._shade(p, nrm, light, scene))
            w = w.index_put((pix,), torch.ones(len(pix), dtype=torch.float64))

        # pixels within the silhouette band: soft weight, outside ones shaded from the edge
        if len(vis.band_pix):
            pix = torch.from_numpy(vis.band_pix)
            e = torch.from_numpy(vis.sil_edges[vis.band_edge])
            p2, _ = project(verts, scene)
            a, b = p2[e[:, 0]], p2[e[:, 1]]
            q = torch.from_numpy(scene.pixel_centers()[vis.band_pix])
            ab = b - a
            den = torch.clamp((ab**2).sum(1), min=1e-300)
            t = torch.clamp(((q - a) * ab).sum(1) / den, 0.0, 1.0)
            r = q - (a + t[:, None] * ab)
            r2 = (r**2).sum(1)
            safe = torch.where(r2 > 0, r2, torch.ones_like(r2))
            dist = torch.where(r2 > 0, torch.sqrt(safe), torch.zeros_like(r2))
            inside = torch.from_numpy(vis.band_inside)
            signed = torch.where(inside, dist, -dist)
            w = w.index_put((pix,), silhouette_weight(signed, scene.softness))

            # outside pixels take the shading of the nearest silhouette point, averaged over tied edges
            sel = ~vis.band_inside[vis.tie_group]
            if sel.any():
                grp, edge = vis.tie_group[sel], vis.tie_edge[sel]
                et = torch.from_numpy(vis.sil_edges[edge])
                a3, b3 = verts[et[:, 0]], verts[et[:, 1]]
                ta, tb = p2[et[:, 0]], p2[et[:, 1]]
                tq = torch.from_numpy(scene.pixel_centers()[vis.band_pix[grp]])
                tab = tb - ta
                tt = torch.clamp(((tq - ta) * tab).sum(1) / torch.clamp((tab**2).sum(1), min=1e-300), 0.0, 1.0)
                p3 = a3 + tt[:, None] * (b3 - a3)
                nrm, _ = self._unit_normals(verts, vis.sil_faces[edge], vis.face_sign)
                vals = self._shade(p3, nrm, light, scene)
                counts = np.bincount(grp, minlength=len(vis.band_pix)).astype(np.float64)
                g = torch.from_numpy(grp)
                mean = torch.zeros(len(vis.band_pix), dtype=torch.float64).index_add(0, g, vals)
                mean = mean / torch.from_numpy(np.maximum(counts, 1.0))
                out = torch.from_numpy(np.flatnonzero(~vis.band_inside))
                shade = shade.index_put((pix[out],), mean[out])

        img = w * shade + (1.0 - w) * bg
        return img.reshape(H, W)

    def render(self, vertices, scene: Scene) -> np.ndarray:
        with torch.no_grad():
            return self.render_torch(torch.from_numpy(np.array(vertices, dtype=np.float64)), scene).numpy()


def render(mesh, scene: Scene) -> np.ndarray:
    """Render a Mesh or DeformedMesh to an (H, W) luminance array."""
    base = getattr(mesh, "base", mesh)
    return Renderer(base).render(mesh.vertices, scene)


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class NormalizationSpec:
    target_mean: float = 0.0
    target_std: float = 1.0
    target_norm: float = 25.0

    def __post_init__(self):
        if not (math.isfinite(self.target_mean) and math.isfinite(self.target_std) and math.isfinite(self.target_norm)):
            raise ValueError("normalization values must be finite")
        if self.target_std <= 0:
            raise ValueError("normalization.target_std must be > 0")
        if self.target_norm <= 0:
            raise ValueError("normalization.target_norm must be > 0")


class DegenerateImageError(ValueError):
    pass


def normalize_torch(img: torch.Tensor, spec: NormalizationSpec) -> torch.Tensor:
    """Standardise to (target_mean, target_std), then rescale to L2 norm target_norm."""
    mean = img.mean()
    std = torch.sqrt(((img - mean) ** 2).mean())
    if not float(std.detach()) > 0:
        raise DegenerateImageError("image has zero variance; cannot standardise")
    z = (img - mean) * (spec.target_std / std) + spec.target_mean
    norm = torch.sqrt((z**2).sum())
    if not float(norm.detach()) > 0:
        raise DegenerateImageError("standardised image has zero norm")
    return z * (spec.target_norm / norm)


def normalize_image(img, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    with torch.no_grad():
        return normalize_torch(torch.as_tensor(np.asarray(img, dtype=np.float64)), spec).numpy()


# ---------------------------------------------------------------- image files


def to_bytes(img: np.ndarray, window: str = "fixed") -> np.ndarray:
    """Map luminance to uint8. ``fixed`` clips [0, 1]; ``minmax`` stretches, constant -> 0."""
    x = np.asarray(img, dtype=np.float64)
    if window == "fixed":
        u = np.clip(x, 0.0, 1.0)
    elif window == "minmax":
        lo, hi = x.min(), x.max()
        u = np.zeros_like(x) if hi <= lo else (x - lo) / (hi - lo)
    else:
        raise ValueError(f"unknown window {window!r}")
    return np.floor(u * 255.0 + 0.5).astype(np.uint8)


def write_image(img, path, fmt: str | None = None, window: str = "fixed") -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "pgm").lower()
    q = to_bytes(img, window)
    try:
        if fmt == "pgm":
            h, w = q.shape
            rows = "\n".join(" ".join(str(int(v)) for v in row) for row in q)
            path.write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")
        elif fmt == "png":
            from PIL import Image as PILImage

            PILImage.fromarray(q, mode="L").save(path, format="PNG")
        else:
            raise ValueError(f"unsupported image format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4 : 4 + w * h], dtype=np.int64).reshape(h, w)
