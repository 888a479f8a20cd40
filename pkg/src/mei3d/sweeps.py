"""Scene manipulation sweeps over an optimised stimulus.

Pose: the mesh is rotated rigidly about the origin, elevation about world x
first, then azimuth about world z (extrinsic). Light: a point light moves on
the z >= 0 half dome, position radius * (cos el cos az, cos el sin az, sin el).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ResponseModel
from .optim import evaluate_response
from .renderer import NormalizationSpec, Renderer, RenderError, Scene, write_image

TERTILES = ("high", "mid", "low")


def default_angles(lo: float = -90.0, hi: float = 90.0, step: float = 15.0) -> np.ndarray:
    return np.arange(lo, hi + step / 2, step, dtype=np.float64)


def _cos_sin(deg: float) -> tuple[float, float]:
    # quarter turns are exact so symmetric poses map vertices onto each other bit for bit
    q, r = divmod(float(deg), 90.0)
    if r == 0.0:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(q) % 4]
    t = math.radians(deg)
    return math.cos(t), math.sin(t)


def rotation_matrix(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Rz(azimuth) @ Rx(elevation)."""
    ca, sa = _cos_sin(azimuth_deg)
    ce, se = _cos_sin(elevation_deg)
    rx = np.array([[1.0, 0, 0], [0, ce, -se], [0, se, ce]])
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1.0]])
    return rz @ rx


def dome_position(azimuth_deg: float, elevation_deg: float, radius: float) -> tuple[float, float, float]:
    a, e = math.radians(azimuth_deg), math.radians(elevation_deg)
    return (radius * math.cos(e) * math.cos(a), radius * math.cos(e) * math.sin(a), radius * math.sin(e))


@dataclass
class PoseGrid:
    azimuths: np.ndarray
    elevations: np.ndarray
    responses: np.ndarray  # (n_elev, n_azim); NaN where invalid
    valid: np.ndarray

    def at(self, azimuth: float, elevation: float) -> float:
        i = int(np.flatnonzero(self.elevations == elevation)[0])
        j = int(np.flatnonzero(self.azimuths == azimuth)[0])
        return float(self.responses[i, j])


@dataclass
class DomeGrid:
    azimuths: np.ndarray
    elevations: np.ndarray
    radius: float
    responses: np.ndarray  # (n_elev, n_azim)
    labels: np.ndarray  # same shape, "high" | "mid" | "low"
    positions: np.ndarray  # (n_elev, n_azim, 3)
    exemplars: dict = field(default_factory=dict)  # label -> list of (az, el, image)


def sweep_pose(mesh, scene: Scene, model: ResponseModel, azimuths=None, elevations=None,
               normalization: NormalizationSpec = NormalizationSpec()) -> PoseGrid:
    azimuths = default_angles() if azimuths is None else np.asarray(azimuths, dtype=np.float64)
    elevations = default_angles() if elevations is None else np.asarray(elevations, dtype=np.float64)
    if not (np.any(azimuths == 0) and np.any(elevations == 0)):
        raise ValueError("pose grid must contain the identity pose (0, 0)")
    base = getattr(mesh, "base", mesh)
    renderer = Renderer(base)
    verts0 = np.asarray(mesh.vertices)
    out = np.full((len(elevations), len(azimuths)), np.nan)
    for i, el in enumerate(elevations):
        for j, az in enumerate(azimuths):
            verts = verts0 if az == 0 and el == 0 else verts0 @ rotation_matrix(az, el).T
            try:
                out[i, j], _ = evaluate_response(verts, scene, model, normalization, renderer)
            except RenderError:
                pass
    return PoseGrid(azimuths, elevations, out, np.isfinite(out))


def tertile_labels(responses: np.ndarray) -> np.ndarray:
    """Rank-based split into three near-equal groups; ties keep sample order."""
    flat = np.asarray(responses, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")
    labels = np.empty(len(flat), dtype=object)
    for name, idx in zip(TERTILES, np.array_split(order, 3)):
        labels[idx] = name
    return labels.reshape(np.shape(responses))


def sweep_light(mesh, scene: Scene, model: ResponseModel, azimuths=None, elevations=None, radius: float | None = None,
                normalization: NormalizationSpec = NormalizationSpec(), n_exemplars: int = 0) -> DomeGrid:
    azimuths = np.arange(0.0, 360.0, 15.0) if azimuths is None else np.asarray(azimuths, dtype=np.float64)
    elevations = np.arange(0.0, 90.0 + 7.5, 15.0) if elevations is None else np.asarray(elevations, dtype=np.float64)
    if np.any((elevations < 0) | (elevations > 90)):
        raise ValueError("dome elevations must lie in [0, 90] degrees")
    verts = np.asarray(mesh.vertices)
    if radius is None:
        radius = float(np.linalg.norm(scene.light_position))
    extent = float(np.linalg.norm(verts, axis=1).max())
    if not radius > extent:
        raise ValueError(f"dome radius {radius} must exceed the mesh extent {extent:.4g}")
    base = getattr(mesh, "base", mesh)
    renderer = Renderer(base)
    resp = np.empty((len(elevations), len(azimuths)))
    pos = np.empty((len(elevations), len(azimuths), 3))
    for i, el in enumerate(elevations):
        for j, az in enumerate(azimuths):
            pos[i, j] = dome_position(az, el, radius)
            resp[i, j], _ = evaluate_response(verts, scene.with_(light_position=tuple(pos[i, j])), model,
                                              normalization, renderer)
    labels = tertile_labels(resp)
    grid = DomeGrid(azimuths, elevations, radius, resp, labels, pos)
    if n_exemplars > 0:
        order = np.argsort(-resp.ravel(), kind="stable")
        for name in TERTILES:
            picks = [k for k in order if labels.ravel()[k] == name][:n_exemplars]
            grid.exemplars[name] = []
            for k in picks:
                i, j = divmod(int(k), len(azimuths))
                img = renderer.render(verts, scene.with_(light_position=tuple(pos[i, j])))
                grid.exemplars[name].append((float(azimuths[j]), float(elevations[i]), img))
    return grid


def _cell(x: float, decimals: int) -> str:
    return "NA" if not np.isfinite(x) else f"{x:.{decimals}f}"


def _angle(x: float) -> str:
    return f"{x:g}"


def export_heatmap(grid: PoseGrid | DomeGrid, path, decimals: int = 9) -> None:
    """CSV with azimuths across the header row and elevations down the first column.

    Dome grids get a second block, after a blank line, with the tertile labels.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["elevation\\azimuth", *map(_angle, grid.azimuths)])
        for el, row in zip(grid.elevations, grid.responses):
            w.writerow([_angle(el), *(_cell(x, decimals) for x in row)])
        if isinstance(grid, DomeGrid):
            w.writerow([])
            w.writerow(["tertile", *map(_angle, grid.azimuths)])
            for el, row in zip(grid.elevations, grid.labels):
                w.writerow([_angle(el), *row])


def write_exemplars(grid: DomeGrid, directory) -> list[Path]:
    """Renders as ``<dir>/<tertile>/az<az>_el<el>.pgm``."""
    written = []
    for name, items in grid.exemplars.items():
        d = Path(directory) / name
        d.mkdir(parents=True, exist_ok=True)
        for az, el, img in items:
            p = d / f"az{_angle(az)}_el{_angle(el)}.pgm"
            write_image(img, p)
            written.append(p)
    return written
