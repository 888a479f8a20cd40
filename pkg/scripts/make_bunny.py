"""Generate the bundled low-poly bunny-like target mesh.

A star-shaped blob (body, head, two ears, tail) built by pushing icosphere
vertices along their directions, so a sphere can reach it by RBF deformation.

    python scripts/make_bunny.py [out.obj]
"""

import sys
from pathlib import Path

import numpy as np

from mei3d.mesh import Mesh, make_sphere, save_obj

OUT = Path(__file__).resolve().parents[1] / "src" / "mei3d" / "data" / "bunny_lowpoly.obj"

# (direction, amplitude, angular width in radians)
BUMPS = [
    ((0.55, 0.0, 0.45), 0.45, 0.55),  # head
    ((0.2, 0.55, 1.0), 0.8, 0.22),  # left ear
    ((0.2, -0.55, 1.0), 0.8, 0.22),  # right ear
    ((-1.0, 0.0, 0.1), 0.25, 0.35),  # tail
]
BODY_AXES = np.array([1.15, 0.8, 0.75])


def bunny(subdivisions: int = 3) -> Mesh:
    s = make_sphere(subdivisions, 1.0)
    d = s.vertices
    r = 1.0 / np.sqrt(((d / BODY_AXES) ** 2).sum(1))
    for direction, amp, width in BUMPS:
        u = np.asarray(direction) / np.linalg.norm(direction)
        ang = np.arccos(np.clip(d @ u, -1.0, 1.0))
        r = r + amp * np.exp(-0.5 * (ang / width) ** 2)
    return Mesh(d * r[:, None] * 0.8, s.faces)


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else OUT
    out.parent.mkdir(parents=True, exist_ok=True)
    m = bunny()
    save_obj(m, out)
    print(f"wrote {out}: {m.n_vertices} vertices, {m.n_faces} faces")
