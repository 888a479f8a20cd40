"""Optimise a stimulus, then map its pose and light-direction tuning.

    python3 scripts/light_tuning.py [--config configs/simple_cell_sheet.yaml] [--out runs/tuning] [--steps N]

Writes pose.csv, dome.csv and per-tertile exemplar renders, and prints how
the mean response and mean light elevation differ between tertiles.
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from mei3d.config import load_config
from mei3d.optim import synthesize_mei
from mei3d.sweeps import TERTILES, default_angles, export_heatmap, sweep_light, sweep_pose, write_exemplars

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "simple_cell_sheet.yaml"))
    ap.add_argument("--out", default="runs/tuning")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args(argv)
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = load_config(args.config)
    base, model = cfg.build_mesh(), cfg.build_model()
    if args.steps:
        cfg.optimizer.max_steps = args.steps
    res = synthesize_mei(base, cfg.scene, model, cfg.optimizer)
    res.field.save(out / "field.json")
    print(f"optimised response {res.response:.4f} after {res.trace[-1].step} steps")

    az = cfg.pose["azimuths"] if cfg.pose["azimuths"] is not None else default_angles()
    el = cfg.pose["elevations"] if cfg.pose["elevations"] is not None else default_angles()
    pose = sweep_pose(res.mesh, cfg.scene, model, az, el, cfg.normalization)
    export_heatmap(pose, out / "pose.csv")
    i, j = np.unravel_index(np.nanargmax(pose.responses), pose.responses.shape)
    print(f"pose: identity {pose.at(0, 0):.4f}, best {pose.responses[i, j]:.4f} at az {az[j]:g} el {el[i]:g}, "
          f"{int((~pose.valid).sum())} invalid cells")

    # the dome must clear the deformed mesh
    radius = cfg.light.get("radius") or max(float(np.linalg.norm(cfg.scene.light_position)),
                                            1.05 * float(np.linalg.norm(res.mesh.vertices, axis=1).max()))
    dome = sweep_light(res.mesh, cfg.scene, model, cfg.light["azimuths"], cfg.light["elevations"], radius,
                       cfg.normalization, n_exemplars=max(cfg.light["exemplars"], 1))
    export_heatmap(dome, out / "dome.csv")
    write_exemplars(dome, out / "dome")
    elev = np.broadcast_to(dome.elevations[:, None], dome.responses.shape)
    for t in TERTILES:
        m = dome.labels == t
        print(f"dome {t:4s}: n {int(m.sum()):3d}  mean response {dome.responses[m].mean():.4f}  "
              f"mean elevation {elev[m].mean():5.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
