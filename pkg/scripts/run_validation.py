"""Run the bundled synthesis and fitting configs and tabulate the outcomes.

    python3 scripts/run_validation.py [--out runs/validation] [--steps N]

``--steps`` caps every run for a quick smoke pass; without it the configs run
as written (a few minutes in total on one CPU core).
"""

import argparse
import json
import math
import sys
import time
from pathlib import Path

import torch

from mei3d.config import load_config
from mei3d.mesh import save_obj
from mei3d.models import dominant_phase
from mei3d.optim import FitRecord, fit_mesh_chamfer, synthesize_mei, write_trace
from mei3d.renderer import write_image

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SYNTH = [("simple_cell_sheet", [0]), ("simple_cell_sphere", [0]), ("complex_cell", [0, 1, 2])]
FITS = ["fit_ellipsoid", "fit_bunny"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/validation")
    ap.add_argument("--steps", type=int, help="override max_steps for every run")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    rows = []

    for name, seeds in SYNTH:
        cfg = load_config(CONFIGS / f"{name}.yaml")
        base, model = cfg.build_mesh(), cfg.build_model()
        if args.steps:
            cfg.optimizer.max_steps = args.steps
        for seed in seeds:
            cfg.optimizer.seed = seed
            t = time.perf_counter()
            res = synthesize_mei(base, cfg.scene, model, cfg.optimizer)
            d = out / f"{name}_seed{seed}"
            d.mkdir(exist_ok=True)
            write_trace(res.trace, d / "trace.csv")
            write_image(res.image, d / "image.png", window="minmax")
            save_obj(res.mesh.as_mesh(), d / "mesh.obj")
            rows.append({"run": d.name, "response": res.response, "steps": res.trace[-1].step,
                         "phase_deg": math.degrees(dominant_phase(res.image, model.gabor)),
                         "seconds": time.perf_counter() - t})
            print(f"{d.name:28s} response {res.response:.4f}  steps {rows[-1]['steps']:5d}  "
                  f"phase {rows[-1]['phase_deg']:7.1f}  {rows[-1]['seconds']:.0f}s", flush=True)

    for name in FITS:
        cfg = load_config(CONFIGS / f"{name}.yaml")
        if args.steps:
            cfg.fit.max_steps = args.steps
        t = time.perf_counter()
        res = fit_mesh_chamfer(cfg.build_mesh(), cfg.build_mesh(cfg.fit_target, "fit.target"), cfg.fit)
        d = out / name
        d.mkdir(exist_ok=True)
        write_trace(res.trace, d / "chamfer_trace.csv", fields=FitRecord.FIELDS)
        save_obj(res.mesh.as_mesh(), d / "fitted.obj")
        ratio = res.final_chamfer / res.initial_chamfer
        rows.append({"run": name, "initial": res.initial_chamfer, "final": res.final_chamfer, "ratio": ratio,
                     "seconds": time.perf_counter() - t})
        print(f"{name:28s} chamfer {res.initial_chamfer:.4g} -> {res.final_chamfer:.4g}  ratio {ratio:.4f}  "
              f"{rows[-1]['seconds']:.0f}s", flush=True)

    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
