"""Lid-driven cavity walkthrough at small scale.

Solves a few cavity configurations, trains a PC and a UC network on the
same snapshots and compares their test errors. Runs in a few minutes on
one core:

    python demos/cavity_walkthrough.py [workdir]
"""
import sys
from pathlib import Path

import numpy as np

from usmnet import cavity as cv
from usmnet import pipeline as pl

work = Path(sys.argv[1] if len(sys.argv) > 1 else "cavity_demo")

# one FOM solve, inspected directly
field = cv.solve_cavity(cv.CavityCase(H=1.0, Re=100.0, h=1 / 32))
psi_min, x, y = cv.vortex_minimum(field)
print(f"Re=100, H=1: primary vortex psi_min {psi_min:.4f} at ({x:.3f}, {y:.3f}), residual {field.residual:.1e}")

base = {"case": "cavity", "seed": 3, "fom": {"h": 1 / 32, "Re_range": [100, 1000]},
        "corpus": {"n_snapshots": 24, "n_points": 500},
        "split": {"fractions": [0.5, 0.1, 0.4], "seed": 0, "train_points": 200},
        "model": {"hidden": [20, 20]},
        "optimizer": {"adam_iterations": 200, "bfgs_iterations": 400},
        "paths": {"corpus": str(work / "corpus"), "out": str(work / "runs")}}
cfg = pl.config_from_dict(base)
log = pl.generate_data(cfg)
print(f"generated {log['written']} snapshots in {log['wall_time']:.1f} s")

corpus = pl.read_corpus_for(cfg)
for coords in ("PC", "UC"):
    c = pl.config_from_dict(dict(base, model=dict(base["model"], coords=coords)))
    out = work / "runs" / coords
    ck = pl.train(c, corpus, out=out)[0]["checkpoint"]
    rep = pl.evaluate(c, ck, "test", corpus, out=out)
    print(f"{coords}: median test |v| RMSE {np.median(rep.values('rmse_magnitude')):.4f}, "
          f"median relative RMSE {np.median(rep.values('relative_rmse_v')):.3f}")

# online query of the UC model for an unseen configuration
spec_pts = np.array([[0.5, 0.3], [0.5, 0.9], [0.2, 1.1]])
pred, ok = pl.infer(work / "runs" / "UC" / "model_seed0.usmn", spec_pts, work / "query.csv", mu_p=[650.0], H=1.0)
for p, v, inside in zip(spec_pts, pred, ok):
    print(f"  x={p}: " + (f"v=({v[0]:+.3f}, {v[1]:+.3f})" if inside else "outside the cavity"))
