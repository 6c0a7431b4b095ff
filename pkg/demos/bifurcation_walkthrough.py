"""Bifurcation walkthrough at small scale.

Generates random bifurcations, looks at one geometry (landmarks, UC
fields, Stokes flow), then trains PC and UC networks with 6 and 26
landmarks and exports streamlines for one test geometry:

    python demos/bifurcation_walkthrough.py [workdir]
"""
import sys
from pathlib import Path

import numpy as np

from usmnet import dataset as ds
from usmnet import fem
from usmnet import geometry as gm
from usmnet import pipeline as pl
from usmnet import stokes as st

work = Path(sys.argv[1] if len(sys.argv) > 1 else "bifurcation_demo")

g = gm.generate_geometry(0)
m = g.mesh(0.3)
uc = fem.solve_uc_fields(m)
sol = st.solve_flow(m)
q_in, q_out, rel = st.mass_balance(m, sol)
print(f"geometry {g.id}: {m.n_nodes} nodes, {len(m.triangles)} triangles")
print("  6 landmarks:", np.round(gm.extract_landmarks(g, 6), 3))
print(f"  psi_LR in [{uc.psi_lr.min():.2f}, {uc.psi_lr.max():.2f}], psi_TD in [{uc.psi_td.min():.2f}, {uc.psi_td.max():.2f}]")
print(f"  Stokes: inflow {q_in:.1f} mm^2/s, relative mass imbalance {rel:.1e}")

base = {"case": "bifurcation", "seed": 5, "fom": {"mesh_h": 0.3},
        "corpus": {"n_snapshots": 30, "n_points": 500},
        "split": {"fractions": [0.6, 0.1, 0.3], "seed": 0, "train_points": 200},
        "model": {"hidden": [20, 15, 10, 5]},
        "optimizer": {"adam_iterations": 200, "bfgs_iterations": 300},
        "evaluation": {"export_snapshots": 1},
        "paths": {"corpus": str(work / "corpus"), "out": str(work / "runs")}}
log = pl.generate_data(pl.config_from_dict(base), workers=2)
print(f"generated {log['written']} geometries, {len(log['failures'])} failures")

corpus = pl.read_corpus_for(pl.config_from_dict(base))
artifacts = {}
for mode in (6, 26):
    for coords in ("PC", "UC"):
        c = pl.config_from_dict(dict(base, model=dict(base["model"], coords=coords, landmark_mode=mode)))
        out = work / "runs" / f"{coords}{mode}"
        ck = pl.train(c, corpus, out=out, artifacts=artifacts)[0]["checkpoint"]
        rep = pl.evaluate(c, ck, "test", corpus, out=out, artifacts=artifacts)
        print(f"{coords}-USM-Net, {mode:2d} landmarks: median relative RMSE "
              f"velocity {np.median(rep.values('relative_rmse_v')):.3f}, "
              f"pressure {np.median(rep.values('relative_rmse_p')):.3f}")

pair = pl.nearest_pair(work / "corpus", 26, work / "nearest_pair.json")
print(f"closest landmark pair: {pair['id1']} / {pair['id2']} at distance {pair['distance']:.3f}")
print(f"streamlines and rasters for one test geometry are in {work / 'runs'}/*/")
