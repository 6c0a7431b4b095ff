"""Error metrics, evaluation reports, streamlines and raster exports."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import network as nw

METRICS = ("rmse_magnitude", "rmse_direction", "rmse_pressure", "relative_rmse_v", "relative_rmse_p")


def _pair(truth, pred):
    u = np.atleast_2d(np.asarray(truth, dtype=float))
    v = np.atleast_2d(np.asarray(pred, dtype=float))
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    if u.size == 0:
        raise ValueError("no points to compare")
    return u, v


def rmse(truth, pred) -> float:
    """Root mean square of the pointwise Euclidean error."""
    u, v = _pair(truth, pred)
    return float(np.sqrt(np.mean(np.sum((u - v) ** 2, axis=1))))


def rmse_magnitude(truth, pred) -> float:
    u, v = _pair(truth, pred)
    return float(np.sqrt(np.mean((np.linalg.norm(u, axis=1) - np.linalg.norm(v, axis=1)) ** 2)))


def rmse_direction(truth, pred, eps=1e-4, angle=False) -> float:
    """RMS of ``|u/(eps+|u|) - v/(eps+|v|)|``.

    With ``angle=True`` the RMS of the angle between the vectors (radians)
    is returned instead; zero vectors count as aligned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    u, v = _pair(truth, pred)
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    if angle:
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.sum(u * v, axis=1) / (nu[:, 0] * nv[:, 0])
        c = np.where((nu[:, 0] > 0) & (nv[:, 0] > 0), c, 1.0)
        return float(np.sqrt(np.mean(np.arccos(np.clip(c, -1.0, 1.0)) ** 2)))
    r = u / (eps + nu) - v / (eps + nv)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def relative_rmse(truth, pred) -> float:
    """RMSE divided by the RMS of the truth."""
    u, v = _pair(np.asarray(truth, dtype=float).reshape(len(truth), -1),
                 np.asarray(pred, dtype=float).reshape(len(pred), -1))
    ref = math.sqrt(float(np.mean(np.sum(u * u, axis=1))))
    if ref == 0.0:
        raise ValueError("truth field is identically zero")
    return rmse(u, v) / ref


def snapshot_metrics(truth, pred, eps=1e-4, angle=False) -> dict:
    """All metrics for one snapshot; pressure entries are NaN when k = 2."""
    u, v = _pair(truth, pred)
    out = {"rmse_magnitude": rmse_magnitude(u[:, :2], v[:, :2]),
           "rmse_direction": rmse_direction(u[:, :2], v[:, :2], eps, angle),
           "relative_rmse_v": relative_rmse(u[:, :2], v[:, :2]),
           "rmse_pressure": math.nan, "relative_rmse_p": math.nan}
    if u.shape[1] > 2:
        out["rmse_pressure"] = rmse(u[:, 2:3], v[:, 2:3])
        out["relative_rmse_p"] = relative_rmse(u[:, 2], v[:, 2])
    return out


# -- reports ------------------------------------------------------------------

def _fmt(v):
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


@dataclass
class EvalReport:
    rows: list  # dicts: snapshot + METRICS
    meta: dict = field(default_factory=dict)

    def values(self, metric):
        return np.array([r[metric] for r in self.rows], dtype=float)

    def aggregates(self) -> dict:
        out = {}
        for m in METRICS:
            v = self.values(m)
            v = v[~np.isnan(v)]
            if v.size:
                out[m] = {"mean": float(v.mean()), "median": float(np.median(v)),
                          "min": float(v.min()), "max": float(v.max())}
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["snapshot", *METRICS])
            for r in self.rows:
                w.writerow([r["snapshot"], *(_fmt(r[m]) for m in METRICS)])

    def to_dict(self):
        rows = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
                for r in self.rows]
        return {"meta": self.meta, "aggregates": self.aggregates(), "snapshots": rows}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def predict_table(spec, params, table, rowstable=True):
    return nw.evaluate_batch(spec, params, table.coords, table.mu_p, table.mu_g, table.coord_jac,
                             rowstable=rowstable)


def evaluate_table(spec, params, table, meta=None, eps=1e-4, angle=False) -> EvalReport:
    """Per-snapshot metrics of a model on a training table."""
    pred = predict_table(spec, params, table)
    ids = np.asarray(table.snapshot_ids)
    order = list(dict.fromkeys(ids.tolist()))
    rows = []
    for sid in order:
        sel = ids == sid
        rows.append({"snapshot": str(sid), **snapshot_metrics(table.values[sel], pred[sel], eps, angle)})
    return EvalReport(rows, dict(meta or {}))


def write_boxplot_rows(path, reports: dict):
    """One CSV row per (config, seed, snapshot); ``reports`` maps (config, seed) -> EvalReport."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", "snapshot", *METRICS])
        for (config, seed), rep in reports.items():
            for r in rep.rows:
                w.writerow([config, seed, r["snapshot"], *(_fmt(r[m]) for m in METRICS)])


# -- streamlines ----------------------------------------------------------------

@dataclass
class Streamline:
    id: int
    points: np.ndarray  # (n, 2); empty for skipped seeds
    s: np.ndarray
    reason: str  # "exit", "max_steps", "stagnation" or "outside"


def _unit_field(velocity, inside, pts, stall):
    v = np.asarray(velocity(pts), dtype=float)[:, :2]
    n = np.linalg.norm(v, axis=1)
    ok = inside(pts) & (n >= stall)
    return v / np.where(ok, n, 1.0)[:, None], ok, n


def trace_streamlines(velocity: Callable, seeds, step, max_steps=1000, inside: Optional[Callable] = None,
                      stall=1e-6) -> list:
    """Fixed-step RK4 on ``dx/ds = v/|v|`` from every seed (all seeds advance together).

    ``velocity`` maps an (n, 2) array to (n, >=2) velocities; ``inside`` maps
    points to a boolean mask (everything is inside when omitted).  A line
    stops when a stage leaves the domain, the speed drops below ``stall`` or
    ``max_steps`` is reached.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inside = inside or (lambda p: np.ones(len(p), dtype=bool))
    x = np.atleast_2d(np.asarray(seeds, dtype=float)).copy()
    n = len(x)
    start_in = np.asarray(inside(x), dtype=bool)
    paths = [[p.copy()] for p in x]
    reason = np.where(start_in, "", "outside").astype(object)
    active = start_in.copy()
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        p = x[idx]
        k1, ok, speed = _unit_field(velocity, inside, p, stall)
        stalled = inside(p) & (speed < stall)
        k2, ok2, _ = _unit_field(velocity, inside, p + 0.5 * step * k1, stall)
        k3, ok3, _ = _unit_field(velocity, inside, p + 0.5 * step * k2, stall)
        k4, ok4, _ = _unit_field(velocity, inside, p + step * k3, stall)
        new = p + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        good = ok & ok2 & ok3 & ok4 & np.asarray(inside(new), dtype=bool)
        for j, i in enumerate(idx):
            if good[j]:
                x[i] = new[j]
                paths[i].append(new[j].copy())
            else:
                reason[i] = "stagnation" if stalled[j] else "exit"
                active[i] = False
    reason[active] = "max_steps"
    out = []
    for i in range(n):
        if reason[i] == "outside":
            out.append(Streamline(i, np.zeros((0, 2)), np.zeros(0), "outside"))
            continue
        P = np.array(paths[i])
        out.append(Streamline(i, P, step * np.arange(len(P)), str(reason[i])))
    return out


def write_streamlines_csv(path, lines):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "s", "x", "y"])
        for ln in lines:
            for s, (px, py) in zip(ln.s, ln.points):
                w.writerow([ln.id, repr(float(s)), repr(float(px)), repr(float(py))])


def model_velocity(spec, params, mu_p=None, mu_g=None, mapper=None):
    """Velocity callable for a trained model; ``mapper`` returns (x_in, coord_jac) for UC."""
    def fn(pts):
        x_in, jac = (pts, None) if mapper is None else mapper(pts)
        return nw.evaluate_batch(spec, params, x_in, mu_p, mu_g, jac)
    return fn


def mesh_velocity(mesh, nodal):
    """Velocity and inside-test callables from nodal values on a TriMesh."""
    loc = mesh.locator()

    def velocity(pts):
        v = loc.interpolate(nodal, pts, strict=False)
        return np.nan_to_num(v[:, :2])

    def inside(pts):
        return loc.locate(pts)[0] >= 0

    return velocity, inside


# -- rasters --------------------------------------------------------------------

RASTER_MAGIC = b"USMRAST\0"


def raster(fn: Callable, lo, hi, shape):
    """Sample ``fn`` on a regular (ny, nx) grid over the box [lo, hi]."""
    nx, ny = shape
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    return pts, np.asarray(fn(pts), dtype=float).reshape(ny * nx, -1)


def write_raster(prefix, pts, values, shape):
    """``prefix.bin`` (magic, "<qqq" nx ny k, LE f8 points then values) and ``prefix.csv``."""
    prefix = Path(prefix)
    nx, ny = shape
    k = values.shape[1]
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        fh.write(RASTER_MAGIC + struct.pack("<qqq", nx, ny, k))
        fh.write(np.ascontiguousarray(pts, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *(f"u{i}" for i in range(k))])
        for p, v in zip(pts, values):
            w.writerow([_fmt(c) for c in (*p, *v)])


def read_raster(path):
    raw = Path(path).read_bytes()
    if raw[:8] != RASTER_MAGIC:
        raise ValueError(f"{path}: not a raster file")
    nx, ny, k = struct.unpack("<qqq", raw[8:32])
    n = nx * ny
    pts = np.frombuffer(raw, "<f8", 2 * n, 32).reshape(n, 2)
    vals = np.frombuffer(raw, "<f8", k * n, 32 + 16 * n).reshape(n, k)
    return pts.astype(float), vals.astype(float), (nx, ny)


# -- landmark probe ----------------------------------------------------------------

def nearest_landmark_pair(landmarks):
    """Closest pair of landmark vectors, ``(id1, id2, distance)``.

    ``landmarks`` maps geometry id to vector (a list of pairs also works).
    Ties go to the first pair in input order.
    """
    items = list(landmarks.items()) if isinstance(landmarks, dict) else list(landmarks)
    if len(items) < 2:
        raise ValueError("need at least two geometries")
    ids = [str(i) for i, _ in items]
    V = np.array([np.asarray(v, dtype=float) for _, v in items])
    D = squareform(pdist(V))
    D[np.tril_indices(len(ids))] = np.inf
    i, j = np.unravel_index(int(np.argmin(D)), D.shape)
    return ids[i], ids[j], float(D[i, j])
