"""Experiment stages behind the command line: data generation, training,
evaluation, inference and the landmark probe.

Each stage reads files, writes files and returns a small summary.  Stages
share nothing in memory, so an external solver can replace data generation
by writing a corpus in the same format.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import cavity as cv
from . import dataset as ds
from . import eval as ev
from . import fem
from . import geometry as gm
from . import network as nw
from . import stokes as st
from . import training as tr

log = logging.getLogger(__name__)

CASES = ("cavity", "bifurcation")
PARTITIONS = ("train", "validation", "test", "all")


class ConfigError(ValueError):
    """Invalid experiment configuration or command-line input."""


class PipelineError(RuntimeError):
    """A stage ran but could not produce its outputs."""


# -- configuration ------------------------------------------------------------------

def _range(v, name, positive=True):
    try:
        lo, hi = (float(a) for a in v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a [low, high] pair") from None
    if (positive and lo <= 0) or hi < lo:
        raise ConfigError(f"{name} must satisfy {'0 < ' if positive else ''}low <= high, got {[lo, hi]}")
    return (lo, hi)


@dataclass
class CavityFomConfig:
    h: float = 1.0 / 64
    H_range: tuple = cv.H_RANGE
    Re_range: tuple = cv.RE_RANGE
    tol: float = 1e-8

    def validate(self):
        self.H_range = _range(self.H_range, "fom.H_range")
        self.Re_range = _range(self.Re_range, "fom.Re_range")
        if not (cv.H_RANGE[0] <= self.H_range[0] and self.H_range[1] <= cv.H_RANGE[1]):
            raise ConfigError(f"fom.H_range must lie inside {list(cv.H_RANGE)}")
        if not 0 < self.h <= 0.25 or self.tol <= 0:
            raise ConfigError("fom.h must be in (0, 0.25] and fom.tol positive")


@dataclass
class BifurcationFomConfig:
    mesh_h: float = 0.3
    nu: float = 4.72
    rho: float = 1060.0
    peak_velocity: float = 140.0
    picard_iterations: int = 0
    stabilization: float = 0.05
    alpha: float = fem.ALPHA
    ranges: dict = field(default_factory=dict)  # overrides of geometry.ParamRanges

    def validate(self):
        if self.mesh_h <= 0:
            raise ConfigError("fom.mesh_h must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("fom.alpha must lie in (0, 1)")
        try:
            self.problem()
            self.param_ranges()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"fom: {exc}") from None

    def problem(self):
        return st.FlowProblem(self.nu, self.rho, self.peak_velocity, int(self.picard_iterations),
                              stabilization=self.stabilization)

    def param_ranges(self):
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in self.ranges.items()}
        return gm.ParamRanges(**d).validate()


@dataclass
class CorpusConfig:
    n_snapshots: int = 10
    n_points: int = 1000
    max_failure_rate: float = 0.1

    def validate(self):
        if self.n_snapshots < 1 or self.n_points < 1:
            raise ConfigError("corpus.n_snapshots and corpus.n_points must be >= 1")
        if not 0 <= self.max_failure_rate <= 1:
            raise ConfigError("corpus.max_failure_rate must lie in [0, 1]")


@dataclass
class SplitConfig:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    train_size: Optional[int] = None  # use only the first n training snapshots
    train_points: Optional[int] = None  # use only the first n points of each training snapshot

    def validate(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError("split.fractions must be three non-negative numbers summing to 1")
        for name in ("train_size", "train_points"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ConfigError(f"split.{name} must be >= 1")


@dataclass
class ModelConfig:
    hidden: tuple = (30, 20, 10)
    head: str = "velocity"  # velocity | potential | dirichlet_mask
    coords: str = "PC"
    landmark_mode: int = 26
    log_reynolds: bool = True

    def validate(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("model.hidden needs at least one positive width")
        if self.head not in ("velocity", "potential", "dirichlet_mask"):
            raise ConfigError(f"unknown model.head {self.head!r}")
        if self.coords not in ("PC", "UC"):
            raise ConfigError("model.coords must be 'PC' or 'UC'")
        if self.landmark_mode not in (6, 26):
            raise ConfigError("model.landmark_mode must be 6 or 26")


@dataclass
class LossSection:
    discrepancy: str = "squared_l2"
    eps: float = 1e-4
    bc_weight: float = 0.0
    bc_configs: int = 50
    bc_points: int = 100
    tikhonov: float = 0.0

    def validate(self):
        try:
            tr.LossConfig(self.discrepancy, self.eps, None, self.bc_weight, self.tikhonov)
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from None
        if self.bc_configs < 1 or self.bc_points < 1:
            raise ConfigError("loss.bc_configs and loss.bc_points must be >= 1")


@dataclass
class OptimizerConfig:
    adam_iterations: int = 500
    adam_lr: float = 1e-2
    bfgs_iterations: int = 2000
    gtol: float = 1e-9
    bfgs_memory: Optional[int] = None

    def validate(self):
        if self.adam_iterations < 0 or self.bfgs_iterations < 0 or self.adam_lr <= 0 or self.gtol <= 0:
            raise ConfigError("optimizer iterations must be >= 0 and adam_lr, gtol positive")

    def schedule(self):
        return tr.OptSchedule(tr.AdamConfig(self.adam_iterations, self.adam_lr),
                              tr.BFGSConfig(self.bfgs_iterations, gtol=self.gtol, memory=self.bfgs_memory))


@dataclass
class EvaluationConfig:
    partition: str = "test"
    direction_angle: bool = False
    export_snapshots: int = 0  # streamlines and rasters for the first n snapshots
    streamline_seeds: int = 20
    streamline_step: float = 0.01
    streamline_max_steps: int = 2000
    raster: tuple = (64, 64)

    def validate(self):
        if self.partition not in PARTITIONS:
            raise ConfigError(f"evaluation.partition must be one of {PARTITIONS}")
        self.raster = tuple(int(v) for v in self.raster)
        if self.export_snapshots < 0 or self.streamline_step <= 0 or self.streamline_max_steps < 1 \
                or self.streamline_seeds < 1 or len(self.raster) != 2 or min(self.raster) < 2:
            raise ConfigError("invalid evaluation export settings")


@dataclass
class PathsConfig:
    corpus: str = "corpus"
    out: str = "runs"

    def validate(self):
        pass


_SECTIONS = {"corpus": CorpusConfig, "split": SplitConfig, "model": ModelConfig, "loss": LossSection,
             "optimizer": OptimizerConfig, "evaluation": EvaluationConfig, "paths": PathsConfig}


@dataclass
class ExperimentConfig:
    case: str = "cavity"
    seed: int = 0
    train_seeds: tuple = (0,)
    fom: object = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}")
        if self.fom is None:
            self.fom = CavityFomConfig() if self.case == "cavity" else BifurcationFomConfig()
        self.train_seeds = tuple(int(s) for s in self.train_seeds)
        if not self.train_seeds:
            raise ConfigError("train_seeds must not be empty")
        for name in ("fom", *_SECTIONS):
            getattr(self, name).validate()
        if self.case == "bifurcation" and self.model.head != "velocity":
            raise ConfigError("bifurcation models (v_x, v_y, p) need model.head = 'velocity'")
        return self

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))


def _section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data) -> ExperimentConfig:
    """Strict parse: unknown keys anywhere are rejected, then every section is validated."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    top = _section(ExperimentConfig, {k: v for k, v in data.items() if k not in _SECTIONS and k != "fom"},
                   "config")
    case = data.get("case", "cavity")
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}")
    fom_cls = CavityFomConfig if case == "cavity" else BifurcationFomConfig
    top.fom = _section(fom_cls, data.get("fom", {}), "fom")
    for name, cls in _SECTIONS.items():
        setattr(top, name, _section(cls, data.get(name, {}), name))
    try:
        return top.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_resolved_config(out_dir, cfg: ExperimentConfig, stage):
    _dump_json(Path(out_dir) / f"{stage}_config.json", cfg.to_dict())


def _wall(t0, reproducible):
    return 0.0 if reproducible else round(time.perf_counter() - t0, 3)


def _pool_map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# -- data generation -----------------------------------------------------------------

def _cavity_task(task):
    i, H, Re, fom, n_points, seed = task
    try:
        f = cv.solve_cavity(cv.CavityCase(H, Re, fom.h), tol=fom.tol)
    except (cv.CavitySolverError, np.linalg.LinAlgError, ValueError) as exc:
        return i, None, f"{type(exc).__name__}: {exc}"
    return i, cv.sample_snapshot(f, n_points, seed=[seed, i, 1], snapshot_id=f"cav_{i:04d}"), None


def _bifurcation_task(task):
    i, fom, n_points, seed = task
    gid = f"bif_{seed}_{i:04d}"
    try:
        g = gm.generate_geometry([seed, i], fom.param_ranges(), geometry_id=gid)
        m = g.mesh(fom.mesh_h).check()
        uc = fem.solve_uc_fields(m, fom.alpha)
        sol = st.solve_flow(m, fom.problem())
        _, _, imbalance = st.mass_balance(m, sol)
        if imbalance > 1e-6:
            raise PipelineError(f"mass imbalance {imbalance:.2e}")
    except (gm.GeometryError, gm.MeshError, np.linalg.LinAlgError, PipelineError, ValueError) as exc:
        return i, None, f"{type(exc).__name__}: {exc}"
    snap = st.sample_flow_snapshot(m, sol, n_points, seed=[seed, i, 1], snapshot_id=gid, geometry_id=gid)
    flow = {"vx": sol.velocity[:, 0], "vy": sol.velocity[:, 1], "p": sol.pressure}
    art = ds.GeometryArtifacts(g, m, uc, flow=flow)
    art.landmark_vector(6)
    art.landmark_vector(26)
    return i, (snap, art, sol.flags), None


def generate_data(cfg: ExperimentConfig, out=None, workers=1, reproducible=False) -> dict:
    """Run the FOM over a Monte Carlo sample and write a corpus directory."""
    t0 = time.perf_counter()
    root = Path(out or cfg.paths.corpus)
    root.mkdir(parents=True, exist_ok=True)
    n, npts, seed = cfg.corpus.n_snapshots, cfg.corpus.n_points, cfg.seed
    if cfg.case == "cavity":
        cases = cv.sample_cases(n, seed, cfg.fom.h, cfg.fom.H_range, cfg.fom.Re_range)
        results = _pool_map(_cavity_task, [(i, c.H, c.Re, cfg.fom, npts, seed) for i, c in enumerate(cases)],
                            workers)
    else:
        results = _pool_map(_bifurcation_task, [(i, cfg.fom, npts, seed) for i in range(n)], workers)
    snaps, failures, flagged = [], [], []
    for i, res, err in results:
        if res is None:
            log.warning("snapshot %d excluded: %s", i, err)
            failures.append({"index": i, "reason": err})
            continue
        if cfg.case == "cavity":
            snaps.append(res)
        else:
            snap, art, flags = res
            ds.write_geometry_artifacts(root, art)
            snaps.append(snap)
            if flags:
                flagged.append({"id": snap.id, "flags": list(flags)})
    summary = {"case": cfg.case, "requested": n, "written": len(snaps), "failures": failures,
               "flagged": flagged, "seed": seed, "wall_time": _wall(t0, reproducible)}
    write_resolved_config(root, cfg, "generate")
    _dump_json(root / "generation_log.json", summary)
    rate = len(failures) / n
    if rate > cfg.corpus.max_failure_rate or not snaps:
        raise PipelineError(f"FOM failure rate {rate:.0%} exceeds {cfg.corpus.max_failure_rate:.0%}")
    k = 2 if cfg.case == "cavity" else 3
    ds.write_corpus(root, ds.Corpus(cfg.case, snaps, 2, k, 1 if cfg.case == "cavity" else 0))
    return summary


# -- training ----------------------------------------------------------------------------

def partition(cfg: ExperimentConfig, corpus: ds.Corpus, name: str) -> ds.Corpus:
    if name == "all":
        return corpus
    parts = dict(zip(("train", "validation", "test"), ds.split(corpus, cfg.split.fractions, cfg.split.seed)))
    part = parts[name]
    if name == "train":
        if cfg.split.train_size is not None:
            if cfg.split.train_size > len(part):
                raise ConfigError(f"split.train_size {cfg.split.train_size} exceeds the {len(part)} "
                                  "training snapshots")
            part = part.subset(part.ids[:cfg.split.train_size])
        if cfg.split.train_points is not None:
            p = cfg.split.train_points
            part = replace(part, snapshots=[ds.Snapshot(s.id, s.mu_p, s.geometry, s.points[:p], s.values[:p])
                                            for s in part.snapshots])
    return part


def read_corpus_for(cfg: ExperimentConfig, path=None) -> ds.Corpus:
    root = Path(path or cfg.paths.corpus)
    if not (root / ds.MANIFEST).exists():
        raise ConfigError(f"no corpus at {root}")
    corpus = ds.read_corpus(root)
    if corpus.case_type != cfg.case:
        raise ConfigError(f"corpus holds {corpus.case_type!r} data but the config case is {cfg.case!r}")
    return corpus


def model_spec(cfg: ExperimentConfig, table: ds.TrainingTable) -> nw.ModelSpec:
    """Network description with normalization fitted on ``table`` (training rows only)."""
    m = cfg.model
    n_p, n_g, k = table.mu_p.shape[1], table.mu_g.shape[1], table.values.shape[1]
    transforms = ["linear"] * (2 + n_p + n_g)
    if cfg.case == "cavity" and m.log_reynolds:
        transforms[2] = "log10"
    kw = {}
    if m.head == "dirichlet_mask":
        if cfg.case != "cavity":
            raise ConfigError("dirichlet_mask head is only registered for the cavity")
        suffix = m.coords.lower()
        kw = {"mask": f"cavity_walls_{suffix}", "datum": f"cavity_lid_{suffix}"}
    spec = nw.ModelSpec(n_p, n_g, m.hidden, n_outputs=k, head=m.head, coords=m.coords,
                        input_transforms=tuple(transforms), **kw)
    return nw.fit_normalization(spec, table.inputs(), table.values)


def training_table(cfg, corpus, part="train", artifacts=None):
    return ds.build_training_table(partition(cfg, corpus, part), cfg.model.coords, cfg.model.landmark_mode,
                                   artifacts)


def checkpoint_path(out, seed):
    return Path(out) / f"model_seed{seed}.usmn"


def train(cfg: ExperimentConfig, corpus=None, out=None, seeds=None, reproducible=False, artifacts=None) -> list:
    """Fit one model per seed; returns a list of ``{seed, checkpoint, final_loss}``."""
    corpus = corpus if isinstance(corpus, ds.Corpus) else read_corpus_for(cfg, corpus)
    out = Path(out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    table = training_table(cfg, corpus, "train", artifacts)
    spec = model_spec(cfg, table)
    bc = None
    if cfg.loss.bc_weight > 0:
        if cfg.case != "cavity":
            raise ConfigError("the boundary penalty is only available for the cavity")
        bc = cv.boundary_samples(cfg.loss.bc_configs, cfg.loss.bc_points, cfg.seed, cfg.fom.H_range,
                                 cfg.fom.Re_range, uc=cfg.model.coords == "UC")
    lc = tr.LossConfig(cfg.loss.discrepancy, cfg.loss.eps, bc, cfg.loss.bc_weight, cfg.loss.tikhonov)
    objective = tr.Objective(spec, table, lc)
    write_resolved_config(out, cfg, "train")
    results = []
    for seed in (seeds if seeds is not None else cfg.train_seeds):
        t0 = time.perf_counter()
        hist = tr.History(clock=not reproducible)
        try:
            w, hist = tr.train(objective, nw.build(spec, seed), cfg.optimizer.schedule(), hist)
        except tr.TrainingError as exc:
            hist.write_csv(out / f"history_seed{seed}.csv")
            raise PipelineError(f"seed {seed}: {exc}") from exc
        final = float(objective(w)[0])
        meta = {"seed": int(seed), "case": cfg.case, "landmark_mode": cfg.model.landmark_mode,
                "final_loss": final, "n_snapshots": int(len(np.unique(table.snapshot_ids))),
                "n_rows": len(table), "wall_time": _wall(t0, reproducible)}
        if cfg.case == "bifurcation":
            meta.update(mesh_h=cfg.fom.mesh_h, alpha=cfg.fom.alpha)
        path = checkpoint_path(out, seed)
        nw.save_checkpoint(path, spec, w, meta)
        hist.write_csv(out / f"history_seed{seed}.csv")
        results.append({"seed": int(seed), "checkpoint": str(path), "final_loss": final})
    return results


# -- evaluation ------------------------------------------------------------------------------

def load_model(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found")
    return nw.load_checkpoint(path)


def evaluate(cfg: ExperimentConfig, checkpoint, part=None, corpus=None, out=None, artifacts=None,
             reproducible=False) -> ev.EvalReport:
    """Metrics of a checkpoint on one partition, written as CSV and JSON."""
    spec, params, meta = load_model(checkpoint)
    part = part or cfg.evaluation.partition
    if part not in PARTITIONS:
        raise ConfigError(f"partition must be one of {PARTITIONS}")
    corpus = corpus if isinstance(corpus, ds.Corpus) else read_corpus_for(cfg, corpus)
    out = Path(out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ds.build_training_table(partition(cfg, corpus, part), spec.coords,
                                    meta.get("landmark_mode", cfg.model.landmark_mode), artifacts)
    rep = ev.evaluate_table(spec, params, table, {"checkpoint": Path(checkpoint).name, "seed": meta.get("seed"),
                                                  "partition": part, "case": cfg.case},
                            angle=cfg.evaluation.direction_angle)
    stem = f"{Path(checkpoint).stem}_{part}"
    rep.write_csv(out / f"report_{stem}.csv")
    rep.write_json(out / f"report_{stem}.json")
    write_resolved_config(out, cfg, "evaluate")
    n_exp = cfg.evaluation.export_snapshots
    if n_exp:
        sub = partition(cfg, corpus, part)
        for snap in sub.snapshots[:n_exp]:
            _export_snapshot(cfg, spec, params, meta, snap, corpus, out / f"{stem}_{snap.id}", artifacts)
    return rep


class _Domain:
    """Inside test, network inputs and bounding box for one geometry."""

    def __init__(self, spec, params, meta, mu_p=None, H=None, art=None, landmark_mode=None):
        self.spec, self.params, self.art = spec, params, art
        self.mu_p = np.atleast_1d(np.asarray(mu_p if mu_p is not None else [], dtype=float))
        if self.mu_p.size != spec.n_physical:
            raise ConfigError(f"model expects {spec.n_physical} physical parameter(s), got {self.mu_p.size}")
        if art is None:
            if H is None:
                raise ConfigError("cavity inference needs the height H")
            self.H = float(H)
            self.mu_g = cv.cavity_landmark(self.H)
            self.lo, self.hi = np.zeros(2), np.array([1.0, self.H])
        else:
            mode = landmark_mode or meta.get("landmark_mode", 26)
            self.mu_g = art.landmark_vector(mode)
            self.lo, self.hi = art.mesh.nodes.min(axis=0), art.mesh.nodes.max(axis=0)
        if self.mu_g.size != spec.n_landmarks:
            raise ConfigError(f"model expects {spec.n_landmarks} landmarks, got {self.mu_g.size}")

    def inside(self, pts):
        pts = np.atleast_2d(pts)
        if self.art is None:
            tol = 1e-12
            return np.all((pts >= -tol) & (pts <= self.hi + tol), axis=1)
        return self.art.mesh.locator().locate(pts)[0] >= 0

    def predict(self, pts):
        """Predictions and an inside mask; rows outside the domain are NaN."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ok = self.inside(pts)
        out = np.full((len(pts), self.spec.n_outputs), np.nan)
        q = pts[ok]
        if q.size:
            if self.spec.coords == "PC":
                x_in, jac = q, None
            elif self.art is None:
                x_in, jac = cv.cavity_uc_map(q, self.H), cv.cavity_uc_jacobian(self.H, len(q))
            else:
                x_in = fem.uc_map(q, self.art.mesh, self.art.uc)
                jac = fem.uc_jacobian(q, self.art.mesh, self.art.uc)
            out[ok] = nw.evaluate_batch(self.spec, self.params, x_in, self.mu_p, self.mu_g, jac)
        return out, ok


def make_domain(spec, params, meta, mu_p=None, H=None, geometry=None, landmark_mode=None):
    art = None
    if geometry is not None:
        art = geometry if isinstance(geometry, ds.GeometryArtifacts) else load_geometry_input(geometry, meta)
    return _Domain(spec, params, meta, mu_p, H, art, landmark_mode)


def load_geometry_input(path, meta):
    """Artifacts JSON from a corpus, or a bare geometry JSON meshed on the fly."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"geometry file {path} not found")
    data = json.loads(path.read_text())
    if "geometry" in data:
        return ds.load_geometry_artifacts(path.parent.parent, path.stem)
    g = gm.geometry_from_dict(data).validate()
    m = g.mesh(meta.get("mesh_h", 0.3))
    return ds.GeometryArtifacts(g, m, fem.solve_uc_fields(m, meta.get("alpha", fem.ALPHA)))


def _snapshot_domain(spec, params, meta, snap, corpus, artifacts):
    if snap.geometry["type"] == "cavity":
        return make_domain(spec, params, meta, snap.mu_p, H=snap.geometry["H"])
    gid = snap.geometry["id"]
    art = (artifacts or {}).get(gid) or ds.load_geometry_artifacts(corpus.root, gid)
    return make_domain(spec, params, meta, snap.mu_p, geometry=art)


def default_seeds(domain, n):
    """Cavity: a vertical line through the middle.  Bifurcation: across the inlet, just downstream."""
    if domain.art is None:
        x = 0.5 * (domain.lo[0] + domain.hi[0])
        ys = np.linspace(domain.lo[1], domain.hi[1], n + 2)[1:-1]
    else:
        m = domain.art.mesh
        inlet = m.nodes[m.tag_nodes("in")]
        x = inlet[:, 0].max() + 0.02 * (domain.hi[0] - domain.lo[0])
        ys = np.linspace(inlet[:, 1].min(), inlet[:, 1].max(), n + 2)[1:-1]
    return np.column_stack([np.full(n, x), ys])


def _export_snapshot(cfg, spec, params, meta, snap, corpus, prefix, artifacts):
    dom = _snapshot_domain(spec, params, meta, snap, corpus, artifacts)
    e = cfg.evaluation
    lines = ev.trace_streamlines(lambda p: np.nan_to_num(dom.predict(p)[0]), default_seeds(dom, e.streamline_seeds),
                                 e.streamline_step, e.streamline_max_steps, inside=dom.inside)
    ev.write_streamlines_csv(f"{prefix}_streamlines.csv", lines)
    pts, vals = ev.raster(lambda p: dom.predict(p)[0], dom.lo, dom.hi, e.raster)
    ev.write_raster(f"{prefix}_raster", pts, vals, e.raster)


# -- online stage --------------------------------------------------------------------------------

def read_points(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"points file {path} not found")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2:
        raise ConfigError("points file needs x,y columns")
    return data[:, :2]


def output_names(spec):
    return ["vx", "vy", "p"][:spec.n_outputs] if spec.n_outputs <= 3 else [f"u{i}" for i in range(spec.n_outputs)]


def infer(checkpoint, points, out, mu_p=None, H=None, geometry=None):
    """Landmarks, UC map and evaluation for query points; one CSV row per point.

    Rows outside the domain get status ``outside`` and empty values; the rest
    are still answered.
    """
    spec, params, meta = load_model(checkpoint)
    pts = read_points(points) if isinstance(points, (str, Path)) else np.atleast_2d(np.asarray(points, float))
    dom = make_domain(spec, params, meta, mu_p, H, geometry)
    pred, ok = dom.predict(pts)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *output_names(spec), "status"])
        for p, v, good in zip(pts, pred, ok):
            vals = [repr(float(c)) for c in v] if good else [""] * len(v)
            w.writerow([repr(float(p[0])), repr(float(p[1])), *vals, "ok" if good else "outside"])
    return pred, ok


def trace(checkpoint, out, mu_p=None, H=None, geometry=None, seeds=None, n_seeds=20, step=0.01, max_steps=2000):
    spec, params, meta = load_model(checkpoint)
    dom = make_domain(spec, params, meta, mu_p, H, geometry)
    pts = default_seeds(dom, n_seeds) if seeds is None else (
        read_points(seeds) if isinstance(seeds, (str, Path)) else np.atleast_2d(seeds))
    lines = ev.trace_streamlines(lambda p: np.nan_to_num(dom.predict(p)[0]), pts, step, max_steps, inside=dom.inside)
    for ln in lines:
        if ln.reason == "outside":
            log.warning("seed %d at %s lies outside the domain; skipped", ln.id, pts[ln.id].tolist())
    ev.write_streamlines_csv(out, lines)
    return lines


def nearest_pair(corpus_path, landmark_mode=26, out=None, part="all", cfg=None):
    corpus = ds.read_corpus(corpus_path)
    if cfg is not None:
        corpus = partition(cfg, corpus, part)
    vecs = {}
    for s in corpus.snapshots:
        if s.geometry["type"] == "cavity":
            vecs[s.id] = cv.cavity_landmark(s.geometry["H"])
        else:
            gid = s.geometry["id"]
            vecs[gid] = ds.load_geometry_artifacts(corpus.root, gid).landmark_vector(landmark_mode)
    a, b, d = ev.nearest_landmark_pair(vecs)
    result = {"id1": a, "id2": b, "distance": d, "landmark_mode": landmark_mode}
    if out:
        _dump_json(out, result)
    return result
