"""Snapshots, corpus storage and the flat training table."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import fem
from . import geometry as gm


@dataclass
class Snapshot:
    """One solution sampled at scattered points.

    ``geometry`` is a small JSON-able dict: ``{"type": "cavity", "H": ...}`` or
    ``{"type": "bifurcation", "id": ...}``.
    """

    id: str
    mu_p: np.ndarray
    geometry: dict
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.mu_p = np.atleast_1d(np.asarray(self.mu_p, dtype=float))
        self.points = np.asarray(self.points, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.points.ndim != 2 or self.values.ndim != 2:
            raise ValueError("points and values must be 2-D")
        if len(self.points) < 1 or len(self.points) != len(self.values):
            raise ValueError("snapshot needs matching, non-empty points and values")

    @property
    def n_obs(self):
        return len(self.points)


@dataclass
class TrainingTable:
    """Rows ``(x or x_hat, mu_p, mu_g) -> u`` with the owning snapshot per row."""

    coords: np.ndarray
    mu_p: np.ndarray
    mu_g: np.ndarray
    values: np.ndarray
    snapshot_ids: np.ndarray
    coord_jac: Optional[np.ndarray] = None
    declared_ids: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.values)

    def inputs(self):
        """Raw network inputs ``[coords, mu_p, mu_g]`` (a new array)."""
        return np.hstack([self.coords, self.mu_p, self.mu_g])

    def select(self, ids):
        keep = np.isin(self.snapshot_ids, list(ids))
        jac = None if self.coord_jac is None else self.coord_jac[keep]
        return TrainingTable(self.coords[keep], self.mu_p[keep], self.mu_g[keep], self.values[keep],
                             self.snapshot_ids[keep], jac)


@dataclass(frozen=True)
class ColumnStats:
    """Per-column min/max of the raw inputs and the outputs of a table."""

    input_lo: np.ndarray
    input_hi: np.ndarray
    output_lo: np.ndarray
    output_hi: np.ndarray

    @classmethod
    def fit(cls, table: TrainingTable):
        X = table.inputs()
        return cls(X.min(axis=0), X.max(axis=0), table.values.min(axis=0), table.values.max(axis=0))

    def scale_inputs(self, table: TrainingTable):
        """Inputs mapped with these statistics to [-1, 1]; the table is not touched."""
        width = np.where(self.input_hi > self.input_lo, self.input_hi - self.input_lo, 1.0)
        return 2.0 * (table.inputs() - self.input_lo) / width - 1.0


class CorpusError(ValueError):
    """Malformed, corrupted or incompatible corpus."""


FORMAT_VERSION = 1
MANIFEST = "manifest.json"
SIDECARS = {"points": "points.f8", "values": "values.f8"}
CASE_TYPES = ("cavity", "bifurcation")


@dataclass
class Corpus:
    """A set of snapshots sharing one schema ``(case_type, d, k, n_p)``."""

    case_type: str
    snapshots: list
    d: int = 2
    k: int = 2
    n_p: int = 0
    root: Optional[Path] = None  # where geometry artifacts are resolved

    def __post_init__(self):
        if self.case_type not in CASE_TYPES:
            raise CorpusError(f"unknown case type {self.case_type!r}")
        seen = set()
        for s in self.snapshots:
            if s.id in seen:
                raise CorpusError(f"duplicate snapshot id {s.id!r}")
            seen.add(s.id)
            if s.points.shape[1] != self.d or s.values.shape[1] != self.k or s.mu_p.size != self.n_p:
                raise CorpusError(f"snapshot {s.id!r} does not match the corpus schema")

    def __len__(self):
        return len(self.snapshots)

    @property
    def ids(self):
        return [s.id for s in self.snapshots]

    def subset(self, ids):
        by_id = {s.id: s for s in self.snapshots}
        return replace(self, snapshots=[by_id[i] for i in ids])


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_corpus(path, corpus: Corpus):
    """Manifest (JSON) plus two little-endian float64 sidecars with all rows."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    for s in corpus.snapshots:
        entries.append({"id": s.id, "mu_p": [float(v) for v in s.mu_p], "geometry": s.geometry,
                        "offset": offset, "n_obs": s.n_obs})
        offset += s.n_obs
    for key, name in SIDECARS.items():
        arr = [getattr(s, key) for s in corpus.snapshots]
        width = corpus.d if key == "points" else corpus.k
        data = np.vstack(arr) if arr else np.zeros((0, width))
        (root / name).write_bytes(np.ascontiguousarray(data, dtype="<f8").tobytes())
    manifest = {"format_version": FORMAT_VERSION, "case_type": corpus.case_type, "d": corpus.d,
                "k": corpus.k, "n_p": corpus.n_p, "n_rows": offset, "snapshots": entries,
                "checksums": {name: _sha256(root / name) for name in SIDECARS.values()}}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root / MANIFEST


def read_corpus(path) -> Corpus:
    """Load and verify a corpus directory (or its manifest path)."""
    root = Path(path)
    if root.name == MANIFEST:
        root = root.parent
    try:
        m = json.loads((root / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot read manifest in {root}: {exc}") from exc
    if m.get("format_version") != FORMAT_VERSION:
        raise CorpusError(f"format version {m.get('format_version')!r} != {FORMAT_VERSION}")
    for key in ("case_type", "d", "k", "n_p", "snapshots", "checksums"):
        if key not in m:
            raise CorpusError(f"manifest lacks {key!r}")
    d, k = int(m["d"]), int(m["k"])
    arrays = {}
    for key, name in SIDECARS.items():
        f = root / name
        if not f.exists():
            raise CorpusError(f"missing sidecar {name}")
        if _sha256(f) != m["checksums"].get(name):
            raise CorpusError(f"checksum mismatch for {name}")
        raw = np.frombuffer(f.read_bytes(), dtype="<f8").astype(float)
        width = d if key == "points" else k
        if raw.size % width:
            raise CorpusError(f"{name} is not a whole number of {width}-wide rows")
        arrays[key] = raw.reshape(-1, width)
    snaps = []
    for e in m["snapshots"]:
        a, n = int(e["offset"]), int(e["n_obs"])
        if n < 1 or a < 0 or a + n > len(arrays["points"]) or a + n > len(arrays["values"]):
            raise CorpusError(f"snapshot {e.get('id')!r} has an invalid row range")
        snaps.append(Snapshot(str(e["id"]), np.array(e.get("mu_p", []), dtype=float), e["geometry"],
                              arrays["points"][a:a + n], arrays["values"][a:a + n]))
    return Corpus(m["case_type"], snaps, d, k, int(m["n_p"]), root=root)


# -- geometry artifacts ----------------------------------------------------------

@dataclass
class GeometryArtifacts:
    """Everything the offline stage needs for one bifurcation geometry."""

    geometry: object
    mesh: object = None
    uc: object = None
    landmarks: dict = field(default_factory=dict)
    flow: Optional[dict] = None  # nodal vx, vy, p when a solution is stored

    def landmark_vector(self, mode):
        key = str(int(mode))
        if key not in self.landmarks:
            self.landmarks[key] = gm.extract_landmarks(self.geometry, int(mode)).tolist()
        return np.asarray(self.landmarks[key], dtype=float)


def artifact_paths(root, geometry_id):
    base = Path(root) / "geometries"
    return base / f"{geometry_id}.json", base / f"{geometry_id}.mesh"


def write_geometry_artifacts(root, art: GeometryArtifacts, modes=(6, 26)):
    meta_path, mesh_path = artifact_paths(root, art.geometry.id)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    for mode in modes:
        art.landmark_vector(mode)
    meta = {"geometry": art.geometry.to_dict(), "landmarks": art.landmarks}
    if art.mesh is not None:
        extra = {}
        if art.uc is not None:
            extra.update(psi_lr=art.uc.psi_lr, psi_td=art.uc.psi_td)
            meta["uc"] = {"x_min": art.uc.x_min, "x_max": art.uc.x_max, "alpha": art.uc.alpha}
        extra.update(art.flow or {})
        art.mesh.save(mesh_path, extra)
        meta["mesh"] = mesh_path.name
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta_path


def load_geometry_artifacts(root, geometry_id) -> GeometryArtifacts:
    meta_path, mesh_path = artifact_paths(root, geometry_id)
    if not meta_path.exists():
        raise CorpusError(f"no artifacts for geometry {geometry_id!r} under {root}")
    meta = json.loads(meta_path.read_text())
    art = GeometryArtifacts(gm.geometry_from_dict(meta["geometry"]), landmarks=meta.get("landmarks", {}))
    if "mesh" in meta:
        art.mesh, extra = gm.TriMesh.load(mesh_path, with_extra=True)
        if "uc" in meta:
            u = meta["uc"]
            art.uc = fem.UcFields(extra.pop("psi_lr"), extra.pop("psi_td"), u["x_min"], u["x_max"], u["alpha"])
        art.flow = extra or None
    return art


# -- offline table -----------------------------------------------------------------

def _bifurcation_rows(snap, art, mode, landmark_mode):
    mu_g = art.landmark_vector(landmark_mode)
    if mode == "PC":
        return snap.points, mu_g, None
    if art.uc is None or art.mesh is None:
        raise CorpusError(f"UC mode needs UC fields for geometry {art.geometry.id!r}")
    return (fem.uc_map(snap.points, art.mesh, art.uc),
            mu_g, fem.uc_jacobian(snap.points, art.mesh, art.uc))


def build_training_table(corpus: Corpus, mode="PC", landmark_mode=26, artifacts=None) -> TrainingTable:
    """Flatten a corpus into rows ``(x or x_hat, mu_p, mu_g) -> u``.

    Cavity geometries use ``mu_g = [H]`` and ``x_hat = (x, y/H)``.  For
    bifurcations ``artifacts`` maps geometry ids to :class:`GeometryArtifacts`;
    missing entries are loaded from ``corpus.root``.
    """
    if mode not in ("PC", "UC"):
        raise ValueError("mode must be 'PC' or 'UC'")
    from . import cavity  # cavity imports Snapshot from here

    if len(corpus) == 0:
        raise CorpusError("empty corpus")
    artifacts = {} if artifacts is None else artifacts
    parts = {k: [] for k in ("coords", "mu_p", "mu_g", "values", "ids", "jac")}
    for s in corpus.snapshots:
        n = s.n_obs
        if corpus.case_type == "cavity":
            H = float(s.geometry["H"])
            mu_g = cavity.cavity_landmark(H)
            coords = s.points if mode == "PC" else cavity.cavity_uc_map(s.points, H)
            jac = None if mode == "PC" else cavity.cavity_uc_jacobian(H, n)
        else:
            gid = s.geometry["id"]
            if gid not in artifacts:
                if corpus.root is None:
                    raise CorpusError(f"no artifacts for geometry {gid!r}")
                artifacts[gid] = load_geometry_artifacts(corpus.root, gid)
            coords, mu_g, jac = _bifurcation_rows(s, artifacts[gid], mode, landmark_mode)
        parts["coords"].append(np.asarray(coords, dtype=float))
        parts["mu_p"].append(np.broadcast_to(s.mu_p, (n, corpus.n_p)))
        parts["mu_g"].append(np.broadcast_to(mu_g, (n, mu_g.size)))
        parts["values"].append(s.values)
        parts["ids"].append(np.full(n, s.id, dtype=object))
        parts["jac"].append(jac)
    jac = None if mode == "PC" else np.concatenate(parts["jac"])
    return TrainingTable(np.vstack(parts["coords"]), np.vstack(parts["mu_p"]), np.vstack(parts["mu_g"]),
                         np.vstack(parts["values"]).copy(), np.concatenate(parts["ids"]), jac,
                         np.array(corpus.ids, dtype=object))


def split(corpus: Corpus, fractions=(0.8, 0.1, 0.1), seed=0):
    """Random partition by snapshot into (train, validation, test).

    Counts use largest-remainder rounding, so 700 snapshots at
    (5/7, 1/7, 1/7) give exactly 500/100/100.
    """
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError("need three non-negative fractions summing to 1")
    n = len(corpus)
    raw = f * n
    counts = np.floor(raw + 1e-9).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if np.any(counts == 0):
        raise ValueError(f"empty partition for {n} snapshots with fractions {f.tolist()}")
    order = np.random.default_rng(seed).permutation(n)
    ids = np.array(corpus.ids, dtype=object)[order]
    cuts = np.cumsum(counts)[:-1]
    return tuple(corpus.subset(list(part)) for part in np.split(ids, cuts))
