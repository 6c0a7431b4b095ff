"""USM-Net model assembly: input transforms, fully connected core, output heads.

Input columns are ordered ``[x (d), mu_p (n_p), mu_g (n_g)]`` where ``x`` is
either the physical coordinate (PC) or the universal coordinate (UC).

Heads
-----
``velocity``       affine de-normalization of the ``k`` core outputs.
``potential``      core emits a scalar potential; the output is its 2D curl
                   ``(+d/dy, -d/dx)`` in physical coordinates, hence exactly
                   divergence free.
``dirichlet_mask`` ``u = u_D + mask * denorm(core)`` with registered closures.
``nonnegative``    ``u = denorm(core)**2``.
``symmetric``      selected inputs enter as ``|x_i - axis_i|``.
"""

from __future__ import annotations

import functools
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

HEADS = ("velocity", "potential", "dirichlet_mask", "nonnegative", "symmetric")
TRANSFORMS = ("linear", "log10")


@dataclass(frozen=True)
class ModelSpec:
    n_physical: int
    n_landmarks: int
    hidden: tuple
    n_outputs: int = 2
    spatial_dim: int = 2
    head: str = "velocity"
    coords: str = "PC"
    input_transforms: tuple = ()
    # normalization ranges in transformed input space / output space
    input_lo: tuple = ()
    input_hi: tuple = ()
    output_lo: tuple = ()
    output_hi: tuple = ()
    mask: Optional[str] = None
    datum: Optional[str] = None
    symmetric_inputs: tuple = ()
    symmetric_axes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        n = self.n_inputs
        if not self.input_transforms:
            object.__setattr__(self, "input_transforms", ("linear",) * n)
        if not self.input_lo:
            object.__setattr__(self, "input_lo", (-1.0,) * n)
            object.__setattr__(self, "input_hi", (1.0,) * n)
        if not self.output_lo:
            object.__setattr__(self, "output_lo", (-1.0,) * self.n_outputs)
            object.__setattr__(self, "output_hi", (1.0,) * self.n_outputs)
        for name in ("input_transforms", "input_lo", "input_hi", "output_lo",
                     "output_hi", "symmetric_inputs", "symmetric_axes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def n_inputs(self) -> int:
        return self.spatial_dim + self.n_physical + self.n_landmarks

    @property
    def core_outputs(self) -> int:
        return 1 if self.head == "potential" else self.n_outputs

    @property
    def layer_widths(self) -> list:
        return [self.n_inputs, *self.hidden, self.core_outputs]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def validate(self):
        if len(self.hidden) == 0 or min(self.hidden) < 1:
            raise ValueError("at least one hidden layer with positive width is required")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.coords not in ("PC", "UC"):
            raise ValueError("coords must be 'PC' or 'UC'")
        if min(self.n_physical, self.n_landmarks, self.spatial_dim) < 0 or self.n_outputs < 1:
            raise ValueError("negative dimension")
        n = self.n_inputs
        if len(self.input_transforms) != n or any(t not in TRANSFORMS for t in self.input_transforms):
            raise ValueError("one transform ('linear' or 'log10') per input required")
        if len(self.input_lo) != n or len(self.input_hi) != n:
            raise ValueError("input normalization ranges have wrong length")
        if len(self.output_lo) != self.n_outputs or len(self.output_hi) != self.n_outputs:
            raise ValueError("output normalization ranges have wrong length")
        if any(h <= l for l, h in zip(self.input_lo + self.output_lo, self.input_hi + self.output_hi)):
            raise ValueError("normalization intervals must have positive width")
        if self.head == "potential" and (self.spatial_dim != 2 or self.n_outputs != 2):
            raise ValueError("potential head needs d = 2 and k = 2")
        if self.head == "dirichlet_mask":
            if self.mask not in MASKS or self.datum not in DATA:
                raise ValueError("dirichlet_mask head needs registered mask and datum names")
        if self.head == "symmetric":
            if not self.symmetric_inputs or len(self.symmetric_axes) != len(self.symmetric_inputs):
                raise ValueError("symmetric head needs input indices and one axis value each")
            if any(not 0 <= i < n for i in self.symmetric_inputs):
                raise ValueError("symmetric input index out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        for k in ("hidden", "input_transforms", "input_lo", "input_hi", "output_lo",
                  "output_hi", "symmetric_inputs", "symmetric_axes"):
            d[k] = tuple(d[k])
        return cls(**d)


# -- mask / datum registry ---------------------------------------------------
# Closures take (xs, mu_p, mu_g) row arrays and return (B, 1) or (B, k) arrays.

MASKS: dict[str, Callable] = {}
DATA: dict[str, Callable] = {}


def register_mask(name: str):
    def deco(fn):
        MASKS[name] = fn
        return fn
    return deco


def register_datum(name: str):
    def deco(fn):
        DATA[name] = fn
        return fn
    return deco


def _cavity_unit(xs, mu_g, uc):
    yhat = xs[:, 1] if uc else xs[:, 1] / mu_g[:, 0]
    return xs[:, 0], yhat


@register_mask("cavity_walls_pc")
def _mask_cavity_pc(xs, mu_p, mu_g):
    x, yh = _cavity_unit(xs, mu_g, uc=False)
    return (16.0 * x * (1 - x) * yh * (1 - yh))[:, None]


@register_mask("cavity_walls_uc")
def _mask_cavity_uc(xs, mu_p, mu_g):
    x, yh = _cavity_unit(xs, mu_g, uc=True)
    return (16.0 * x * (1 - x) * yh * (1 - yh))[:, None]


def _lid(yh, tol=1e-12):
    out = np.zeros((yh.size, 2))
    out[yh >= 1.0 - tol, 0] = 1.0
    return out


@register_datum("cavity_lid_pc")
def _datum_lid_pc(xs, mu_p, mu_g):
    return _lid(_cavity_unit(xs, mu_g, uc=False)[1])


@register_datum("cavity_lid_uc")
def _datum_lid_uc(xs, mu_p, mu_g):
    return _lid(_cavity_unit(xs, mu_g, uc=True)[1])


@register_datum("zero")
def _datum_zero(xs, mu_p, mu_g):
    return np.zeros((xs.shape[0], 1))


# -- parameters ----------------------------------------------------------------

def build(spec: ModelSpec, seed: int = 0) -> np.ndarray:
    """Glorot-uniform weights and zero biases, flattened layer by layer."""
    rng = np.random.default_rng(seed)
    w = spec.layer_widths
    chunks = []
    for a, b in zip(w[:-1], w[1:]):
        lim = np.sqrt(6.0 / (a + b))
        chunks.append(rng.uniform(-lim, lim, size=b * a))
        chunks.append(np.zeros(b))
    return np.concatenate(chunks)


# -- normalization ---------------------------------------------------------------

def _transformed(spec: ModelSpec, raw: np.ndarray) -> np.ndarray:
    z = np.array(raw, dtype=float, copy=True)
    for i, ax in zip(spec.symmetric_inputs, spec.symmetric_axes):
        z[:, i] = np.abs(z[:, i] - ax)
    for i, tr in enumerate(spec.input_transforms):
        if tr == "log10":
            if np.any(z[:, i] <= 0):
                raise ValueError(f"non-positive value in log10-transformed input {i}")
            z[:, i] = np.log10(z[:, i])
    return z


def apply_input_transform(spec: ModelSpec, raw) -> np.ndarray:
    """Map raw inputs to the network's [-1, 1] input space."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    if raw.shape[1] != spec.n_inputs:
        raise ValueError(f"expected {spec.n_inputs} input columns, got {raw.shape[1]}")
    z = _transformed(spec, raw)
    lo, hi = np.array(spec.input_lo), np.array(spec.input_hi)
    return 2.0 * (z - lo) / (hi - lo) - 1.0


def normalize_outputs(spec: ModelSpec, u):
    lo, hi = np.array(spec.output_lo), np.array(spec.output_hi)
    return 2.0 * (np.asarray(u, dtype=float) - lo) / (hi - lo) - 1.0


def denormalize_outputs(spec: ModelSpec, z):
    lo, hi = np.array(spec.output_lo), np.array(spec.output_hi)
    return lo + (np.asarray(z, dtype=float) + 1.0) * (hi - lo) / 2.0


def _padded_range(lo, hi):
    lo, hi = float(lo), float(hi)
    if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
        pad = max(0.5 * abs(lo), 0.5)
        return lo - pad, hi + pad
    return lo, hi


def fit_normalization(spec: ModelSpec, raw_inputs, outputs) -> ModelSpec:
    """Return ``spec`` with ranges computed from (training) data.

    Degenerate ranges are widened so every interval has positive width.
    """
    raw_inputs = np.atleast_2d(np.asarray(raw_inputs, dtype=float))
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    z = _transformed(spec, raw_inputs)
    ins = [_padded_range(z[:, i].min(), z[:, i].max()) for i in range(spec.n_inputs)]
    if spec.head == "nonnegative":
        outputs = np.sqrt(np.maximum(outputs, 0.0))
    outs = [_padded_range(outputs[:, i].min(), outputs[:, i].max()) for i in range(spec.n_outputs)]
    return replace(spec, input_lo=tuple(a for a, _ in ins), input_hi=tuple(b for _, b in ins),
                   output_lo=tuple(a for a, _ in outs), output_hi=tuple(b for _, b in outs))


def out_of_range(spec: ModelSpec, raw_inputs, tol: float = 1e-9) -> np.ndarray:
    """Boolean per row: some normalized input lies outside [-1, 1]."""
    n = apply_input_transform(spec, raw_inputs)
    return np.any(np.abs(n) > 1.0 + tol, axis=1)


# -- tape assembly ------------------------------------------------------------

def potential_scale(spec: ModelSpec) -> float:
    out_half = max((h - l) / 2 for l, h in zip(spec.output_lo, spec.output_hi))
    in_half = min((spec.input_hi[i] - spec.input_lo[i]) / 2 for i in range(spec.spatial_dim))
    return out_half * in_half


def _core(t: ad.Tape, spec: ModelSpec) -> int:
    h = 0
    widths = spec.layer_widths
    for i, w in enumerate(widths[1:]):
        h = t.affine(h, w)
        if i < len(widths) - 2:
            h = t.tanh(h)
    return h


def attach_head(t: ad.Tape, h: int, spec: ModelSpec) -> ad.Tape:
    """Append the output head of ``spec`` to core node ``h``; returns the tape to use."""
    lo, hi = np.array(spec.output_lo), np.array(spec.output_hi)
    half, mid = (hi - lo) / 2, (hi + lo) / 2
    if spec.head in ("velocity", "symmetric"):
        out = t.scale_shift(h, half, mid)
    elif spec.head == "nonnegative":
        out = t.square(t.scale_shift(h, half, mid))
    elif spec.head == "dirichlet_mask":
        core = t.scale_shift(h, half, mid)
        out = t.add(t.aux("datum", spec.n_outputs), t.mul(t.aux("mask", 1), core))
    elif spec.head == "potential":
        t.set_outputs([h])
        ext, ids = ad.with_tangents(t, [0, 1])
        g0, g1 = ids[0][0], ids[1][0]  # d psi / d n_x, d psi / d n_y
        # jac row: [dn0/dx, dn0/dy, dn1/dx, dn1/dy]
        jac = ext.aux("jac", 4)
        j00, j01, j10, j11 = (ext.take(jac, [c]) for c in range(4))
        dpsi_dx = ext.add(ext.mul(g0, j00), ext.mul(g1, j10))
        dpsi_dy = ext.add(ext.mul(g0, j01), ext.mul(g1, j11))
        s = potential_scale(spec)
        vx = ext.scale_shift(dpsi_dy, s, mid[0])
        vy = ext.scale_shift(dpsi_dx, -s, mid[1])
        return ext.set_outputs([ext.concat([vx, vy])])
    else:  # pragma: no cover
        raise ValueError(spec.head)
    return t.set_outputs([out])


@functools.lru_cache(maxsize=64)
def model_tape(spec: ModelSpec) -> ad.Tape:
    """Tape mapping normalized inputs (plus head auxiliaries) to physical outputs."""
    t = ad.Tape(spec.n_inputs)
    return attach_head(t, _core(t, spec), spec)


@functools.lru_cache(maxsize=64)
def potential_tape(spec: ModelSpec) -> ad.Tape:
    """Scalar potential (scaled, physical units) as a separate tape."""
    if spec.head != "potential":
        raise ValueError("potential_tape needs a potential-head spec")
    t = ad.Tape(spec.n_inputs)
    return t.set_outputs([t.scale_shift(_core(t, spec), potential_scale(spec))])


def _stack_inputs(spec, x, mu_p, mu_g):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B = x.shape[0]

    def cols(a, n, name):
        if a is None:
            a = np.zeros((B, 0))
        a = np.asarray(a, dtype=float)
        if a.ndim <= 1:
            a = a.reshape(1, -1) if a.size == n else a.reshape(-1, 1)
        if a.shape[0] == 1:
            a = np.broadcast_to(a, (B, a.shape[1]))
        if a.shape != (B, n):
            raise ValueError(f"{name} has shape {a.shape}, expected {(B, n)}")
        return a

    if x.shape[1] != spec.spatial_dim:
        raise ValueError(f"point dimension {x.shape[1]} != {spec.spatial_dim}")
    return np.hstack([x, cols(mu_p, spec.n_physical, "mu_p"), cols(mu_g, spec.n_landmarks, "mu_g")])


def head_aux(spec: ModelSpec, raw: np.ndarray, coord_jac=None) -> dict:
    """Auxiliary per-row arrays the head needs (mask, datum, Jacobian)."""
    d, n_p = spec.spatial_dim, spec.n_physical
    xs, mu_p, mu_g = raw[:, :d], raw[:, d:d + n_p], raw[:, d + n_p:]
    if spec.head == "dirichlet_mask":
        datum = DATA[spec.datum](xs, mu_p, mu_g)
        datum = np.broadcast_to(datum, (raw.shape[0], spec.n_outputs))
        return {"mask": MASKS[spec.mask](xs, mu_p, mu_g), "datum": datum}
    if spec.head == "potential":
        B = raw.shape[0]
        if coord_jac is None:
            J = np.broadcast_to(np.eye(2), (B, 2, 2))
        else:
            J = np.asarray(coord_jac, dtype=float).reshape(B, 2, 2)
        scale = 2.0 / (np.array(spec.input_hi[:2]) - np.array(spec.input_lo[:2]))
        Jn = J * scale[None, :, None]
        return {"jac": Jn.reshape(B, 4)}
    return {}


def prepare(spec: ModelSpec, x, mu_p=None, mu_g=None, coord_jac=None):
    """Normalized tape inputs and auxiliaries for a batch of query rows."""
    raw = _stack_inputs(spec, x, mu_p, mu_g)
    return apply_input_transform(spec, raw), head_aux(spec, raw, coord_jac)


def evaluate_batch(spec: ModelSpec, params, x, mu_p=None, mu_g=None, coord_jac=None,
                   rowstable: bool = True) -> np.ndarray:
    """Row-wise model evaluation, shape ``(B, k)``.

    ``coord_jac`` (``(B, 2, 2)``, d x_in / d x_phys) is only used by the
    potential head; identity when omitted.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return np.zeros((0, spec.n_outputs))
    params = np.asarray(params, dtype=float)
    if params.size != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {params.size}")
    inputs, aux = prepare(spec, x, mu_p, mu_g, coord_jac)
    return ad.forward(model_tape(spec), params, inputs, aux=aux, rowstable=rowstable)


def evaluate(spec: ModelSpec, params, x, mu_p=None, mu_g=None, coord_jac=None) -> np.ndarray:
    """Single query point; returns the length-``k`` solution vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("evaluate takes one point; use evaluate_batch for many")
    mp = None if mu_p is None else np.atleast_1d(mu_p)[None, :]
    mg = None if mu_g is None else np.atleast_1d(mu_g)[None, :]
    cj = None if coord_jac is None else np.asarray(coord_jac)[None]
    return evaluate_batch(spec, params, x[None, :], mp, mg, cj)[0]


def divergence(spec: ModelSpec, params, x, mu_p=None, mu_g=None) -> np.ndarray:
    """d v_x/dx + d v_y/dy of the model output via forward tangents (PC inputs)."""
    inputs, aux = prepare(spec, x, mu_p, mu_g)
    tape = model_tape(spec)
    scale = 2.0 / (np.array(spec.input_hi[:2]) - np.array(spec.input_lo[:2]))
    db = ad.spatial_jacobian(tape, params, inputs, [0, 1], aux=aux)
    return db.tangents[:, 0, 0] * scale[0] + db.tangents[:, 1, 1] * scale[1]


# -- checkpoint ------------------------------------------------------------------

MAGIC = b"USMN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, params, meta: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, version, JSON header, float64-LE weights."""
    params = np.asarray(params, dtype="<f8")
    header = json.dumps({"spec": json.loads(spec.to_json()), "n_params": int(params.size),
                         "meta": meta or {}}, sort_keys=True).encode()
    norm = np.array(spec.input_lo + spec.input_hi + spec.output_lo + spec.output_hi, dtype="<f8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(params.tobytes())
    buf.write(norm.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(spec, params, meta)``; normalization restored bit-exactly."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a USM-Net checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    off = 12 + hlen
    n = header["n_params"]
    params = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
    off += 8 * n
    d = header["spec"]
    ni, no = len(d["input_lo"]), len(d["output_lo"])
    norm = np.frombuffer(data, dtype="<f8", count=2 * ni + 2 * no, offset=off)
    d["input_lo"], d["input_hi"] = tuple(norm[:ni]), tuple(norm[ni:2 * ni])
    d["output_lo"], d["output_hi"] = tuple(norm[2 * ni:2 * ni + no]), tuple(norm[2 * ni + no:])
    for k in ("hidden", "input_transforms", "symmetric_inputs", "symmetric_axes"):
        d[k] = tuple(d[k])
    spec = ModelSpec(**d)
    return spec, params, header.get("meta", {})
