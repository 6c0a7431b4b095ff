"""Small batched differentiation engine for fully connected networks.

A :class:`Tape` is a straight-line program over row batches: every node holds
a ``(batch, width)`` array (or ``(1, width)`` for row-independent values that
broadcast).  Reverse sweeps give exact gradients with respect to the flat
parameter vector.  Spatial derivatives are obtained by :func:`with_tangents`,
which appends the forward-mode tangent program to the tape as ordinary nodes,
so a reverse sweep through the extended tape differentiates the tangents too
(mixed second derivatives, e.g. parameter gradients of a curl).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Tape",
    "DualBatch",
    "forward",
    "grad_params",
    "spatial_jacobian",
    "with_tangents",
]


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple
    width: int
    attrs: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass
class DualBatch:
    """Primal outputs with their Jacobian columns w.r.t. selected inputs.

    ``primal`` has shape ``(B, k)`` and ``tangents`` shape ``(B, k, d)``.
    """

    primal: np.ndarray
    tangents: np.ndarray


class Tape:
    """Straight-line program; node 0 is the input batch."""

    def __init__(self, n_inputs: int, n_params: int = 0):
        if n_inputs < 0:
            raise ValueError("n_inputs must be non-negative")
        self.n_inputs = int(n_inputs)
        self.n_params = int(n_params)
        self.nodes: list[Node] = [Node("input", (), self.n_inputs)]
        self.outputs: list[int] = []
        self.aux_names: list[str] = []

    # -- construction -------------------------------------------------
    def _push(self, op, args=(), width=None, **attrs) -> int:
        for a in args:
            if not 0 <= a < len(self.nodes):
                raise ValueError(f"node {a} does not precede new node")
        self.nodes.append(Node(op, tuple(args), int(width), attrs))
        return len(self.nodes) - 1

    def width(self, i: int) -> int:
        return self.nodes[i].width

    def allocate(self, size: int) -> int:
        off = self.n_params
        self.n_params += int(size)
        return off

    def param(self, width: int, offset: Optional[int] = None) -> int:
        off = self.allocate(width) if offset is None else offset
        return self._push("param", (), width, offset=off)

    def const(self, value) -> int:
        v = np.atleast_2d(np.asarray(value, dtype=float))
        if v.shape[0] != 1:
            raise ValueError("constants must be a single broadcast row")
        return self._push("const", (), v.shape[1], value=v)

    def aux(self, name: str, width: int) -> int:
        if name not in self.aux_names:
            self.aux_names.append(name)
        return self._push("aux", (), width, name=name)

    def affine(self, x: int, n_out: int, bias: bool = True,
               w_offset: Optional[int] = None, b_offset: Optional[int] = None) -> int:
        n_in = self.width(x)
        if w_offset is None:
            w_offset = self.allocate(n_out * n_in)
        if bias and b_offset is None:
            b_offset = self.allocate(n_out)
        return self._push("affine", (x,), n_out, w=w_offset, n_in=n_in,
                          b=b_offset if bias else None)

    def scale_shift(self, x: int, scale, shift=0.0) -> int:
        w = self.width(x)
        s = np.broadcast_to(np.asarray(scale, dtype=float), (w,)).copy()
        c = np.broadcast_to(np.asarray(shift, dtype=float), (w,)).copy()
        return self._push("scale_shift", (x,), w, scale=s, shift=c)

    def tanh(self, x: int) -> int:
        return self._push("tanh", (x,), self.width(x))

    def square(self, x: int) -> int:
        return self._push("square", (x,), self.width(x))

    def abs(self, x: int) -> int:
        return self._push("abs", (x,), self.width(x))

    def sign(self, x: int) -> int:
        return self._push("sign", (x,), self.width(x))

    def reciprocal(self, x: int) -> int:
        return self._push("reciprocal", (x,), self.width(x))

    def sqrt_floor(self, x: int, floor: float = 1e-30) -> int:
        """sqrt(max(x, floor)); derivative is zero below the floor."""
        return self._push("sqrt_floor", (x,), self.width(x), floor=float(floor))

    def _dsqrt_floor(self, x: int, floor: float) -> int:
        return self._push("dsqrt_floor", (x,), self.width(x), floor=float(floor))

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b), self._bwidth(a, b))

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.scale_shift(b, -1.0))

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b), self._bwidth(a, b))

    def take(self, x: int, cols: Sequence[int]) -> int:
        cols = tuple(int(c) for c in cols)
        if any(not 0 <= c < self.width(x) for c in cols):
            raise ValueError("column index out of range")
        return self._push("take", (x,), len(cols), cols=cols)

    def concat(self, parts: Sequence[int]) -> int:
        parts = tuple(parts)
        return self._push("concat", parts, sum(self.width(p) for p in parts))

    def sum_cols(self, x: int) -> int:
        return self._push("sum_cols", (x,), 1)

    def set_outputs(self, ids: Sequence[int]) -> "Tape":
        self.outputs = [int(i) for i in ids]
        return self

    def _bwidth(self, a: int, b: int) -> int:
        wa, wb = self.width(a), self.width(b)
        if wa != wb and 1 not in (wa, wb):
            raise ValueError(f"width mismatch {wa} vs {wb}")
        return max(wa, wb)

    @property
    def n_outputs(self) -> int:
        return sum(self.width(i) for i in self.outputs)

    def copy(self) -> "Tape":
        t = Tape(self.n_inputs, self.n_params)
        t.nodes = list(self.nodes)
        t.outputs = list(self.outputs)
        t.aux_names = list(self.aux_names)
        return t


# -- evaluation ---------------------------------------------------------

def _matmul_t(x, W, rowstable):
    # einsum keeps every row's reduction order independent of the batch size
    if rowstable:
        return np.einsum("bk,ok->bo", x, W)
    return x @ W.T


def _check_inputs(tape: Tape, params, inputs, aux):
    params = np.asarray(params, dtype=float)
    if params.ndim != 1 or params.size != tape.n_params:
        raise ValueError(f"expected {tape.n_params} parameters, got {params.size}")
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != tape.n_inputs:
        raise ValueError(f"input arity {x.shape[-1]} does not match tape arity {tape.n_inputs}")
    aux = dict(aux or {})
    for name in tape.aux_names:
        if name not in aux:
            raise ValueError(f"missing auxiliary input {name!r}")
    return params, x, aux


def _run(tape: Tape, params, x, aux, rowstable):
    vals: list = [None] * len(tape.nodes)
    vals[0] = x
    for i, nd in enumerate(tape.nodes):
        if i == 0:
            continue
        op, a = nd.op, nd.args
        if op == "affine":
            xi = vals[a[0]]
            W = params[nd.attrs["w"]: nd.attrs["w"] + nd.width * nd.attrs["n_in"]].reshape(nd.width, nd.attrs["n_in"])
            y = _matmul_t(xi, W, rowstable)
            if nd.attrs["b"] is not None:
                y = y + params[nd.attrs["b"]: nd.attrs["b"] + nd.width]
            vals[i] = y
        elif op == "tanh":
            vals[i] = np.tanh(vals[a[0]])
        elif op == "square":
            vals[i] = vals[a[0]] * vals[a[0]]
        elif op == "abs":
            vals[i] = np.abs(vals[a[0]])
        elif op == "sign":
            vals[i] = np.sign(vals[a[0]])
        elif op == "reciprocal":
            vals[i] = 1.0 / vals[a[0]]
        elif op == "sqrt_floor":
            vals[i] = np.sqrt(np.maximum(vals[a[0]], nd.attrs["floor"]))
        elif op == "dsqrt_floor":
            v = vals[a[0]]
            vals[i] = np.where(v > nd.attrs["floor"], 0.5 / np.sqrt(np.maximum(v, nd.attrs["floor"])), 0.0)
        elif op == "add":
            vals[i] = vals[a[0]] + vals[a[1]]
        elif op == "mul":
            vals[i] = vals[a[0]] * vals[a[1]]
        elif op == "scale_shift":
            vals[i] = vals[a[0]] * nd.attrs["scale"] + nd.attrs["shift"]
        elif op == "take":
            vals[i] = vals[a[0]][:, list(nd.attrs["cols"])]
        elif op == "concat":
            parts = [vals[j] for j in a]
            rows = max(p.shape[0] for p in parts)
            vals[i] = np.concatenate([np.broadcast_to(p, (rows, p.shape[1])) for p in parts], axis=1)
        elif op == "sum_cols":
            vals[i] = vals[a[0]].sum(axis=1, keepdims=True)
        elif op == "param":
            o = nd.attrs["offset"]
            vals[i] = params[o:o + nd.width][None, :]
        elif op == "const":
            vals[i] = nd.attrs["value"]
        elif op == "aux":
            v = np.asarray(aux[nd.attrs["name"]], dtype=float)
            if v.ndim == 1:
                v = v[:, None]
            if v.shape[1] != nd.width:
                raise ValueError(f"auxiliary input {nd.attrs['name']!r} has width {v.shape[1]}, expected {nd.width}")
            vals[i] = v
        else:  # pragma: no cover
            raise ValueError(f"unknown op {op}")
    return vals


def _gather_outputs(tape, vals, batch):
    if not tape.outputs:
        return np.zeros((batch, 0))
    outs = [np.broadcast_to(vals[i], (batch, tape.width(i))) for i in tape.outputs]
    return np.concatenate(outs, axis=1)


def forward(tape: Tape, params, inputs, aux=None, rowstable: bool = False,
            return_values: bool = False):
    """Evaluate the tape outputs for a batch of inputs.

    A 1-D ``inputs`` is treated as a single row and a 1-D result is returned.
    """
    single = np.ndim(inputs) == 1
    params, x, aux = _check_inputs(tape, params, inputs, aux)
    vals = _run(tape, params, x, aux, rowstable)
    out = _gather_outputs(tape, vals, x.shape[0])
    if single:
        out = out[0]
    if return_values:
        return out, vals
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _accumulate(adj, i, g):
    if adj[i] is None:
        adj[i] = g
    elif adj[i].shape == g.shape:
        adj[i] = adj[i] + g
    else:
        adj[i] = np.broadcast_to(adj[i], np.broadcast_shapes(adj[i].shape, g.shape)) + g


def grad_params(tape: Tape, params, inputs, output_seed, aux=None,
                values=None, rowstable: bool = False, return_input_grad: bool = False):
    """Gradient of ``sum(output_seed * outputs)`` w.r.t. the parameters.

    ``output_seed`` has the shape of the outputs returned by :func:`forward`.
    ``values`` may carry the node buffer from a previous forward call on the
    same inputs to skip re-evaluation.
    """
    params, x, aux = _check_inputs(tape, params, inputs, aux)
    B = x.shape[0]
    seed = np.asarray(output_seed, dtype=float)
    if seed.ndim == 1:
        seed = seed[None, :]
    if seed.shape != (B, tape.n_outputs):
        raise ValueError(f"seed shape {seed.shape} does not match outputs {(B, tape.n_outputs)}")
    vals = values if values is not None else _run(tape, params, x, aux, rowstable)

    adj: list = [None] * len(tape.nodes)
    col = 0
    for i in tape.outputs:
        w = tape.width(i)
        _accumulate(adj, i, _unbroadcast(seed[:, col:col + w], vals[i].shape))
        col += w

    grad = np.zeros(tape.n_params)
    for i in range(len(tape.nodes) - 1, 0, -1):
        g = adj[i]
        if g is None:
            continue
        nd = tape.nodes[i]
        op, a = nd.op, nd.args
        if op == "affine":
            xi = vals[a[0]]
            n_in = nd.attrs["n_in"]
            o = nd.attrs["w"]
            W = params[o:o + nd.width * n_in].reshape(nd.width, n_in)
            if xi.shape[0] != g.shape[0]:
                xi = np.broadcast_to(xi, (g.shape[0], n_in))
            grad[o:o + nd.width * n_in] += (g.T @ xi).ravel()
            if nd.attrs["b"] is not None:
                b = nd.attrs["b"]
                grad[b:b + nd.width] += g.sum(axis=0)
            _accumulate(adj, a[0], _unbroadcast(g @ W, vals[a[0]].shape))
        elif op == "tanh":
            y = vals[i]
            _accumulate(adj, a[0], _unbroadcast(g * (1.0 - y * y), vals[a[0]].shape))
        elif op == "square":
            _accumulate(adj, a[0], _unbroadcast(2.0 * g * vals[a[0]], vals[a[0]].shape))
        elif op == "abs":
            _accumulate(adj, a[0], _unbroadcast(g * np.sign(vals[a[0]]), vals[a[0]].shape))
        elif op == "sign":
            continue
        elif op == "reciprocal":
            y = vals[i]
            _accumulate(adj, a[0], _unbroadcast(-g * y * y, vals[a[0]].shape))
        elif op == "sqrt_floor":
            v = vals[a[0]]
            fl = nd.attrs["floor"]
            d = np.where(v > fl, 0.5 / vals[i], 0.0)
            _accumulate(adj, a[0], _unbroadcast(g * d, v.shape))
        elif op == "dsqrt_floor":
            v = vals[a[0]]
            fl = nd.attrs["floor"]
            vs = np.maximum(v, fl)
            d = np.where(v > fl, -0.25 / (vs * np.sqrt(vs)), 0.0)
            _accumulate(adj, a[0], _unbroadcast(g * d, v.shape))
        elif op == "add":
            _accumulate(adj, a[0], _unbroadcast(g, vals[a[0]].shape))
            _accumulate(adj, a[1], _unbroadcast(g, vals[a[1]].shape))
        elif op == "mul":
            _accumulate(adj, a[0], _unbroadcast(g * vals[a[1]], vals[a[0]].shape))
            _accumulate(adj, a[1], _unbroadcast(g * vals[a[0]], vals[a[1]].shape))
        elif op == "scale_shift":
            _accumulate(adj, a[0], _unbroadcast(g * nd.attrs["scale"], vals[a[0]].shape))
        elif op == "take":
            src = vals[a[0]]
            full = np.zeros((g.shape[0], src.shape[1]))
            np.add.at(full, (slice(None), list(nd.attrs["cols"])), g)
            _accumulate(adj, a[0], _unbroadcast(full, src.shape))
        elif op == "concat":
            c = 0
            for j in a:
                w = tape.width(j)
                _accumulate(adj, j, _unbroadcast(g[:, c:c + w], vals[j].shape))
                c += w
        elif op == "sum_cols":
            src = vals[a[0]]
            _accumulate(adj, a[0], _unbroadcast(np.broadcast_to(g, (g.shape[0], src.shape[1])), src.shape))
        elif op == "param":
            o = nd.attrs["offset"]
            grad[o:o + nd.width] += g.sum(axis=0)
    if return_input_grad:
        g0 = adj[0] if adj[0] is not None else np.zeros_like(x)
        return grad, np.broadcast_to(g0, x.shape).copy()
    return grad


# -- forward-mode tangents recorded on the tape ---------------------------

def with_tangents(tape: Tape, spatial_index_set: Sequence[int]):
    """Return ``(extended_tape, tangent_ids)``.

    The extended tape has the original outputs followed by, for each selected
    input column ``j`` and each original output node, the derivative of that
    output w.r.t. input ``j``.  ``tangent_ids[j_pos][out_pos]`` is the node id
    of d(output)/d(input j).
    """
    idx = [int(j) for j in spatial_index_set]
    for j in idx:
        if not 0 <= j < tape.n_inputs:
            raise ValueError(f"spatial index {j} out of range for {tape.n_inputs} inputs")
    t = tape.copy()
    n_orig = len(tape.nodes)
    # derived quantities shared across directions
    cache: dict = {}

    def shared(key, build):
        if key not in cache:
            cache[key] = build()
        return cache[key]

    tangent_ids = []
    for j in idx:
        tan: list = [None] * n_orig
        onehot = np.zeros((1, tape.n_inputs))
        onehot[0, j] = 1.0
        tan[0] = t.const(onehot)
        for i in range(1, n_orig):
            nd = tape.nodes[i]
            op, a = nd.op, nd.args
            if op in ("param", "const", "aux", "sign", "dsqrt_floor"):
                continue
            ts = [tan[k] for k in a]
            if all(s is None for s in ts):
                continue
            if op == "affine":
                tan[i] = t.affine(ts[0], nd.width, bias=False, w_offset=nd.attrs["w"])
            elif op == "scale_shift":
                tan[i] = t.scale_shift(ts[0], nd.attrs["scale"], 0.0)
            elif op == "tanh":
                d = shared(("tanh", i), lambda: t.scale_shift(t.square(i), -1.0, 1.0))
                tan[i] = t.mul(d, ts[0])
            elif op == "square":
                d = shared(("square", i), lambda: t.scale_shift(a[0], 2.0))
                tan[i] = t.mul(d, ts[0])
            elif op == "abs":
                d = shared(("abs", i), lambda: t.sign(a[0]))
                tan[i] = t.mul(d, ts[0])
            elif op == "reciprocal":
                d = shared(("recip", i), lambda: t.scale_shift(t.square(i), -1.0))
                tan[i] = t.mul(d, ts[0])
            elif op == "sqrt_floor":
                d = shared(("sqrt", i), lambda: t._dsqrt_floor(a[0], nd.attrs["floor"]))
                tan[i] = t.mul(d, ts[0])
            elif op == "add":
                if ts[0] is None:
                    tan[i] = ts[1] if t.width(ts[1]) == nd.width else t.add(ts[1], t.const(np.zeros(nd.width)))
                elif ts[1] is None:
                    tan[i] = ts[0] if t.width(ts[0]) == nd.width else t.add(ts[0], t.const(np.zeros(nd.width)))
                else:
                    tan[i] = t.add(ts[0], ts[1])
            elif op == "mul":
                terms = []
                if ts[0] is not None:
                    terms.append(t.mul(ts[0], a[1]))
                if ts[1] is not None:
                    terms.append(t.mul(a[0], ts[1]))
                tan[i] = terms[0] if len(terms) == 1 else t.add(terms[0], terms[1])
            elif op == "take":
                tan[i] = t.take(ts[0], nd.attrs["cols"])
            elif op == "concat":
                parts = [s if s is not None else t.const(np.zeros(tape.width(k)))
                         for s, k in zip(ts, a)]
                tan[i] = t.concat(parts)
            elif op == "sum_cols":
                tan[i] = t.sum_cols(ts[0])
            else:  # pragma: no cover
                raise ValueError(f"no tangent rule for {op}")
        row = []
        for o in tape.outputs:
            row.append(tan[o] if tan[o] is not None else t.const(np.zeros(tape.width(o))))
        tangent_ids.append(row)
    t.set_outputs(list(tape.outputs) + [tid for row in tangent_ids for tid in row])
    return t, tangent_ids


_TANGENT_CACHE: dict = {}


def _tangent_tape(tape: Tape, idx: tuple):
    key = (id(tape), idx, len(tape.nodes), tuple(tape.outputs))
    hit = _TANGENT_CACHE.get(key)
    if hit is not None and hit[0] is tape:
        return hit[1]
    ext = with_tangents(tape, idx)[0]
    _TANGENT_CACHE[key] = (tape, ext)
    return ext


def spatial_jacobian(tape: Tape, params, inputs, spatial_index_set, aux=None,
                     rowstable: bool = False) -> DualBatch:
    """Outputs and their exact derivatives w.r.t. the selected input columns."""
    idx = tuple(int(j) for j in spatial_index_set)
    ext = _tangent_tape(tape, idx)
    out = forward(ext, params, np.atleast_2d(inputs), aux=aux, rowstable=rowstable)
    k = tape.n_outputs
    primal = out[:, :k]
    tangents = out[:, k:].reshape(out.shape[0], len(idx), k).transpose(0, 2, 1)
    return DualBatch(primal=primal, tangents=np.ascontiguousarray(tangents))
