"""Loss assembly and full-batch optimizers.

The loss averages the pointwise discrepancy inside each snapshot first and
then across snapshots, so snapshots with many observation points do not
dominate.  Gradients come from one reverse sweep seeded with the analytic
derivative of the discrepancy with respect to the network outputs.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import line_search

from . import autodiff as ad
from . import network as nw

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the objective becomes non-finite."""


# -- discrepancy metrics ----------------------------------------------------------

def _pair(u, u_tilde):
    u = np.asarray(u, dtype=float)
    v = np.asarray(u_tilde, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    return u, v


def discrepancy_l2(u, u_tilde):
    """Squared Euclidean distance (row-wise for 2-D input)."""
    u, v = _pair(u, u_tilde)
    return np.sum((u - v) ** 2, axis=-1)


def _unit(u, eps):
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    return u / (eps + n), n


def discrepancy_direction(u, u_tilde, eps=1e-4):
    """Squared distance plus squared distance of eps-regularized unit vectors."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    u, v = _pair(u, u_tilde)
    a, _ = _unit(u, eps)
    b, _ = _unit(v, eps)
    return np.sum((u - v) ** 2, axis=-1) + np.sum((a - b) ** 2, axis=-1)


def _grad_l2(u, v):
    return 2.0 * (v - u)


def _grad_direction(u, v, eps):
    a, _ = _unit(u, eps)
    b, n = _unit(v, eps)
    r = b - a
    g = 2.0 * (v - u) + 2.0 * r / (eps + n)
    # d/dv of -v (v.r) / (n (eps + n)^2); vanishes at v = 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(n > 0, np.sum(v * r, axis=-1, keepdims=True) / (n * (eps + n) ** 2), 0.0)
    return g - 2.0 * v * corr


# -- configuration -------------------------------------------------------------------

@dataclass
class BCSamples:
    """Boundary samples for the Dirichlet penalty.

    ``x_in`` are the spatial network inputs (already UC-mapped when needed),
    ``datum`` the Dirichlet values, ``coord_jac`` optional d x_in / d x.
    """

    x_in: np.ndarray
    mu_p: np.ndarray
    mu_g: np.ndarray
    datum: np.ndarray
    coord_jac: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.x_in) == 0:
            raise ValueError("empty boundary sample set")


@dataclass
class LossConfig:
    discrepancy: str = "squared_l2"  # or "direction"
    eps: float = 1e-4
    bc: Optional[BCSamples] = None
    bc_weight: float = 1.0
    tikhonov: float = 0.0

    def __post_init__(self):
        if self.discrepancy not in ("squared_l2", "direction"):
            raise ValueError(f"unknown discrepancy {self.discrepancy!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.bc_weight < 0 or self.tikhonov < 0:
            raise ValueError("regularization weights must be non-negative")


@dataclass
class AdamConfig:
    iterations: int = 500
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class BFGSConfig:
    iterations: int = 2000
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-9
    memory: Optional[int] = None  # None: dense up to dense_limit params, else limited
    dense_limit: int = 5000
    lbfgs_m: int = 20


@dataclass
class OptSchedule:
    adam: AdamConfig = field(default_factory=AdamConfig)
    bfgs: BFGSConfig = field(default_factory=BFGSConfig)

    def __post_init__(self):
        if self.adam.iterations < 0 or self.bfgs.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.bfgs.c1 < self.bfgs.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


# -- loss ------------------------------------------------------------------------

def _snapshot_weights(snapshot_ids, declared=None):
    ids, inverse, counts = np.unique(np.asarray(snapshot_ids), return_inverse=True, return_counts=True)
    if declared is not None:
        missing = set(np.asarray(declared).tolist()) - set(ids.tolist())
        if missing:
            raise ValueError(f"snapshots without observation points: {sorted(missing)}")
    return 1.0 / (len(ids) * counts[inverse])


class Objective:
    """Full-batch objective ``w -> (J, grad J)`` over a training table.

    Normalized inputs and head auxiliaries are computed once; every call is a
    forward pass plus one reverse sweep.
    """

    def __init__(self, spec: nw.ModelSpec, table, config: LossConfig, rowstable: bool = False):
        self.spec, self.config, self.rowstable = spec, config, rowstable
        if len(table.values) == 0:
            raise ValueError("empty training table")
        self.tape = nw.model_tape(spec)
        inputs, aux = nw.prepare(spec, table.coords, table.mu_p, table.mu_g,
                                 getattr(table, "coord_jac", None))
        self.n_data = inputs.shape[0]
        self.targets = np.asarray(table.values, dtype=float)
        self.row_w = _snapshot_weights(table.snapshot_ids, getattr(table, "declared_ids", None))[:, None]
        bc = config.bc
        if bc is not None and config.bc_weight > 0:
            b_in, b_aux = nw.prepare(spec, bc.x_in, bc.mu_p, bc.mu_g, bc.coord_jac)
            inputs = np.vstack([inputs, b_in])
            aux = {k: np.vstack([aux[k], b_aux[k]]) for k in aux}
            self.bc_target = np.asarray(bc.datum, dtype=float)
            self.bc_w = config.bc_weight / len(bc.datum)
        else:
            self.bc_target = None
        self.inputs, self.aux = inputs, aux
        self.n_evals = 0

    def parts(self, w):
        """Return ``(data_term, bc_term, tikhonov_term)`` without gradients."""
        out = ad.forward(self.tape, w, self.inputs, aux=self.aux, rowstable=self.rowstable)
        pred = out[:self.n_data]
        data = float(np.sum(self.row_w[:, 0] * self._d(pred)))
        bc = 0.0
        if self.bc_target is not None:
            bc = self.bc_w * float(np.sum((out[self.n_data:] - self.bc_target) ** 2))
        return data, bc, self.config.tikhonov * float(w @ w)

    def _d(self, pred):
        if self.config.discrepancy == "direction":
            return discrepancy_direction(self.targets, pred, self.config.eps)
        return discrepancy_l2(self.targets, pred)

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        self.n_evals += 1
        out, vals = ad.forward(self.tape, w, self.inputs, aux=self.aux,
                               rowstable=self.rowstable, return_values=True)
        pred = out[:self.n_data]
        if self.config.discrepancy == "direction":
            dpt = discrepancy_direction(self.targets, pred, self.config.eps)
            gp = _grad_direction(self.targets, pred, self.config.eps)
        else:
            dpt = discrepancy_l2(self.targets, pred)
            gp = _grad_l2(self.targets, pred)
        J = float(np.sum(self.row_w[:, 0] * dpt))
        seed = np.empty_like(out)
        seed[:self.n_data] = self.row_w * gp
        if self.bc_target is not None:
            r = out[self.n_data:] - self.bc_target
            J += self.bc_w * float(np.sum(r * r))
            seed[self.n_data:] = 2.0 * self.bc_w * r
        g = ad.grad_params(self.tape, w, self.inputs, seed, aux=self.aux, values=vals)
        if self.config.tikhonov > 0:
            J += self.config.tikhonov * float(w @ w)
            g = g + 2.0 * self.config.tikhonov * w
        return J, g


def loss(spec, params, table, config: LossConfig):
    """Objective value and gradient for one parameter vector."""
    return Objective(spec, table, config)(params)


def bc_penalty(spec, params, bc: BCSamples) -> float:
    """Mean squared misfit between the model and the Dirichlet datum on samples."""
    pred = nw.evaluate_batch(spec, params, bc.x_in, bc.mu_p, bc.mu_g, bc.coord_jac)
    return float(np.mean(np.sum((pred - bc.datum) ** 2, axis=1)))


# -- optimizers ------------------------------------------------------------------------

@dataclass
class History:
    records: list = field(default_factory=list)
    t0: float = field(default_factory=time.perf_counter)
    clock: bool = True

    def add(self, phase, iteration, value, grad_norm):
        wall = time.perf_counter() - self.t0 if self.clock else 0.0
        self.records.append({"phase": phase, "iteration": iteration, "loss": value,
                             "grad_norm": grad_norm, "wall_time_s": wall})

    @property
    def losses(self):
        return [r["loss"] for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["phase", "iteration", "loss", "grad_norm", "wall_time_s"])
            wr.writeheader()
            for r in self.records:
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _check_finite(value, grad, phase, it):
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise TrainingError(f"non-finite objective in {phase} at iteration {it}: loss={value}")


def adam_run(objective: Callable, params0, config: AdamConfig, history: Optional[History] = None):
    """Full-batch Adam for a fixed number of iterations."""
    w = np.array(params0, dtype=float, copy=True)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    hist = history if history is not None else History()
    for k in range(1, config.iterations + 1):
        f, g = objective(w)
        _check_finite(f, g, "adam", k - 1)
        hist.add("adam", k - 1, f, float(np.linalg.norm(g)))
        m = config.beta1 * m + (1 - config.beta1) * g
        v = config.beta2 * v + (1 - config.beta2) * g * g
        mh = m / (1 - config.beta1 ** k)
        vh = v / (1 - config.beta2 ** k)
        w = w - config.lr * mh / (np.sqrt(vh) + config.eps)
    if config.iterations:
        f, g = objective(w)
        _check_finite(f, g, "adam", config.iterations)
        hist.add("adam", config.iterations, f, float(np.linalg.norm(g)))
    return w


class _Cached:
    """Memoizes the last (value, gradient) so line searches do not re-evaluate."""

    def __init__(self, objective):
        self.objective = objective
        self.x = None

    def _eval(self, x):
        if self.x is None or not np.array_equal(x, self.x):
            self.x = np.array(x, copy=True)
            self.value, self.gradient = self.objective(self.x)
        return self.value, self.gradient

    def f(self, x):
        return self._eval(x)[0]

    def grad(self, x):
        return self._eval(x)[1]


def _backtrack(fun, x, f, g, d, c1=1e-4):
    slope = float(g @ d)
    a = 1.0
    for _ in range(60):
        if fun.f(x + a * d) <= f + c1 * a * slope:
            return a
        a *= 0.5
    return None


def bfgs_run(objective: Callable, params0, config: BFGSConfig, history: Optional[History] = None):
    """Quasi-Newton minimization with strong-Wolfe line searches.

    Dense inverse-Hessian updates up to ``config.dense_limit`` parameters,
    limited memory (two-loop recursion) above.  A failed line search falls
    back to a backtracking steepest-descent step.
    """
    x = np.array(params0, dtype=float, copy=True)
    n = x.size
    hist = history if history is not None else History()
    fun = _Cached(objective)
    f, g = fun._eval(x)
    _check_finite(f, g, "bfgs", 0)
    hist.add("bfgs", 0, f, float(np.linalg.norm(g)))
    dense = (config.memory is None and n <= config.dense_limit) or config.memory == 0
    Hinv = None
    pairs: list = []
    f_old = None
    for it in range(1, config.iterations + 1):
        if np.linalg.norm(g, np.inf) <= config.gtol:
            break
        if dense:
            d = -(Hinv @ g) if Hinv is not None else -g
        else:
            d = -_two_loop(g, pairs)
        if g @ d >= 0:
            d = -g
            Hinv = None
            pairs.clear()
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="The line search")
            ls = line_search(fun.f, fun.grad, x, d, gfk=g, old_fval=f, old_old_fval=f_old,
                             c1=config.c1, c2=config.c2, maxiter=50)
        alpha = ls[0]
        if alpha is None:
            log.info("line search failed at iteration %d; steepest-descent fallback", it)
            d = -g
            alpha = _backtrack(fun, x, f, g, d)
            Hinv = None
            pairs.clear()
            if alpha is None:
                log.info("fallback step failed; stopping at iteration %d", it)
                break
        x_new = x + alpha * d
        f_new, g_new = fun._eval(x_new)
        _check_finite(f_new, g_new, "bfgs", it)
        if f_new >= f:
            # rounding-level stagnation; the accepted iterates stay monotone
            log.info("no descent at iteration %d; stopping", it)
            break
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if dense:
                if Hinv is None:
                    Hinv = np.eye(n) * (sy / float(y @ y))
                rho = 1.0 / sy
                Hy = Hinv @ y
                # (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded
                Hinv += (rho * rho * float(y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
            else:
                pairs.append((s, y, 1.0 / sy))
                if len(pairs) > config.lbfgs_m:
                    pairs.pop(0)
        f_old, x, f, g = f, x_new, f_new, g_new
        hist.add("bfgs", it, f, float(np.linalg.norm(g)))
    return x


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def train(objective: Callable, params0, schedule: OptSchedule, history: Optional[History] = None):
    """Adam warm start followed by BFGS; returns ``(params, history)``."""
    hist = history if history is not None else History()
    w = adam_run(objective, params0, schedule.adam, hist)
    w = bfgs_run(objective, w, schedule.bfgs, hist)
    return w, hist
