"""Steady lid-driven cavity on (0,1) x (0,H), streamfunction-vorticity form.

Unknowns live on a uniform node grid, ``psi[j, i]`` and ``omega[j, i]`` with
``j`` the row (y) index.  The discrete system is

    Lap(psi) + omega = 0                      interior nodes
    Re (u omega_x + v omega_y) - Lap(omega) = 0   interior nodes
    psi = 0                                    walls
    omega = Thom wall formula                  walls (corners: omega = 0)

with ``u = psi_y`` and ``v = -psi_x``.  It is solved by Newton's method with
a sparse Jacobian and continuation in the lid speed.  All interior and wall
rows are scaled by ``hx * hy`` so the stopping residual does not grow with
grid refinement.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve
from scipy.stats import qmc

from .dataset import Snapshot

log = logging.getLogger(__name__)

H_RANGE = (0.5, 2.0)
RE_RANGE = (1e2, 1e4)
GRID_MAGIC = b"USMGRID\0"


class CavitySolverError(RuntimeError):
    """Continuation could not reach the full lid speed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class CavityCase:
    H: float
    Re: float
    h: float = 1.0 / 64
    convection: bool = True
    upwind: object = "auto"  # "auto" or a blend factor in [0, 1]

    def __post_init__(self):
        if not (H_RANGE[0] - 1e-12 <= self.H <= H_RANGE[1] + 1e-12):
            raise ValueError(f"H={self.H} outside [0.5, 2]")
        if not self.Re > 0:
            raise ValueError("Re must be positive")
        if not self.h > 0 or round(1.0 / self.h) < 4:
            raise ValueError("h must be positive and give at least 4 cells across")
        if self.upwind != "auto" and not 0.0 <= float(self.upwind) <= 1.0:
            raise ValueError("upwind blend must be 'auto' or in [0, 1]")

    @property
    def cells(self):
        # whole cells in both directions; the vertical spacing adjusts to H
        return int(round(1.0 / self.h)), max(4, int(round(self.H / self.h)))

    @property
    def spacing(self):
        nx, ny = self.cells
        return 1.0 / nx, self.H / ny

    def blend(self):
        """Weight of the first-order upwind correction."""
        if not self.convection:
            return 0.0
        if self.upwind != "auto":
            return float(self.upwind)
        hx, hy = self.spacing
        # only switched on once the cell Reynolds number is well past 2
        return min(1.0, max(0.0, 1.0 - 20.0 / (self.Re * max(hx, hy))))


@dataclass
class CavityField:
    H: float
    Re: float
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    omega: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    residual: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.psi.shape

    def interpolate(self, points):
        """Bilinear velocity at ``points`` (n, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        yx = pts[:, ::-1]
        out = np.empty((len(pts), 2))
        for c, arr in enumerate((self.vx, self.vy)):
            f = RegularGridInterpolator((self.y, self.x), arr, method="linear")
            out[:, c] = f(yx)
        return out


class _Grid:
    """Index bookkeeping for the (ny+1) x (nx+1) node grid."""

    def __init__(self, case: CavityCase):
        self.nx, self.ny = case.cells
        self.hx, self.hy = case.spacing
        self.nxp = self.nx + 1
        self.N = self.nxp * (self.ny + 1)
        jj, ii = np.meshgrid(np.arange(self.ny + 1), np.arange(self.nxp), indexing="ij")
        k = jj * self.nxp + ii
        inner = (ii > 0) & (ii < self.nx) & (jj > 0) & (jj < self.ny)
        self.interior = k[inner]
        self.bottom = k[0, 1:-1]
        self.top = k[-1, 1:-1]
        self.left = k[1:-1, 0]
        self.right = k[1:-1, -1]
        self.corners = np.array([k[0, 0], k[0, -1], k[-1, 0], k[-1, -1]])
        self.boundary = np.concatenate([self.bottom, self.top, self.left, self.right, self.corners])


def _lap(z, K, g, cx, cy):
    return (z[K + 1] - 2 * z[K] + z[K - 1]) * cx + (z[K + g.nxp] - 2 * z[K] + z[K - g.nxp]) * cy


def _system(z, lid, case: CavityCase, g: _Grid, beta, delta=1e-6):
    """Scaled residual and sparse Jacobian at state ``z = [psi, omega]``."""
    N, nxp, hx, hy = g.N, g.nxp, g.hx, g.hy
    s = hx * hy
    cx, cy = 1.0 / hx**2, 1.0 / hy**2
    psi, om = z[:N], z[N:]
    R = np.empty(2 * N)
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(np.broadcast_to(r, np.shape(v)) if np.ndim(r) == 0 else r)
        cols.append(c)
        vals.append(np.broadcast_to(v, np.shape(c)))

    K = g.interior
    E, W, Nn, S = K + 1, K - 1, K + nxp, K - nxp

    # psi rows: Lap(psi) + omega = 0 inside, psi = 0 on walls
    R[K] = s * (_lap(psi, K, g, cx, cy) + om[K])
    put(K, K, np.full(len(K), -2 * s * (cx + cy)))
    for nb, c in ((E, cx), (W, cx), (Nn, cy), (S, cy)):
        put(K, nb, np.full(len(K), s * c))
    put(K, N + K, np.full(len(K), s))
    B = g.boundary
    R[B] = s * psi[B]
    put(B, B, np.full(len(B), s))

    # omega rows, interior transport equation
    RK = N + K
    Re = case.Re if case.convection else 0.0
    u = (psi[Nn] - psi[S]) / (2 * hy)
    v = -(psi[E] - psi[W]) / (2 * hx)
    ox = (om[E] - om[W]) / (2 * hx)
    oy = (om[Nn] - om[S]) / (2 * hy)
    dxx = (om[E] - 2 * om[K] + om[W]) * cx
    dyy = (om[Nn] - 2 * om[K] + om[S]) * cy
    au = np.sqrt(u * u + delta * delta)
    av = np.sqrt(v * v + delta * delta)
    ku = beta * Re * au * hx / 2  # artificial diffusion coefficients
    kv = beta * Re * av * hy / 2
    R[RK] = s * (Re * (u * ox + v * oy) - dxx - dyy - ku * dxx - kv * dyy)
    put(RK, N + K, s * (2 * cx * (1 + ku) + 2 * cy * (1 + kv)))
    put(RK, N + E, s * (Re * u / (2 * hx) - cx * (1 + ku)))
    put(RK, N + W, s * (-Re * u / (2 * hx) - cx * (1 + ku)))
    put(RK, N + Nn, s * (Re * v / (2 * hy) - cy * (1 + kv)))
    put(RK, N + S, s * (-Re * v / (2 * hy) - cy * (1 + kv)))
    dRdu = s * (Re * ox - beta * Re * hx / 2 * dxx * u / au)
    dRdv = s * (Re * oy - beta * Re * hy / 2 * dyy * v / av)
    put(RK, Nn, dRdu / (2 * hy))
    put(RK, S, -dRdu / (2 * hy))
    put(RK, E, -dRdv / (2 * hx))
    put(RK, W, dRdv / (2 * hx))

    # Thom wall vorticity
    for wall, inward, h2, extra in ((g.bottom, nxp, hy**2, 0.0), (g.top, -nxp, hy**2, 2 * lid / hy),
                                    (g.left, 1, hx**2, 0.0), (g.right, -1, hx**2, 0.0)):
        R[N + wall] = s * (om[wall] + 2 * psi[wall + inward] / h2 + extra)
        put(N + wall, N + wall, np.full(len(wall), s))
        put(N + wall, wall + inward, np.full(len(wall), 2 * s / h2))
    C = g.corners
    R[N + C] = s * om[C]
    put(N + C, N + C, np.full(4, s))

    J = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * N, 2 * N))
    return R, J


def _newton(z, lid, case, g, beta, tol, max_iter=25, blowup=1e6):
    """Undamped Newton; ``None`` on divergence or no convergence."""
    R, J = _system(z, lid, case, g, beta)
    r0 = r = np.max(np.abs(R))
    for it in range(max_iter):
        if r < tol:
            return z, r, it
        z = z + spsolve(J, -R)
        R, J = _system(z, lid, case, g, beta)
        r = np.max(np.abs(R))
        if not np.isfinite(r) or r > blowup * max(r0, 1e-3):
            return None, r, it + 1
    return (z, r, max_iter) if r < tol else (None, r, max_iter)


def solve_cavity(case: CavityCase, tol=1e-8, min_step=1e-3) -> CavityField:
    """Steady cavity flow via Newton iterations and adaptive lid-speed continuation.

    The lid speed is ramped from 0 to 1; a failed Newton solve halves the ramp
    step and retries from the last converged state, successful ones double it.
    """
    g = _Grid(case)
    beta = case.blend()
    z = np.zeros(2 * g.N)
    lid, step = 0.0, 1.0
    history = []
    while lid < 1.0:
        target = min(1.0, lid + step)
        z_new, r, its = _newton(z, target, case, g, beta, tol)
        history.append((target, r, its, z_new is not None))
        if z_new is None:
            step = 0.5 * (target - lid)
            log.debug("cavity H=%g Re=%g: lid %.4f failed (res %.2e), step -> %g", case.H, case.Re, target, r, step)
            if step < min_step:
                raise CavitySolverError(
                    f"continuation step underflow at lid speed {lid:.4f} (H={case.H}, Re={case.Re})",
                    {"lid": lid, "residual": r, "history": history})
            continue
        z, lid = z_new, target
        step = min(2 * step, 1.0)

    R, _ = _system(z, 1.0, case, g, beta)
    return _field(case, g, z, float(np.max(np.abs(R))),
                  {"blend": beta, "continuation": history, "cells": (g.nx, g.ny)})


def _field(case, g, z, res, info):
    shape = (g.ny + 1, g.nxp)
    psi = z[:g.N].reshape(shape)
    om = z[g.N:].reshape(shape)
    vx = np.zeros(shape)
    vy = np.zeros(shape)
    vx[1:-1, 1:-1] = (psi[2:, 1:-1] - psi[:-2, 1:-1]) / (2 * g.hy)
    vy[1:-1, 1:-1] = -(psi[1:-1, 2:] - psi[1:-1, :-2]) / (2 * g.hx)
    vx[-1, :] = 1.0  # lid, corners included
    x = np.arange(g.nxp) * g.hx
    y = np.arange(g.ny + 1) * g.hy
    x[-1], y[-1] = 1.0, case.H
    return CavityField(case.H, case.Re, x, y, psi, om, vx, vy, res, info)


def discrete_divergence(f: CavityField) -> np.ndarray:
    """Central-difference divergence of the nodal velocity, on nodes whose
    neighbours are all interior."""
    hx, hy = f.x[1] - f.x[0], f.y[1] - f.y[0]
    return ((f.vx[2:-2, 3:-1] - f.vx[2:-2, 1:-3]) / (2 * hx)
            + (f.vy[3:-1, 2:-2] - f.vy[1:-3, 2:-2]) / (2 * hy))


def contour_flux(f: CavityField, i0, i1, j0, j1) -> float:
    """Net outward flux through the grid rectangle with node corners (i0,j0), (i1,j1).

    Edge fluxes come from streamfunction differences, so the sum telescopes.
    """
    p = f.psi
    east = p[j1, i1] - p[j0, i1]
    north = p[j1, i0] - p[j1, i1]
    west = p[j0, i0] - p[j1, i0]
    south = p[j0, i1] - p[j0, i0]
    return float(east + north + west + south)


def vortex_minimum(f: CavityField):
    """``(psi_min, x, y)`` of the primary vortex, refined by a local quadratic fit."""
    inner = f.psi[1:-1, 1:-1]
    j, i = np.unravel_index(np.argmin(inner), inner.shape)
    j, i = j + 1, i + 1
    j = min(max(j, 1), f.psi.shape[0] - 2)
    i = min(max(i, 1), f.psi.shape[1] - 2)
    hx, hy = f.x[1] - f.x[0], f.y[1] - f.y[0]
    dx, dy = np.meshgrid([-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0])
    vals = f.psi[j - 1:j + 2, i - 1:i + 2].ravel()
    a, b = dx.ravel(), dy.ravel()
    A = np.column_stack([np.ones(9), a, b, a * a, a * b, b * b])
    c = np.linalg.lstsq(A, vals, rcond=None)[0]
    Hm = np.array([[2 * c[3], c[4]], [c[4], 2 * c[5]]])
    try:
        off = np.linalg.solve(Hm, -c[1:3])
    except np.linalg.LinAlgError:
        off = np.zeros(2)
    if np.max(np.abs(off)) > 1.0:  # fit not trustworthy, keep the node
        return float(f.psi[j, i]), float(f.x[i]), float(f.y[j])
    qa, qb = off
    val = c[0] + c[1] * qa + c[2] * qb + c[3] * qa * qa + c[4] * qa * qb + c[5] * qb * qb
    return float(val), float(f.x[i] + qa * hx), float(f.y[j] + qb * hy)


def richardson(values, ratio=2.0):
    """Richardson extrapolation from three solutions at h, h/r, h/r^2.

    Returns ``(extrapolated, observed_order)``.
    """
    f1, f2, f3 = values
    p = math.log(abs((f1 - f2) / (f2 - f3))) / math.log(ratio)
    return f3 + (f3 - f2) / (ratio**p - 1), p


def sample_snapshot(f: CavityField, n_points: int, seed, snapshot_id=None) -> Snapshot:
    """Velocity at ``n_points`` uniform random points inside the cavity."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(0.0, 1.0, n_points), rng.uniform(0.0, f.H, n_points)])
    sid = snapshot_id if snapshot_id is not None else f"cavity_H{f.H:.6g}_Re{f.Re:.6g}"
    return Snapshot(sid, np.array([f.Re]), {"type": "cavity", "H": float(f.H)}, pts, f.interpolate(pts))


def cavity_landmark(H) -> np.ndarray:
    return np.array([float(H)])


def cavity_uc_map(x, H, tol=1e-12) -> np.ndarray:
    """(x, y) -> (x, y/H); works on a single point or an (n, 2) array."""
    p = np.asarray(x, dtype=float)
    pts = np.atleast_2d(p)
    if np.any(pts[:, 0] < -tol) or np.any(pts[:, 0] > 1 + tol) or np.any(pts[:, 1] < -tol) \
            or np.any(pts[:, 1] > H + tol):
        raise ValueError("point outside the cavity")
    out = pts.copy()
    out[:, 1] = pts[:, 1] / H
    return out[0] if p.ndim == 1 else out


def cavity_uc_jacobian(H, n) -> np.ndarray:
    """d x_hat / d x for ``n`` rows of the cavity map, shape (n, 2, 2)."""
    J = np.zeros((n, 2, 2))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0 / np.broadcast_to(np.asarray(H, dtype=float), (n,))
    return J


def sample_cases(n, seed, h=1.0 / 64, H_range=H_RANGE, Re_range=RE_RANGE):
    """Monte Carlo cases: H uniform, Re log-uniform."""
    rng = np.random.default_rng(seed)
    Hs = rng.uniform(*H_range, size=n)
    Res = 10.0 ** rng.uniform(math.log10(Re_range[0]), math.log10(Re_range[1]), size=n)
    return [CavityCase(float(a), float(b), h) for a, b in zip(Hs, Res)]


def boundary_samples(n_configs, n_points, seed, H_range=H_RANGE, Re_range=RE_RANGE, uc=False):
    """Wall points for the Dirichlet penalty.

    ``n_configs`` (H, Re) pairs come from a Latin hypercube (log scale in Re);
    each gets ``n_points`` points spread over the perimeter by length.
    Returns the arrays needed by ``training.BCSamples``.
    """
    from .training import BCSamples

    rng = np.random.default_rng(seed)
    lhs = qmc.LatinHypercube(d=2, seed=rng).random(n_configs)
    Hs = H_range[0] + lhs[:, 0] * (H_range[1] - H_range[0])
    lo, hi = math.log10(Re_range[0]), math.log10(Re_range[1])
    Res = 10.0 ** (lo + lhs[:, 1] * (hi - lo))
    xs, mp, mg, datum, jac = [], [], [], [], []
    for H, Re in zip(Hs, Res):
        t = rng.uniform(0.0, 2 + 2 * H, n_points)
        pts = np.empty((n_points, 2))
        bot = t < 1
        right = (t >= 1) & (t < 1 + H)
        top = (t >= 1 + H) & (t < 2 + H)
        left = t >= 2 + H
        pts[bot] = np.column_stack([t[bot], np.zeros(bot.sum())])
        pts[right] = np.column_stack([np.ones(right.sum()), t[right] - 1])
        pts[top] = np.column_stack([2 + H - t[top], np.full(top.sum(), H)])
        pts[left] = np.column_stack([np.zeros(left.sum()), 2 + 2 * H - t[left]])
        d = np.zeros((n_points, 2))
        d[top, 0] = 1.0
        xs.append(cavity_uc_map(pts, H) if uc else pts)
        jac.append(cavity_uc_jacobian(H, n_points))
        mp.append(np.full((n_points, 1), Re))
        mg.append(np.full((n_points, 1), H))
        datum.append(d)
    return BCSamples(np.vstack(xs), np.vstack(mp), np.vstack(mg), np.vstack(datum),
                     np.concatenate(jac) if uc else None)


# raster export

def write_raster_csv(f: CavityField, path):
    X, Y = np.meshgrid(f.x, f.y)
    data = np.column_stack([X.ravel(), Y.ravel(), f.psi.ravel(), f.vx.ravel(), f.vy.ravel()])
    np.savetxt(path, data, delimiter=",", header="x,y,psi,vx,vy", comments="", fmt="%.17g")


def write_raster_binary(f: CavityField, path):
    """Header: magic, int64 nx, ny (node counts), float64 H, Re; then psi, vx, vy
    row-major, all little-endian."""
    ny, nx = f.psi.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<qqdd", nx, ny, f.H, f.Re))
        for arr in (f.psi, f.vx, f.vy):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_raster_binary(path) -> CavityField:
    raw = Path(path).read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise ValueError("not a cavity grid file")
    nx, ny, H, Re = struct.unpack_from("<qqdd", raw, 8)
    n = nx * ny
    arrs = np.frombuffer(raw, dtype="<f8", offset=40)
    if arrs.size != 3 * n:
        raise ValueError("truncated grid file")
    psi, vx, vy = (arrs[k * n:(k + 1) * n].reshape(ny, nx).astype(float) for k in range(3))
    x = np.linspace(0.0, 1.0, nx)
    y = np.linspace(0.0, H, ny)
    return CavityField(H, Re, x, y, psi, np.full_like(psi, np.nan), vx, vy)
