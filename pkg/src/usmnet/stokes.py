"""Steady incompressible flow on a TriMesh with equal-order P1 elements.

Stokes by default, with optional Picard iterations for the convective term.
Equal-order pairs need pressure stabilization; a Brezzi-Pitkaranta term
-delta/nu * sum_K h_K^2 (grad p, grad q)_K is subtracted in the continuity
block.  It vanishes for q = const, so global mass balance is kept exactly.

Units: mm, s.  Pressure is solved in kinematic form (mm^2/s^2) and reported
as rho * p_kin converted to pascal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .dataset import Snapshot
from .fem import gradients, random_interior_points, stiffness
from .geometry import TriMesh

log = logging.getLogger(__name__)

MM2_PER_S2_TO_PA = 1e-6  # (kg/m^3) * (mm/s)^2 -> Pa


@dataclass(frozen=True)
class FlowProblem:
    nu: float = 4.72  # mm^2/s
    rho: float = 1060.0  # kg/m^3
    peak_velocity: float = 140.0  # mm/s
    picard_iterations: int = 0
    picard_tol: float = 1e-6
    stabilization: float = 0.05

    def __post_init__(self):
        if not (self.nu > 0 and self.rho > 0 and self.peak_velocity > 0):
            raise ValueError("nu, rho and peak velocity must be positive")
        if self.picard_iterations < 0 or self.stabilization <= 0:
            raise ValueError("invalid solver settings")


@dataclass
class FlowSolution:
    velocity: np.ndarray  # (N, 2) mm/s
    pressure: np.ndarray  # (N,) Pa
    residual: float
    picard_converged: bool = True
    flags: list = field(default_factory=list)

    def nodal(self):
        return np.column_stack([self.velocity, self.pressure])


def inlet_profile(mesh: TriMesh, peak):
    """Parabolic inflow along +x over the inlet node span."""
    k = mesh.tag_nodes("in")
    y = mesh.nodes[k, 1]
    lo, hi = y.min(), y.max()
    return k, peak * 4 * (y - lo) * (hi - y) / (hi - lo) ** 2


def _divergence_blocks(mesh):
    """Bx[i, j] = -int phi_i d phi_j/dx (and By) for P1 x P1."""
    G, A = gradients(mesh)
    T = mesh.triangles
    n = mesh.n_nodes
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    out = []
    for d in range(2):
        local = -(A / 3)[:, None, None] * np.broadcast_to(G[:, None, :, d], (len(T), 3, 3))
        out.append(sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n)))
    return out


def _convection(mesh, w):
    """C[i, j] = int phi_i (w . grad phi_j), w piecewise linear (exact for the P1 product rule)."""
    G, A = gradients(mesh)
    T = mesh.triangles
    n = mesh.n_nodes
    W = w[T]  # (m, 3, 2)
    # int phi_i phi_k = |K| (1 + delta_ik) / 12
    Mloc = (np.ones((3, 3)) + np.eye(3)) / 12.0
    wi = np.einsum("ik,mkd->mid", Mloc, W) * A[:, None, None]  # int phi_i w
    local = np.einsum("mid,mjd->mij", wi, G)
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _element_size(mesh):
    X = mesh.nodes[mesh.triangles]
    e = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 1], X[:, 0] - X[:, 2]], axis=1)
    return np.max(np.hypot(e[..., 0], e[..., 1]), axis=1)


def _assemble(mesh, problem, conv=None):
    n = mesh.n_nodes
    K = stiffness(mesh) * problem.nu
    if conv is not None:
        K = K + conv
    Bx, By = _divergence_blocks(mesh)
    h = _element_size(mesh)
    S = stiffness(mesh, weight=problem.stabilization * h**2 / problem.nu)
    Z = sp.csr_matrix((n, n))
    return sp.bmat([[K, Z, Bx.T], [Z, K, By.T], [Bx, By, -S]], format="csr")


def _dirichlet(mesh, problem):
    walls = mesh.tag_nodes("top", "bottom", "front")
    k_in, v_in = inlet_profile(mesh, problem.peak_velocity)
    n = mesh.n_nodes
    ux = np.full(n, np.nan)
    ux[k_in] = v_in
    ux[walls] = 0.0  # walls win at shared corners
    fixed = np.flatnonzero(~np.isnan(ux))
    vals = ux[fixed]
    # both velocity components are fixed on the same nodes; v_y = 0 there
    return np.concatenate([fixed, fixed + n]), np.concatenate([vals, np.zeros(len(fixed))])


def _solve_linear(Amat, fixed, vals, tol):
    N = Amat.shape[0]
    x = np.zeros(N)
    x[fixed] = vals
    free = np.setdiff1d(np.arange(N), fixed)
    A = Amat.tocsr()
    Aff = A[free][:, free].tocsc()
    b = -A[free][:, fixed] @ vals
    x[free] = spsolve(Aff, b)
    r = np.linalg.norm(Aff @ x[free] - b) / max(np.linalg.norm(b), 1e-300)
    if not np.isfinite(r) or r >= tol:
        raise np.linalg.LinAlgError(f"saddle-point solve residual {r:.2e}")
    return x, r


def solve_flow(mesh: TriMesh, problem: FlowProblem = FlowProblem(), tol=1e-10) -> FlowSolution:
    n = mesh.n_nodes
    fixed, vals = _dirichlet(mesh, problem)
    x, r = _solve_linear(_assemble(mesh, problem), fixed, vals, tol)
    stokes = x
    converged, flags = True, []
    if problem.picard_iterations:
        converged = False
        for it in range(problem.picard_iterations):
            w = np.column_stack([x[:n], x[n:2 * n]])
            try:
                x_new, r = _solve_linear(_assemble(mesh, problem, _convection(mesh, w)), fixed, vals, tol)
            except np.linalg.LinAlgError:
                break
            du = np.linalg.norm(x_new[:2 * n] - x[:2 * n]) / max(np.linalg.norm(x_new[:2 * n]), 1e-300)
            x = x_new
            if not np.isfinite(du):
                break
            if du < problem.picard_tol:
                converged = True
                break
        if not converged:
            log.warning("Picard iteration did not converge; returning the Stokes solution")
            x, flags = stokes, ["picard_diverged"]
    vel = np.column_stack([x[:n], x[n:2 * n]])
    p = x[2 * n:] * problem.rho * MM2_PER_S2_TO_PA
    return FlowSolution(vel, p, float(r), converged, flags)


def boundary_flux(mesh: TriMesh, velocity, tag):
    """Outward flux through edges tagged ``tag`` (trapezoid rule, exact for P1)."""
    E = mesh.boundary_edges(tag)
    if E.size == 0:
        return 0.0
    # orient each edge by the triangle that owns it
    owner = {}
    for tri in mesh.triangles:
        for k in range(3):
            owner[(int(tri[k]), int(tri[(k + 1) % 3]))] = True
    total = 0.0
    for a, b in E:
        if (int(a), int(b)) not in owner:
            a, b = b, a
        t = mesh.nodes[b] - mesh.nodes[a]
        normal = np.array([t[1], -t[0]])  # outward for counter-clockwise triangles, length |t|
        total += float(0.5 * (velocity[a] + velocity[b]) @ normal)
    return total


def mass_balance(mesh: TriMesh, sol: FlowSolution):
    """(inflow, outflow, relative imbalance)."""
    q_in = -boundary_flux(mesh, sol.velocity, "in")
    q_out = boundary_flux(mesh, sol.velocity, "out")
    return q_in, q_out, abs(q_in - q_out) / abs(q_in)


def sample_flow_snapshot(mesh: TriMesh, sol: FlowSolution, n_points, seed, snapshot_id="flow",
                         geometry_id=None) -> Snapshot:
    """(v_x, v_y, p) at uniform random points inside the mesh."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    pts = random_interior_points(mesh, n_points, rng)
    vals = mesh.locator().interpolate(sol.nodal(), pts)
    gid = geometry_id if geometry_id is not None else snapshot_id
    return Snapshot(snapshot_id, np.zeros(0), {"type": "bifurcation", "id": gid}, pts, vals)
