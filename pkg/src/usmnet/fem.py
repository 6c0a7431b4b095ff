"""Linear (P1) finite elements on TriMesh: assembly, Laplace solves, point
location and the universal-coordinate fields of the bifurcation family."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, spsolve

from .geometry import TriMesh

ALPHA = 0.1


class OutsideDomainError(ValueError):
    def __init__(self, message, rows=None, distance=None):
        super().__init__(message)
        self.rows = rows
        self.distance = distance


def gradients(mesh: TriMesh):
    """Per-triangle shape-function gradients (m, 3, 2) and areas (m,)."""
    X = mesh.nodes[mesh.triangles]  # (m, 3, 2)
    d1 = X[:, 1] - X[:, 0]
    d2 = X[:, 2] - X[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    # gradients of barycentric coordinates l1, l2; l0 = 1 - l1 - l2
    g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
    G = np.stack([-g1 - g2, g1, g2], axis=1)
    return G, 0.5 * det


def _scatter(mesh, local, n=None):
    T = mesh.triangles
    n = mesh.n_nodes if n is None else n
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def stiffness(mesh: TriMesh, weight=None):
    """K_ij = sum_K w_K |K| grad phi_i . grad phi_j."""
    G, A = gradients(mesh)
    w = A if weight is None else A * weight
    local = np.einsum("kid,kjd->kij", G, G) * w[:, None, None]
    return _scatter(mesh, local)


def mass(mesh: TriMesh):
    _, A = gradients(mesh)
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, A[:, None, None] * base)


def solve_dirichlet(K, rhs, fixed, values, tol=1e-10, method="cg"):
    """Solve K u = rhs with u[fixed] = values by elimination.

    The reduced system is SPD for a Laplace stiffness with at least one
    Dirichlet node; CG with Jacobi preconditioning is used and the result is
    checked against ``tol`` on the reduced residual.
    """
    n = K.shape[0]
    u = np.zeros(n)
    u[fixed] = values
    free = np.setdiff1d(np.arange(n), fixed)
    if free.size == 0:
        return u
    K = K.tocsr()
    Kff = K[free][:, free]
    b = rhs[free] - K[free][:, fixed] @ u[fixed]
    diag = Kff.diagonal()
    if np.any(diag <= 0):
        raise np.linalg.LinAlgError("singular system: unconstrained node")
    if method == "cg":
        M = sp.diags(1.0 / diag)
        x, info = cg(Kff, b, rtol=0.0, atol=tol * 1e-2, M=M, maxiter=20 * free.size)
        if info != 0 or np.max(np.abs(Kff @ x - b)) >= tol:
            x = spsolve(Kff.tocsc(), b)
    else:
        x = spsolve(Kff.tocsc(), b)
    r = np.max(np.abs(Kff @ x - b)) if b.size else 0.0
    if not np.isfinite(r) or r >= tol:
        raise np.linalg.LinAlgError(f"linear solve residual {r:.2e} above {tol:g}")
    u[free] = x
    return u


class PointLocator:
    """Uniform bin grid over triangle bounding boxes."""

    def __init__(self, mesh: TriMesh, per_bin=4.0, tol=1e-12):
        self.mesh = mesh
        self.tol = tol
        X, T = mesh.nodes, mesh.triangles
        P = X[T]
        lo, hi = P.min(axis=1), P.max(axis=1)
        self.origin = X.min(axis=0)
        span = np.maximum(X.max(axis=0) - self.origin, 1e-12)
        nb = max(1, int(np.sqrt(len(T) / per_bin)))
        aspect = span[0] / span[1]
        self.shape = (max(1, int(round(nb * np.sqrt(aspect)))), max(1, int(round(nb / np.sqrt(aspect)))))
        self.cell = span / np.array(self.shape)
        i0 = self._bin(lo)
        i1 = self._bin(hi)
        buckets = [[] for _ in range(self.shape[0] * self.shape[1])]
        for t in range(len(T)):
            for bx in range(i0[t, 0], i1[t, 0] + 1):
                for by in range(i0[t, 1], i1[t, 1] + 1):
                    buckets[bx * self.shape[1] + by].append(t)
        self.start = np.concatenate([[0], np.cumsum([len(b) for b in buckets])])
        self.items = np.array([t for b in buckets for t in b], dtype=np.int64)
        # affine inverse per triangle: lambda_{1,2} = Minv (p - x0)
        d1 = P[:, 1] - P[:, 0]
        d2 = P[:, 2] - P[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.x0 = P[:, 0]
        self.minv = np.stack([np.column_stack([d2[:, 1], -d2[:, 0]]),
                              np.column_stack([-d1[:, 1], d1[:, 0]])], axis=1) / det[:, None, None]

    def _bin(self, p):
        b = np.floor((p - self.origin) / self.cell).astype(np.int64)
        return np.clip(b, 0, np.array(self.shape) - 1)

    def barycentric(self, tri, p):
        l12 = np.einsum("kij,kj->ki", self.minv[tri], p - self.x0[tri])
        return np.column_stack([1 - l12.sum(axis=1), l12])

    def locate(self, points):
        """Triangle index (-1 if outside) and barycentric coordinates per point."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(p)
        tri = np.full(n, -1, dtype=np.int64)
        lam = np.full((n, 3), np.nan)
        b = self._bin(p)
        inside_box = np.all((p >= self.origin - self.tol) &
                            (p <= self.origin + self.cell * np.array(self.shape) + self.tol), axis=1)
        key = b[:, 0] * self.shape[1] + b[:, 1]
        s, e = self.start[key], self.start[key + 1]
        k = 0
        todo = inside_box & (e > s)
        while np.any(todo):
            idx = np.flatnonzero(todo & (s + k < e))
            if idx.size == 0:
                break
            cand = self.items[s[idx] + k]
            bc = self.barycentric(cand, p[idx])
            hit = np.all(bc >= -self.tol, axis=1)
            h = idx[hit]
            tri[h] = cand[hit]
            lam[h] = bc[hit]
            todo[h] = False
            k += 1
        return tri, lam

    def interpolate(self, values, points, strict=True):
        """Barycentric interpolation of nodal ``values`` ((N,) or (N, c))."""
        tri, lam = self.locate(points)
        bad = np.flatnonzero(tri < 0)
        if bad.size and strict:
            d = boundary_distance(self.mesh, np.atleast_2d(points)[bad])
            raise OutsideDomainError(
                f"{bad.size} point(s) outside the mesh; first row {bad[0]} is {d[0]:.3g} from the boundary",
                rows=bad, distance=d)
        v = np.asarray(values, dtype=float)
        T = self.mesh.triangles[np.maximum(tri, 0)]
        if v.ndim == 1:
            out = np.einsum("ki,ki->k", lam, v[T])
        else:
            out = np.einsum("ki,kic->kc", lam, v[T])
        out[bad] = np.nan
        return out


def boundary_distance(mesh: TriMesh, points):
    """Distance from each point to the nearest boundary edge."""
    p = np.atleast_2d(points)
    a = mesh.nodes[mesh.edges[:, 0]]
    b = mesh.nodes[mesh.edges[:, 1]]
    ab = b - a
    out = np.empty(len(p))
    for i, q in enumerate(p):
        t = np.clip(np.einsum("kd,kd->k", q - a, ab) / np.einsum("kd,kd->k", ab, ab), 0, 1)
        out[i] = np.min(np.hypot(*(a + t[:, None] * ab - q).T))
    return out


@dataclass(frozen=True)
class UcFields:
    psi_lr: np.ndarray
    psi_td: np.ndarray
    x_min: float
    x_max: float
    alpha: float = ALPHA

    def nodal(self):
        return np.column_stack([self.psi_lr, self.psi_td])


def wall_ramp(x, x_min, x_max):
    return (x - x_min) / (x_max - x_min)


def uc_boundary_data(mesh: TriMesh, alpha=ALPHA):
    """Dirichlet nodes/values of both Laplace problems.

    psi_LR: 0 on the inlet, 1 on outlets and front, the wall ramp on
    top/bottom.  Shared corner nodes take the first match in the order
    in, out, front, walls.  psi_TD: +-(alpha + (1 - alpha) ramp) on top and
    bottom, natural (zero-flux) condition elsewhere.
    """
    X = mesh.nodes
    walls = mesh.tag_nodes("top", "bottom")
    x_min, x_max = float(X[walls, 0].min()), float(X[walls, 0].max())
    val = np.full(mesh.n_nodes, np.nan)
    for names, fn in ((("top", "bottom"), lambda k: wall_ramp(X[k, 0], x_min, x_max)),
                      (("front",), lambda k: np.ones(len(k))),
                      (("out",), lambda k: np.ones(len(k))),
                      (("in",), lambda k: np.zeros(len(k)))):
        k = mesh.tag_nodes(*names)
        if k.size:
            val[k] = fn(k)  # later assignments win, so "in" has priority
    lr_nodes = np.flatnonzero(~np.isnan(val))
    lr_vals = val[lr_nodes]

    top, bottom = mesh.tag_nodes("top"), mesh.tag_nodes("bottom")
    if top.size == 0 or bottom.size == 0:
        raise np.linalg.LinAlgError("singular system: top/bottom walls untagged")
    if np.intersect1d(top, bottom).size:
        raise ValueError("a node lies on both the top and bottom walls")
    td_nodes = np.concatenate([top, bottom])
    td_vals = np.concatenate([alpha + (1 - alpha) * wall_ramp(X[top, 0], x_min, x_max),
                              -(alpha + (1 - alpha) * wall_ramp(X[bottom, 0], x_min, x_max))])
    return (lr_nodes, lr_vals), (td_nodes, td_vals), (x_min, x_max)


def solve_uc_fields(mesh: TriMesh, alpha=ALPHA, tol=1e-10) -> UcFields:
    if mesh.tag_nodes("in").size == 0:
        raise np.linalg.LinAlgError("singular system: no inlet tagged")
    K = stiffness(mesh)
    (ln, lv), (tn, tv), (x_min, x_max) = uc_boundary_data(mesh, alpha)
    zero = np.zeros(mesh.n_nodes)
    psi_lr = solve_dirichlet(K, zero, ln, lv, tol)
    psi_td = solve_dirichlet(K, zero, tn, tv, tol)
    return UcFields(psi_lr, psi_td, x_min, x_max, alpha)


def uc_map(points, mesh: TriMesh, fields: UcFields, strict=True):
    """x_hat = (psi_LR(x), psi_TD(x)) by barycentric interpolation."""
    return mesh.locator().interpolate(fields.nodal(), points, strict=strict)


def uc_jacobian(points, mesh: TriMesh, fields: UcFields):
    """d x_hat / d x (n, 2, 2): the piecewise-constant gradients of the fields."""
    tri, _ = mesh.locator().locate(points)
    if np.any(tri < 0):
        raise OutsideDomainError("point outside the mesh", rows=np.flatnonzero(tri < 0))
    G, _ = gradients(mesh)
    T = mesh.triangles[tri]
    g_lr = np.einsum("ki,kid->kd", fields.psi_lr[T], G[tri])
    g_td = np.einsum("ki,kid->kd", fields.psi_td[T], G[tri])
    return np.stack([g_lr, g_td], axis=1)


def l2_error(mesh: TriMesh, u_h, exact, order=3):
    """||u_h - u|| in L2 with a degree-2-exact triangle rule (edge midpoints)."""
    X = mesh.nodes[mesh.triangles]
    _, A = gradients(mesh)
    total = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        q = 0.5 * (X[:, a] + X[:, b])
        uh = 0.5 * (u_h[mesh.triangles[:, a]] + u_h[mesh.triangles[:, b]])
        total += np.sum(A / 3 * (uh - exact(q[:, 0], q[:, 1])) ** 2)
    return float(np.sqrt(total))


def random_interior_points(mesh: TriMesh, n, rng, geometry=None):
    """Uniform points in the meshed domain by rejection against point location."""
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    loc = mesh.locator()
    out = []
    count = 0
    while count < n:
        cand = rng.uniform(lo, hi, size=(max(2 * (n - count), 16), 2))
        tri, _ = loc.locate(cand)
        keep = cand[tri >= 0]
        out.append(keep)
        count += len(keep)
    return np.vstack(out)[:n]


def sample_in_triangles(mesh: TriMesh, n, rng):
    """Uniform points drawn triangle by triangle (area-weighted), without point location."""
    _, A = gradients(mesh)
    tri = rng.choice(len(A), size=n, p=A / A.sum())
    r1, r2 = rng.random(n), rng.random(n)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    X = mesh.nodes[mesh.triangles[tri]]
    return X[:, 0] + r1[:, None] * (X[:, 1] - X[:, 0]) + r2[:, None] * (X[:, 2] - X[:, 0])
