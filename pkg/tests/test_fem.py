import math

import numpy as np
import pytest

from usmnet import fem
from usmnet import geometry as gm


@pytest.fixture(scope="module")
def case():
    g = gm.generate_geometry(2)
    m = g.mesh(0.25)
    return g, m, fem.solve_uc_fields(m)


def test_laplace_manufactured_second_order():
    errs = []
    for h in (0.1, 0.05, 0.025):
        m = gm.StraightChannel(1.0, 0.5).mesh(h)
        X = m.nodes
        exact = lambda x, y: x**2 - y**2
        b = np.unique(m.edges)
        u = fem.solve_dirichlet(fem.stiffness(m), np.zeros(m.n_nodes), b, exact(X[b, 0], X[b, 1]))
        errs.append(fem.l2_error(m, u, exact))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(rates) > 1.8


def test_uc_bounds_and_boundary_values(case):
    g, m, u = case
    assert u.psi_lr.min() >= 0 and u.psi_lr.max() <= 1
    assert u.psi_td.min() >= -1 and u.psi_td.max() <= 1
    assert np.all(u.psi_lr[m.tag_nodes("in")] == 0.0)
    X = m.nodes
    top, bot = m.tag_nodes("top"), m.tag_nodes("bottom")
    ramp = lambda k: (X[k, 0] - u.x_min) / (u.x_max - u.x_min)
    assert np.array_equal(u.psi_td[top], 0.1 + 0.9 * ramp(top))
    assert np.array_equal(u.psi_td[bot], -(0.1 + 0.9 * ramp(bot)))
    k0 = top[np.argmin(X[top, 0])]
    assert u.psi_td[k0] == pytest.approx(0.1, abs=1e-15)
    walls = np.concatenate([top, bot])
    kmax = walls[np.argmax(X[walls, 0])]
    assert abs(u.psi_td[kmax]) == pytest.approx(1.0, abs=1e-15)


def test_psi_lr_monotone_along_trunk(case):
    g, m, u = case
    xs = np.linspace(0.05, g.apex[0] - 0.05, 200)
    pts = np.column_stack([xs, np.full_like(xs, g.apex[1])])
    v = fem.uc_map(pts, m, u)[:, 0]
    assert np.all(np.diff(v) > 0)


def test_point_location_and_nodal_exactness(case):
    g, m, u = case
    rng = np.random.default_rng(0)
    pts = fem.sample_in_triangles(m, 10_000, rng)
    xh = fem.uc_map(pts, m, u)
    assert not np.isnan(xh).any()
    assert xh[:, 0].min() >= 0 and xh[:, 0].max() <= 1 and np.abs(xh[:, 1]).max() <= 1
    nodal = fem.uc_map(m.nodes, m, u)
    assert np.allclose(nodal, u.nodal(), atol=1e-12, rtol=0)
    inlet = m.nodes[m.tag_nodes("in")]
    mid = 0.5 * (inlet[:-1] + inlet[1:])
    assert np.all(np.abs(fem.uc_map(mid, m, u)[:, 0]) < 1e-12)


def test_outside_point_rejected(case):
    g, m, u = case
    with pytest.raises(fem.OutsideDomainError) as err:
        fem.uc_map([[0.5, 0.0], [-1.0, 0.0]], m, u)
    assert list(err.value.rows) == [1]
    assert err.value.distance[0] == pytest.approx(1.0, abs=1e-9)
    out = fem.uc_map([[0.5, 0.0], [-1.0, 0.0]], m, u, strict=False)
    assert np.isnan(out[1]).all() and not np.isnan(out[0]).any()


def test_uc_jacobian_matches_differences(case):
    g, m, u = case
    rng = np.random.default_rng(3)
    pts = fem.sample_in_triangles(m, 50, rng)
    tri, lam = m.locator().locate(pts)
    # stay away from element edges so the finite difference stays in one triangle
    pts = pts[np.min(lam, axis=1) > 0.05]
    J = fem.uc_jacobian(pts, m, u)
    eps = 1e-7
    for d in range(2):
        e = np.zeros(2)
        e[d] = eps
        fd = (fem.uc_map(pts + e, m, u) - fem.uc_map(pts - e, m, u)) / (2 * eps)
        assert np.allclose(J[:, :, d], fd, atol=1e-6)


def test_untagged_inlet_is_singular():
    m = gm.StraightChannel(2.0, 0.5).mesh(0.5)
    keep = m.edge_tags != gm.TAGS.index("in")
    m2 = gm.TriMesh(m.nodes, m.triangles, m.edges[keep], m.edge_tags[keep])
    with pytest.raises(np.linalg.LinAlgError):
        fem.solve_uc_fields(m2)
