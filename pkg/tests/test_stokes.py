import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from usmnet import fem
from usmnet import geometry as gm
from usmnet import stokes as st


def poiseuille_error(h, w=1.5, L=20.0):
    m = gm.StraightChannel(L, w).mesh(h)
    sol = st.solve_flow(m)
    ex = 140.0 * (1 - (m.nodes[:, 1] / w) ** 2)
    zero = lambda x, y: 0 * x
    err = math.hypot(fem.l2_error(m, sol.velocity[:, 0] - ex, zero), fem.l2_error(m, sol.velocity[:, 1], zero))
    return err / fem.l2_error(m, ex, zero), m, sol


def test_poiseuille_within_two_percent_and_converging():
    e1, m, sol = poiseuille_error(0.3)
    e2, _, _ = poiseuille_error(0.15)
    assert e1 <= 0.02
    assert math.log2(e1 / e2) >= 1.0
    # linear pressure drop 2 nu U L / b^2, converted to Pa
    x = m.nodes[:, 0]
    dp = sol.pressure[x == 0].mean() - sol.pressure[x == 20].mean()
    assert dp == pytest.approx(2 * 4.72 * 140 * 20 / 1.5**2 * 1060e-6, rel=0.05)


def test_boundary_conditions_exact():
    g = gm.generate_geometry(1)
    m = g.mesh(0.3)
    sol = st.solve_flow(m)
    walls = m.tag_nodes("top", "bottom", "front")
    assert np.all(sol.velocity[walls] == 0.0)
    k, v = st.inlet_profile(m, 140.0)
    inner = np.setdiff1d(k, walls)
    assert np.array_equal(sol.velocity[inner, 0], v[np.isin(k, inner)])
    assert np.all(sol.velocity[k, 1] == 0.0)
    assert sol.residual < 1e-10


def test_mass_balance_over_corpus():
    for s in range(10):
        m = gm.generate_geometry(s).mesh(0.3)
        q_in, q_out, rel = st.mass_balance(m, st.solve_flow(m))
        assert q_in > 0 and rel < 1e-6


def test_symmetric_geometry_symmetric_flow():
    g = gm.BifurcationGeometry(gm.symmetric_params(r1=1.1, theta1=40.0)).validate()
    m = g.mesh(0.25)
    d, idx = cKDTree(m.nodes).query(m.nodes * [1, -1])
    assert d.max() < 1e-12
    sol = st.solve_flow(m)
    v = sol.velocity
    assert np.abs(v[idx, 0] - v[:, 0]).max() < 1e-8
    assert np.abs(v[idx, 1] + v[:, 1]).max() < 1e-8


def test_picard_converges_and_keeps_mass():
    m = gm.generate_geometry(0).mesh(0.3)
    sol = st.solve_flow(m, st.FlowProblem(picard_iterations=40))
    assert sol.picard_converged and not sol.flags
    assert st.mass_balance(m, sol)[2] < 1e-6


def test_picard_failure_falls_back_to_stokes():
    m = gm.generate_geometry(0).mesh(0.3)
    stokes = st.solve_flow(m)
    sol = st.solve_flow(m, st.FlowProblem(picard_iterations=1, picard_tol=1e-30))
    assert sol.flags == ["picard_diverged"] and not sol.picard_converged
    assert np.array_equal(sol.velocity, stokes.velocity)


def test_problem_validation():
    with pytest.raises(ValueError):
        st.FlowProblem(nu=-1.0)
    with pytest.raises(ValueError):
        st.FlowProblem(peak_velocity=0.0)


def test_sample_flow_snapshot():
    m = gm.generate_geometry(3).mesh(0.3)
    sol = st.solve_flow(m)
    s = st.sample_flow_snapshot(m, sol, 1000, seed=4, snapshot_id="g3")
    assert s.points.shape == (1000, 2) and s.values.shape == (1000, 3)
    assert np.array_equal(s.points, st.sample_flow_snapshot(m, sol, 1000, seed=4).points)
    at_nodes = m.locator().interpolate(sol.nodal(), m.nodes[:20])
    assert np.allclose(at_nodes, sol.nodal()[:20], atol=1e-9, rtol=1e-12)
    assert s.mu_p.shape == (0,) and s.geometry["type"] == "bifurcation"
