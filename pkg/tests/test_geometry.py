import numpy as np
import pytest

from usmnet import geometry as gm
from usmnet.geometry import BifurcationGeometry, BifurcationParams, StraightChannel, Stenosis


def test_same_seed_same_geometry():
    a, b = gm.generate_geometry(7), gm.generate_geometry(7)
    assert a.params == b.params
    for k, v in a.control_points().items():
        assert np.array_equal(v, b.control_points()[k])
    assert gm.generate_geometry(8).params != a.params


def test_500_seeds_valid():
    for s in range(500):
        g = gm.generate_geometry(s)
        g.validate()
        assert g._monotone()


def test_zero_severity_is_straight_symmetric():
    p = gm.symmetric_params(r0=1.6, r1=1.1, theta1=30.0)
    p = BifurcationParams(**{**p.to_dict(), "stenoses": (Stenosis("trunk", 4.0, 2.0, 0.0),)})
    g = BifurcationGeometry(p).validate()
    xs = np.linspace(0, 8, 50)
    assert np.all(g.y_top(xs) == 1.6) and np.all(g.y_bottom(xs) == -1.6)
    assert g.is_symmetric and g.apex[1] == 0.0
    ys = np.linspace(0.5, 3, 20)
    assert np.allclose(g.x_front(ys), g.x_front(-ys), atol=1e-12)


def test_invalid_ranges_rejected():
    with pytest.raises(ValueError):
        gm.generate_geometry(0, gm.ParamRanges(r0=(2.0, 1.0)))
    with pytest.raises(ValueError):
        gm.generate_geometry(0, gm.ParamRanges(severity=(0.0, 1.2)))


def test_channel_mesh_two_triangles_per_quad():
    ch = StraightChannel(6.0, 1.5)
    m = gm.mesh(ch, 1.5)
    assert m.n_nodes == 5 * 3 and len(m.triangles) == 2 * 4 * 2
    assert np.all(m.areas() > 0)
    for name, test in (("in", lambda p: p[:, 0] == 0), ("out", lambda p: p[:, 0] == 6),
                       ("top", lambda p: p[:, 1] == 1.5), ("bottom", lambda p: p[:, 1] == -1.5)):
        E = m.boundary_edges(name)
        assert len(E) > 0 and np.all(test(m.nodes[E[:, 0]])) and np.all(test(m.nodes[E[:, 1]]))
    assert len(m.boundary_edges("front")) == 0


def test_refinement_quadruples_elements():
    g = gm.generate_geometry(3)
    n1 = len(g.mesh(0.4).triangles)
    n2 = len(g.mesh(0.2).triangles)
    assert 3.3 < n2 / n1 < 4.7


def test_mesh_valid_and_tagged_over_corpus():
    for s in range(40):
        m = gm.generate_geometry(s).mesh(0.3)
        m.check()
        assert np.all(m.areas() > 0)
        assert set(np.unique(m.edge_tags)) == set(range(len(gm.TAGS)))


def test_mesh_delaunay_interior_edges():
    m = gm.generate_geometry(11).mesh(0.25)
    a, b, _, c, _, d = gm._edge_pairs(m.triangles)
    fixed = {(int(p), int(q)) for p, q in m.edges}
    s = gm._angles(m.nodes, c, a, b) + gm._angles(m.nodes, d, a, b)
    assert np.all(s <= np.pi + 1e-9)
    assert not any((int(p), int(q)) in fixed for p, q in zip(a, b))


def test_inverted_element_reported():
    # second quad is folded over the first
    with pytest.raises(gm.MeshError) as err:
        gm._MeshBuilder().add_patch(np.array([[[0, 0], [1, 0], [2, 0]], [[0, 1], [3, 1], [2, 1]]], dtype=float))
    assert err.value.element is not None


def test_landmark_lengths_and_channel_values():
    g = gm.generate_geometry(1)
    assert gm.extract_landmarks(g, 26).shape == (26,)
    assert gm.extract_landmarks(g, 6).shape == (6,)
    ch = StraightChannel(20.0, 1.5)
    lm = gm.extract_landmarks(ch, 26)
    assert np.all(lm[:13] == 1.5) and np.all(lm[13:] == -1.5)
    with pytest.raises(ValueError):
        gm.extract_landmarks(g, 5)
    with pytest.raises(gm.GeometryError):
        gm.extract_landmarks(g, stations=[40.0])


def test_landmarks_ignore_changes_beyond_stations():
    p = gm.generate_geometry(4).params
    a = BifurcationGeometry(p)
    b = BifurcationGeometry(BifurcationParams(**{**p.to_dict(), "stenoses": p.stenoses, "branch_length": 12.0}))
    assert np.array_equal(gm.extract_landmarks(a, 26), gm.extract_landmarks(b, 26))
    assert not np.array_equal(a.outlet_upper[0], b.outlet_upper[0])


def test_geometry_and_mesh_files_round_trip(tmp_path):
    g = gm.generate_geometry(5)
    gm.save_geometry(tmp_path / "g.json", g)
    h = gm.load_geometry(tmp_path / "g.json")
    assert h.params == g.params and h.id == g.id
    m = g.mesh(0.3)
    m.save(tmp_path / "m.bin", extra={"psi": np.arange(m.n_nodes, dtype=float)})
    m2, extra = gm.TriMesh.load(tmp_path / "m.bin", with_extra=True)
    assert np.array_equal(m2.nodes, m.nodes) and np.array_equal(m2.triangles, m.triangles)
    assert np.array_equal(m2.edges, m.edges) and np.array_equal(m2.edge_tags, m.edge_tags)
    assert np.array_equal(extra["psi"], np.arange(m.n_nodes))
