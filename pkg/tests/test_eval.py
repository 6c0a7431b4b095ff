import math

import numpy as np
import pytest

from usmnet import eval as ev


def rot(v, a):
    c, s = np.cos(a), np.sin(a)
    return np.column_stack([c * v[:, 0] - s * v[:, 1], s * v[:, 0] + c * v[:, 1]])


def test_rmse_magnitude():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((100, 2))
    assert ev.rmse_magnitude(u, u) == 0
    n = np.linalg.norm(u, axis=1, keepdims=True)
    assert ev.rmse_magnitude(u, u * (n + 0.1) / n) == pytest.approx(0.1, abs=1e-12)
    # pointwise rotation keeps every magnitude
    assert ev.rmse_magnitude(u, rot(u, rng.uniform(0, 2 * np.pi, 100))) == pytest.approx(0.0, abs=1e-12)


def test_rmse_direction_values():
    u = np.tile([1.0, 0.0], (10, 1))
    assert ev.rmse_direction(u, u) == 0
    assert ev.rmse_direction(u, np.tile([0.0, 1.0], (10, 1))) == pytest.approx(math.sqrt(2) / (1 + 1e-4), rel=1e-12)
    assert ev.rmse_direction(u, np.tile([0.0, 1.0], (10, 1))) == pytest.approx(1.41407, abs=1e-5)
    assert ev.rmse_direction(u, -u) == pytest.approx(2 / (1 + 1e-4), rel=1e-12)
    assert ev.rmse_direction(u, np.tile([0.0, 1.0], (10, 1)), angle=True) == pytest.approx(math.pi / 2)


def test_direction_scale_invariance_and_permutation():
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal((200, 2)) + 3, rng.standard_normal((200, 2)) + 3
    s = rng.uniform(0.5, 5, (200, 1))
    assert ev.rmse_direction(u * s, v * s) == pytest.approx(ev.rmse_direction(u, v), abs=1e-4)
    p = rng.permutation(200)
    for f in (ev.rmse_magnitude, ev.rmse_direction, ev.relative_rmse):
        assert f(u[p], v[p]) == pytest.approx(f(u, v), rel=1e-12)


def test_relative_rmse():
    u = np.random.default_rng(2).standard_normal((50, 3))
    assert ev.relative_rmse(u, u) == 0
    assert ev.relative_rmse(u, 1.03 * u) == pytest.approx(0.03, rel=1e-12)
    with pytest.raises(ValueError):
        ev.relative_rmse(np.zeros((5, 2)), np.ones((5, 2)))
    with pytest.raises(ValueError):
        ev.rmse(np.zeros((5, 2)), np.zeros((4, 2)))


def test_report_aggregates_and_files(tmp_path):
    rng = np.random.default_rng(3)
    rows = []
    for i in range(5):
        u = rng.standard_normal((30, 3))
        rows.append({"snapshot": f"s{i}", **ev.snapshot_metrics(u, u + 0.1 * rng.standard_normal((30, 3)))})
    rep = ev.EvalReport(rows, {"seed": 0})
    agg = rep.aggregates()
    for m in ev.METRICS:
        v = rep.values(m)
        assert np.all(v >= 0)
        assert agg[m]["median"] == np.median(v) and agg[m]["min"] <= agg[m]["mean"] <= agg[m]["max"]
    rep.write_csv(tmp_path / "r.csv")
    rep.write_json(tmp_path / "r.json")
    data = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=1, usecols=range(1, 6))
    assert np.array_equal(data[:, 0], rep.values("rmse_magnitude"))
    ev.write_boxplot_rows(tmp_path / "box.csv", {("UC26", 0): rep, ("PC26", 1): rep})
    assert len((tmp_path / "box.csv").read_text().splitlines()) == 11


def test_cavity_report_has_no_pressure():
    u = np.random.default_rng(4).standard_normal((10, 2))
    m = ev.snapshot_metrics(u, u)
    assert math.isnan(m["rmse_pressure"]) and m["rmse_magnitude"] == 0


def test_streamline_uniform_field():
    lines = ev.trace_streamlines(lambda p: np.tile([1.0, 0.0], (len(p), 1)), [[0.1, 0.5]], 0.01, 50,
                                 inside=lambda p: (p[:, 0] <= 1) & (p[:, 0] >= 0))
    P = lines[0].points
    assert lines[0].reason == "max_steps" and len(P) == 51
    assert np.all(P[:, 1] == 0.5) and P[-1, 0] == pytest.approx(0.6)


def test_streamline_rotation_closes_to_rk4_order():
    field = lambda p: np.column_stack([-p[:, 1], p[:, 0]])
    errs = []
    for n in (100, 200):
        ln = ev.trace_streamlines(field, [[1.0, 0.0]], 2 * np.pi / n, n)[0]
        errs.append(np.linalg.norm(ln.points[-1] - [1.0, 0.0]))
    assert errs[0] < 1e-6 and math.log2(errs[0] / errs[1]) > 3.5


def test_streamline_stops():
    field = lambda p: np.column_stack([-p[:, 1], p[:, 0]])
    lines = ev.trace_streamlines(field, [[0.0, 0.0], [5.0, 5.0], [0.9, 0.0]], 0.05, 1000,
                                 inside=lambda p: np.hypot(p[:, 0], p[:, 1]) < 1)
    assert lines[0].reason == "stagnation" and len(lines[0].points) == 1
    assert lines[1].reason == "outside" and len(lines[1].points) == 0
    assert lines[2].reason == "max_steps"
    exit_line = ev.trace_streamlines(lambda p: np.tile([1.0, 0.0], (len(p), 1)), [[0.0, 0.0]], 0.1, 100,
                                     inside=lambda p: p[:, 0] < 0.55)[0]
    assert exit_line.reason == "exit" and exit_line.points[-1, 0] < 0.55


def test_streamline_and_raster_files(tmp_path):
    lines = ev.trace_streamlines(lambda p: np.tile([0.0, 1.0], (len(p), 1)), [[0.0, 0.0], [1.0, 0.0]], 0.5, 3)
    ev.write_streamlines_csv(tmp_path / "s.csv", lines)
    data = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert data.shape == (8, 4) and data[-1].tolist() == [1, 1.5, 1.0, 1.5]
    pts, vals = ev.raster(lambda p: p * 2, [0, 0], [1, 2], (4, 3))
    ev.write_raster(tmp_path / "r", pts, vals, (4, 3))
    p2, v2, shape = ev.read_raster(tmp_path / "r.bin")
    assert shape == (4, 3) and np.array_equal(p2, pts) and np.array_equal(v2, vals)


def test_nearest_pair():
    rng = np.random.default_rng(5)
    vecs = {f"g{i}": rng.standard_normal(6) for i in range(30)}
    a, b, d = ev.nearest_landmark_pair(vecs)
    ids = list(vecs)
    brute = min((np.linalg.norm(vecs[p] - vecs[q]), p, q) for i, p in enumerate(ids) for q in ids[i + 1:])
    assert (d, a, b) == (pytest.approx(brute[0]), brute[1], brute[2])
    vecs["dup"] = vecs["g7"].copy()
    assert ev.nearest_landmark_pair(vecs) == ("g7", "dup", 0.0)
    hand = {"p": [0.0, 0.0], "q": [3.0, 4.0], "r": [0.5, 0.0]}
    assert ev.nearest_landmark_pair(hand) == ("p", "r", 0.5)
    with pytest.raises(ValueError):
        ev.nearest_landmark_pair({"only": [1.0]})
