import numpy as np
import pytest

from usmnet.autodiff import Tape, forward, grad_params, spatial_jacobian, with_tangents


def mlp_tape(widths, out_act=False):
    t = Tape(widths[0])
    h = 0
    for i, w in enumerate(widths[1:]):
        h = t.affine(h, w)
        if i < len(widths) - 2 or out_act:
            h = t.tanh(h)
    return t.set_outputs([h])


def fd_grad(f, w, step=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        g[i] = (f(w + e) - f(w - e)) / (2 * step)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


# -- forward -------------------------------------------------------------

def test_identity_tape():
    t = Tape(1).set_outputs([0])
    assert forward(t, [], [0.3]) == pytest.approx([0.3])


def test_single_tanh():
    t = Tape(1)
    t.set_outputs([t.tanh(0)])
    assert forward(t, [], [0.0])[0] == 0.0


def test_affine_node():
    t = Tape(1)
    t.set_outputs([t.affine(0, 1)])
    assert forward(t, [2.0, 1.0], [3.0])[0] == pytest.approx(7.0)


def test_arity_mismatch_rejected():
    t = mlp_tape([3, 4, 1])
    w = np.zeros(t.n_params)
    with pytest.raises(ValueError):
        forward(t, w, [1.0, 2.0])
    with pytest.raises(ValueError):
        forward(t, w[:-1], [1.0, 2.0, 3.0])


# -- reverse mode ----------------------------------------------------------

def test_grad_square_param():
    t = Tape(0)
    t.set_outputs([t.square(t.param(1))])
    g = grad_params(t, [3.0], np.zeros((1, 0)), [[1.0]])
    assert g == pytest.approx([6.0])


def test_grad_tanh_param():
    t = Tape(0)
    t.set_outputs([t.tanh(t.param(1))])
    assert grad_params(t, [0.0], np.zeros((1, 0)), [[1.0]]) == pytest.approx([1.0])


def test_seed_length_mismatch():
    t = mlp_tape([2, 3, 2])
    w = np.ones(t.n_params)
    with pytest.raises(ValueError):
        grad_params(t, w, [[0.1, 0.2]], [[1.0]])


def test_mlp_grad_matches_fd():
    rng = np.random.default_rng(0)
    t = mlp_tape([4, 16, 2])
    w = rng.standard_normal(t.n_params) * 0.5
    x = rng.standard_normal((1, 4))
    seed = rng.standard_normal((1, 2))
    g = grad_params(t, w, x, seed)
    fd = fd_grad(lambda p: float(np.sum(seed * forward(t, p, x))), w)
    assert rel_err(g, fd) < 1e-6


def _unary_tape(op):
    t = Tape(0)
    p = t.param(1)
    if op == "sqrt_floor":
        y = t.sqrt_floor(p)
    else:
        y = getattr(t, op)(p)
    return t.set_outputs([y])


@pytest.mark.parametrize("op", ["tanh", "square", "reciprocal", "sqrt_floor", "abs"])
def test_primitive_adjoints_fd(op):
    rng = np.random.default_rng(42)
    t = _unary_tape(op)
    for _ in range(100):
        w = rng.uniform(0.2, 2.0, size=1) * (1 if op in ("sqrt_floor",) else rng.choice([-1, 1]))
        g = grad_params(t, w, np.zeros((1, 0)), [[1.0]])
        fd = fd_grad(lambda p: forward(t, p, np.zeros((1, 0)))[0, 0], w)
        assert rel_err(g, fd) < 1e-6


@pytest.mark.parametrize("op", ["add", "mul"])
def test_binary_adjoints_fd(op):
    rng = np.random.default_rng(7)
    t = Tape(0)
    a, b = t.param(3), t.param(3)
    t.set_outputs([getattr(t, op)(a, b)])
    for _ in range(100):
        w = rng.standard_normal(6)
        seed = rng.standard_normal((1, 3))
        g = grad_params(t, w, np.zeros((1, 0)), seed)
        fd = fd_grad(lambda p: float(np.sum(seed * forward(t, p, np.zeros((1, 0))))), w)
        assert rel_err(g, fd) < 1e-6


def test_broadcast_param_times_batch():
    rng = np.random.default_rng(3)
    t = Tape(2)
    p = t.param(2)
    t.set_outputs([t.mul(0, p)])
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal(2)
    g = grad_params(t, w, x, np.ones((5, 2)))
    assert g == pytest.approx(x.sum(axis=0))


# -- tangents ------------------------------------------------------------

def _linear_field():
    t = Tape(2)
    t.set_outputs([t.affine(0, 1, bias=False)])
    return t


def test_tangent_linear_field():
    t = _linear_field()
    db = spatial_jacobian(t, [3.0, 2.0], [[0.7, -1.1], [5.0, 2.0]], [0, 1])
    assert np.allclose(db.tangents[:, 0, :], [[3.0, 2.0], [3.0, 2.0]])


def test_tangent_quadratic_field():
    t = Tape(2)
    t.set_outputs([t.sum_cols(t.square(0))])
    db = spatial_jacobian(t, [], [[1.0, 2.0]], [0, 1])
    assert db.tangents[0, 0] == pytest.approx([2.0, 4.0])


def test_spatial_index_out_of_range():
    t = _linear_field()
    with pytest.raises(ValueError):
        spatial_jacobian(t, [1.0, 1.0], [[0.0, 0.0]], [2])


def test_tangents_match_fd_and_reverse():
    rng = np.random.default_rng(11)
    t = mlp_tape([4, 8, 6, 3])
    w = rng.standard_normal(t.n_params) * 0.7
    x = rng.standard_normal((6, 4))
    db = spatial_jacobian(t, w, x, [0, 1, 2, 3])
    h = 1e-6
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd = (forward(t, w, x + e) - forward(t, w, x - e)) / (2 * h)
        assert np.allclose(db.tangents[:, :, j], fd, rtol=1e-6, atol=1e-8)
    # reverse mode input gradients agree with forward tangents to ~1e-12
    for o in range(3):
        seed = np.zeros((6, 3))
        seed[:, o] = 1.0
        _, gx = grad_params(t, w, x, seed, return_input_grad=True)
        assert np.allclose(gx, db.tangents[:, o, :], rtol=1e-12, atol=1e-14)


def test_mixed_derivative_one_neuron():
    # psi(x, y) = v * tanh(a x + b y + c); d/dw (dpsi/dx)
    t = Tape(2)
    h = t.tanh(t.affine(0, 1))
    t.set_outputs([t.affine(h, 1, bias=False)])
    ext, ids = with_tangents(t, [0])
    ext.set_outputs([ids[0][0]])
    rng = np.random.default_rng(5)
    w = rng.standard_normal(t.n_params)
    x = np.array([[0.3, -0.4]])
    g = grad_params(ext, w, x, [[1.0]])

    def dpsi_dx(p, step=1e-5):
        e = np.array([[step, 0.0]])
        return (forward(t, p, x + e)[0, 0] - forward(t, p, x - e)[0, 0]) / (2 * step)

    analytic = forward(ext, w, x)[0, 0]
    assert analytic == pytest.approx(dpsi_dx(w), rel=1e-8)
    fd = fd_grad(lambda p: forward(ext, p, x)[0, 0], w)
    nested = fd_grad(dpsi_dx, w, step=1e-4)
    assert rel_err(g, fd) < 1e-6
    assert rel_err(g, nested) < 1e-5


def test_rowstable_matches_single_rows():
    rng = np.random.default_rng(1)
    t = mlp_tape([5, 17, 9, 2])
    w = rng.standard_normal(t.n_params)
    x = rng.standard_normal((333, 5))
    full = forward(t, w, x, rowstable=True)
    for i in rng.integers(0, 333, 20):
        assert np.array_equal(forward(t, w, x[i], rowstable=True), full[i])
