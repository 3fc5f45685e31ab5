import numpy as np
import pytest

from ocpolicy import instrument, policy
from ocpolicy.oracle import finite_diff
from ocpolicy.policy import PolicyNet


def make(seed=0, sizes=(3, 16, 16, 2), act="tanh"):
    return PolicyNet.init(sizes, [-1.0, -2.0], [1.0, 0.5], act, seed=seed)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def test_zero_theta_gives_center():
    net = PolicyNet((3, 8, 2), [-1.0, -2.0], [1.0, 0.5])
    assert np.array_equal(net.forward(np.ones(3)), [0.0, -0.75])


def test_param_count():
    net = make()
    assert net.n_params == 4 * 16 + 17 * 16 + 17 * 2


def test_range_invariant():
    rng = np.random.default_rng(0)
    for seed in range(100):
        net = make(seed)
        net.theta *= rng.uniform(0.5, 20.0)
        u = net.forward(rng.normal(scale=50.0, size=(10000, 3)))
        assert np.all(u >= net.u_min) and np.all(u <= net.u_max)


def test_forward_matches_straight_line():
    net = make(0)
    x = np.array([1.0, 0.0, 0.0])
    (W1, b1), (W2, b2), (W3, b3) = net.layers
    h = np.tanh(W1 @ x + b1)
    h = np.tanh(W2 @ h + b2)
    u = net.center + net.radius * np.tanh(W3 @ h + b3)
    assert np.max(np.abs(net.forward(x) - u)) < 1e-12


def test_batch_and_single_agree():
    net = make(1)
    X = np.random.default_rng(1).normal(size=(5, 3))
    U = net.forward(X)
    for i in range(5):
        assert np.allclose(net.forward(X[i]), U[i], atol=1e-15)


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_backward_params_fd(act):
    net = make(2, act=act)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 2))
    g = net.backward_params(x, up)
    coords = rng.choice(net.n_params, 50, replace=False)
    theta0 = net.theta.copy()

    def f(val, i):
        net.theta[:] = theta0
        net.theta[i] = val
        return float(np.sum(up * net.forward(x)))
    for i in coords:
        fd = finite_diff(lambda v: f(v[0], i), theta0[i:i + 1])[0]
        net.theta[:] = theta0
        tol = 1e-5 if act == "tanh" else 1e-4
        assert abs(fd - g[i]) <= tol * max(1e-6, abs(g).max())


def test_backward_params_zero_upstream():
    net = make(3)
    assert not np.any(net.backward_params(np.ones((2, 3)), np.zeros((2, 2))))


def test_linear_layer_gradient():
    net = PolicyNet((3, 1), [-1.0], [1.0])
    x = np.array([0.3, -0.2, 0.5])
    g = net.backward_params(x, np.array([2.0]))
    # zero theta: d tanh = 1, radius 1
    assert np.allclose(g[:3], 2.0 * x) and np.isclose(g[3], 2.0)


def test_input_jvp_fd_and_linearity():
    net = make(4)
    rng = np.random.default_rng(4)
    x = rng.normal(size=3)
    v, w = rng.normal(size=2), rng.normal(size=2)
    g = net.input_jvp(x, v)
    fd = finite_diff(lambda z: v @ net.forward(z), x)
    assert rel_err(g, fd) < 1e-5
    a, b = 0.7, -1.3
    assert np.max(np.abs(net.input_jvp(x, a * v + b * w) - a * g - b * net.input_jvp(x, w))) < 1e-12
    assert not np.any(net.input_jvp(x, np.zeros(2)))
    zero = PolicyNet((3, 8, 2), [-1.0, -1.0], [1.0, 1.0])
    assert not np.any(zero.input_jvp(x, v))


def test_input_jacobian_matches_jvp():
    net = make(5)
    X = np.random.default_rng(5).normal(size=(6, 3))
    J = net.input_jacobian(X)
    for j in range(2):
        e = np.zeros((6, 2))
        e[:, j] = 1.0
        assert np.allclose(J[:, j, :], net.input_jvp(X, e), atol=1e-14)


def test_input_jacobian_counter():
    net = make(6)
    with instrument.delta("input_jacobian") as d:
        net.input_jacobian(np.ones((4, 3)))
    assert d["n"] == 1


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_sobolev_backward_fd(act):
    net = make(7, act=act)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 3))
    v = rng.normal(size=(3, 2))
    up = rng.normal(size=(3, 3))
    g = net.sobolev_backward_params(x, v, up)
    theta0 = net.theta.copy()

    def f(th):
        net.theta[:] = th
        return float(np.sum(up * net.input_jvp(x, v)))
    fd = finite_diff(f, theta0)
    net.theta[:] = theta0
    assert rel_err(g, fd) < 1e-4


def test_sobolev_backward_bilinear_case():
    net = PolicyNet((3, 1), [-1.0], [1.0])
    v = np.array([1.5])
    up = np.array([0.2, -0.1, 0.4])
    g = net.sobolev_backward_params(np.zeros(3), v, up)
    # at zero theta and x, d/dW (up . W^T v tanh'(0)) = v up^T
    assert np.allclose(g[:3], 1.5 * up) and g[3] == 0.0
    assert not np.any(net.sobolev_backward_params(np.zeros(3), v, np.zeros(3)))


def test_relu_derivative_at_zero():
    net = PolicyNet((1, 1, 1), [-1.0], [1.0], "relu", theta=[1.0, 0.0, 1.0, 0.0])
    assert net.input_jvp(np.array([0.0]), np.array([1.0]))[0] == 0.0


def test_checkpoint_roundtrip(tmp_path):
    net = make(8, act="relu")
    p = tmp_path / "c.npz"
    net.save(p)
    back = policy.load(p)
    x = np.random.default_rng(8).normal(size=(10, 3))
    assert np.array_equal(back.forward(x), net.forward(x))
    assert back.sizes == net.sizes and back.activation == "relu"
    assert np.array_equal(back.u_min, net.u_min)


def _rewrite(path, **changes):
    data = dict(np.load(path))
    import json
    header = json.loads(str(data["header"]))
    header.update(changes.pop("header", {}))
    data["header"] = np.array(json.dumps(header))
    data.update(changes)
    with open(path, "wb") as fh:
        np.savez(fh, **data)


def test_checkpoint_rejects_bad_layer_count(tmp_path):
    p = tmp_path / "c.npz"
    make(9).save(p)
    _rewrite(p, header={"n_layers": 5})
    with pytest.raises(policy.CheckpointError):
        policy.load(p)


def test_checkpoint_rejects_checksum(tmp_path):
    p = tmp_path / "c.npz"
    net = make(9)
    net.save(p)
    _rewrite(p, W0=np.asarray(net.layers[0][0]) + 1e-9)
    with pytest.raises(policy.CheckpointError, match="checksum"):
        policy.load(p)


def test_checkpoint_rejects_version_and_garbage(tmp_path):
    p = tmp_path / "c.npz"
    make(9).save(p)
    _rewrite(p, header={"version": 99})
    with pytest.raises(policy.CheckpointError, match="version"):
        policy.load(p)
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(policy.CheckpointError):
        policy.load(bad)


def test_checkpoint_little_endian_blocks(tmp_path):
    p = tmp_path / "c.npz"
    make(10).save(p)
    data = np.load(p)
    assert data["W0"].dtype.str == "<f8"
