import numpy as np
import pytest

from ocpolicy import instrument, learn
from ocpolicy.learn import AdamState, CloneDataset, SobolevConfig
from ocpolicy.oracle import finite_diff
from ocpolicy.policy import PolicyNet


def net_for(n_u, seed=0, width=12):
    return PolicyNet.init((3, width, width, n_u), -np.ones(n_u), np.ones(n_u), "tanh", seed=seed)


def batch_for(net, n=7, seed=1, ms=False):
    rng = np.random.default_rng(seed)
    nu = net.n_u
    return CloneDataset(
        x=rng.normal(size=(n, 3)), u=rng.uniform(-1, 1, (n, nu)), K=rng.normal(size=(n, nu, 3)),
        lam=rng.normal(size=(n, nu)), mu=rng.uniform(0.5, 3.0, n),
        gamma=rng.normal(size=(n, 3)) if ms else None,
        x2=rng.normal(size=(n, 3)) if ms else None)


def theta_fd(net, fn):
    theta0 = net.theta.copy()

    def f(th):
        net.theta[:] = th
        return fn()
    out = finite_diff(f, theta0)
    net.theta[:] = theta0
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def test_clone_loss_arithmetic():
    net = PolicyNet((1, 1), [-1.0], [1.0], theta=[0.0, np.arctanh(0.3)])
    b = CloneDataset(x=np.array([[0.0]]), u=np.array([[0.5]]))
    value, _ = learn.clone_loss(net, b)
    assert abs(value - 0.02) < 1e-15


def test_clone_loss_realizable_zero():
    net = net_for(2)
    b = batch_for(net)
    b.u = net.forward(b.x)
    value, grad = learn.clone_loss(net, b)
    assert value == 0.0 and not np.any(grad)


def test_clone_loss_gradient_fd():
    net = net_for(2)
    b = batch_for(net)
    _, g = learn.clone_loss(net, b)
    assert rel_err(g, theta_fd(net, lambda: learn.clone_loss(net, b)[0])) < 1e-5


def test_sobolev_full_zero_cases():
    zero = PolicyNet((3, 5, 1), [-1.0], [1.0])
    b = CloneDataset(x=np.ones((2, 3)), u=np.zeros((2, 1)), K=np.zeros((2, 1, 3)))
    assert learn.sobolev_loss_full(zero, b)[0] == 0.0
    lin = PolicyNet((3, 1), [-1.0], [1.0], theta=[0.2, -0.1, 0.3, 0.0])
    b = CloneDataset(x=np.zeros((2, 3)), u=np.zeros((2, 1)),
                     K=np.tile(np.array([[[0.2, -0.1, 0.3]]]), (2, 1, 1)))
    assert learn.sobolev_loss_full(lin, b)[0] < 1e-30


def test_sobolev_full_gradient_fd():
    net = net_for(2)
    b = batch_for(net)
    _, g = learn.sobolev_loss_full(net, b)
    assert rel_err(g, theta_fd(net, lambda: learn.sobolev_loss_full(net, b)[0])) < 1e-4


def test_sobolev_full_equals_basis_enumeration():
    net = net_for(3, width=8)
    b = batch_for(net, n=5)
    full = learn.sobolev_loss_full(net, b)
    cfg = SobolevConfig("stochastic")
    total_v, total_g = 0.0, 0.0
    for j in range(3):
        V = np.zeros((5, 3))
        V[:, j] = 1.0
        v, g = learn.sobolev_loss_stochastic(net, b, cfg, None, directions=V)
        total_v += v
        total_g = total_g + g
    assert abs(total_v - full[0]) <= 1e-12 * max(1.0, full[0])
    assert np.max(np.abs(total_g - full[1])) <= 1e-12 * max(1.0, np.max(np.abs(full[1])))


def test_sobolev_stochastic_gradient_fd():
    net = net_for(2)
    b = batch_for(net)
    cfg = SobolevConfig("stochastic", directions=3)
    V = learn.sample_directions(np.random.default_rng(0), 21, 2)
    _, g = learn.sobolev_loss_stochastic(net, b, cfg, None, directions=V)
    fd = theta_fd(net, lambda: learn.sobolev_loss_stochastic(net, b, cfg, None, directions=V)[0])
    assert rel_err(g, fd) < 1e-4


def test_stochastic_zero_when_jacobian_matches():
    net = net_for(2)
    b = batch_for(net)
    b.K = net.input_jacobian(b.x)
    v, _ = learn.sobolev_loss_stochastic(net, b, SobolevConfig("stochastic"), np.random.default_rng(0))
    assert v < 1e-25


def test_scalar_identity():
    net = net_for(1)
    for seed in range(10):
        b = batch_for(net, seed=seed)
        full = learn.sobolev_loss_full(net, b)[0]
        sto = learn.sobolev_loss_stochastic(net, b, SobolevConfig("stochastic"),
                                            np.random.default_rng(seed))[0]
        assert abs(sto - full) <= 1e-12 * max(1.0, full)


def test_stochastic_sweep_count():
    net = net_for(2)
    b = batch_for(net, n=9)
    cfg = SobolevConfig("stochastic", directions=4)
    with instrument.delta("sobolev_sweeps") as d:
        learn.sobolev_loss_stochastic(net, b, cfg, np.random.default_rng(0))
    assert d["n"] == 9 * 4
    with instrument.delta("sobolev_sweeps") as d:
        learn.sobolev_loss_full(net, b)
    assert d["n"] == 9 * 2


def test_directions_on_unit_sphere():
    V = learn.sample_directions(np.random.default_rng(0), 1000, 3)
    assert np.allclose(np.linalg.norm(V, axis=1), 1.0)


def test_al_loss_nonms_gradient_and_identity():
    net = net_for(2)
    b = batch_for(net)
    value, g, gx2 = learn.al_policy_loss(net, b, ms=False)
    assert gx2 is None
    assert rel_err(g, theta_fd(net, lambda: learn.al_policy_loss(net, b)[0])) < 1e-5
    r = b.u - net.forward(b.x)
    mu = b.mu[:, None]
    completed = np.sum(0.5 * mu * (r + b.lam / mu) ** 2) - np.sum(b.lam ** 2 / (2 * mu))
    assert abs(value - completed) <= 1e-12 * max(1.0, abs(value))


def test_al_loss_ms_gradients():
    net = net_for(2)
    b = batch_for(net, ms=True)
    value, g, gx2 = learn.al_policy_loss(net, b, ms=True)
    assert rel_err(g, theta_fd(net, lambda: learn.al_policy_loss(net, b, True)[0])) < 1e-5
    x20 = b.x2.copy()

    def f(z):
        b.x2 = z
        return learn.al_policy_loss(net, b, True)[0]
    fd = finite_diff(f, x20)
    b.x2 = x20
    assert rel_err(gx2, fd) < 1e-5


def test_al_loss_ms_zero_at_consensus():
    net = net_for(2)
    b = batch_for(net, ms=True)
    b.lam[:] = 0.0
    b.gamma[:] = 0.0
    b.x2 = b.x.copy()
    b.u = net.forward(b.x)
    value, g, gx2 = learn.al_policy_loss(net, b, True)
    assert value == 0.0 and not np.any(g) and not np.any(gx2)


def test_adam_zero_grad_and_first_step():
    st = AdamState(lr=0.01)
    p = np.array([1.0, -2.0])
    learn.adam_step(st, p, np.zeros(2))
    assert np.array_equal(p, [1.0, -2.0])
    st = AdamState(lr=0.01)
    q = np.array([1.0, -2.0])
    learn.adam_step(st, q, np.array([3.0, -1e-3]))
    assert np.all(np.abs(q - [1.0, -2.0]) <= 0.01 * (1 + 1e-6))


def test_adam_quadratic_convergence():
    target = np.array([0.5, -1.5, 2.0])
    p = np.zeros(3)
    st = AdamState(lr=0.05)
    for _ in range(1000):
        learn.adam_step(st, p, p - target)
    assert np.max(np.abs(p - target)) < 1e-4


def test_fit_epochs_zero_and_realizable():
    net = net_for(2)
    b = batch_for(net)
    theta = net.theta.copy()
    learn.fit(net, b, epochs=0)
    assert np.array_equal(net.theta, theta)
    b.u = net.forward(b.x)
    rep = learn.fit(net, b, epochs=3, batch_size=4)
    assert rep.epoch_losses == [0.0, 0.0, 0.0]


def test_fit_linear_regression_converges():
    net = PolicyNet.init((1, 16, 1), [-10.0], [10.0], "tanh", seed=0)
    x = np.linspace(-1, 1, 64)[:, None]
    data = CloneDataset(x=x, u=0.8 * x - 0.2)
    st = AdamState(lr=3e-3)
    rep = learn.fit(net, data, epochs=200, batch_size=16, seed=0, adam=st)
    assert rep.epoch_losses[-1] < 1e-3 * rep.epoch_losses[0]


def test_fit_deterministic():
    def run():
        net = net_for(2)
        b = batch_for(net, n=40, ms=True)
        learn.fit(net, b, "al_ms", SobolevConfig("stochastic", seed=3), epochs=3, batch_size=8, seed=5)
        return net.theta.copy(), b.x2.copy()
    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_fit_aborts_on_nonfinite():
    net = net_for(2)
    b = batch_for(net)
    b.u[0, 0] = np.nan
    with pytest.raises(learn.TrainingAborted):
        learn.fit(net, b, epochs=1)


def test_dataset_validation():
    with pytest.raises(ValueError):
        CloneDataset(x=np.zeros((3, 2)), u=np.zeros((2, 1)))
    with pytest.raises(ValueError):
        CloneDataset(x=np.zeros((2, 2)), u=np.zeros((2, 1)), mu=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        SobolevConfig("sometimes")
    with pytest.raises(ValueError):
        SobolevConfig("full", weight=-1.0)
