import numpy as np
import pytest

from ocpolicy import envs
from ocpolicy.ocp import (ConfigError, DivergedRollout, Ocp, ProblemParams, SamplingBox,
                          eval_cost, policy_costs, rollout_policy, sample_params)
from ocpolicy.policy import PolicyNet


def lqr_ocp(T=20):
    spec = envs.double_integrator()
    return Ocp(spec, envs.weights_from_diag(spec, 1.0, 0.1, 0.0), T)


def pendulum_ocp(T=40):
    spec = envs.pendulum()
    return Ocp(spec, envs.weights_from_diag(spec, 1.0, 0.01, 0.1), T)


def test_horizon_validation():
    with pytest.raises(ConfigError):
        lqr_ocp(0)


def test_zero_policy_at_origin():
    ocp = lqr_ocp()
    net = PolicyNet((2, 8, 1), [-1.0], [1.0])
    tr = rollout_policy(ocp, ProblemParams(np.zeros(2), np.zeros(2)), net)
    assert not np.any(tr.u) and not np.any(tr.x) and tr.cost == 0.0 and tr.K is None


def test_single_step_cost():
    ocp = lqr_ocp(1)
    net = PolicyNet.init((2, 8, 1), [-1.0], [1.0], "tanh", seed=0)
    beta = ProblemParams(np.array([0.4, -0.3]), np.array([0.1, 0.0]))
    tr = rollout_policy(ocp, beta, net)
    spec, w = ocp.spec, ocp.weights
    u = net.forward(beta.x0)
    x1 = envs.step(spec, beta.x0, u)
    ref = envs.stage_cost(spec, w, beta.goal, beta.x0, u).value + \
        envs.terminal_cost(spec, w, beta.goal, x1).value
    assert abs(tr.cost - ref) < 1e-14


def test_pendulum_rollout_reevaluation():
    ocp = pendulum_ocp()
    net = PolicyNet.init((2, 16, 16, 1), ocp.spec.u_min, ocp.spec.u_max, "tanh", seed=0)
    beta = ProblemParams(np.array([0.3, -0.2]), np.array([0.0, 1.0]))
    tr = rollout_policy(ocp, beta, net)
    total = sum(envs.stage_cost(ocp.spec, ocp.weights, beta.goal, tr.x[t], tr.u[t]).value
                for t in range(ocp.T))
    total += envs.terminal_cost(ocp.spec, ocp.weights, beta.goal, tr.x[-1]).value
    assert abs(total - tr.cost) < 1e-10
    # recorded controls replayed open loop
    assert abs(eval_cost(ocp, beta, tr.u) - tr.cost) < 1e-10


def test_eval_cost_zero_and_additive():
    ocp = lqr_ocp()
    assert eval_cost(ocp, ProblemParams(np.zeros(2), np.zeros(2)), np.zeros(20)) == 0.0
    beta = ProblemParams(np.array([1.0, 0.5]), np.array([0.2, 0.0]))
    u = np.random.default_rng(0).uniform(-1, 1, (20, 1))
    X = [beta.x0]
    for t in range(20):
        X.append(envs.step(ocp.spec, X[-1], u[t]))
    parts = [envs.stage_cost(ocp.spec, ocp.weights, beta.goal, X[t], u[t]).value for t in range(20)]
    parts.append(envs.terminal_cost(ocp.spec, ocp.weights, beta.goal, X[-1]).value)
    assert abs(eval_cost(ocp, beta, u) - sum(parts)) < 1e-12


def test_eval_cost_diverges():
    spec = envs.linear_system([[1e200]], [[1.0]], [-1.0], [1.0])
    ocp = Ocp(spec, envs.weights_from_diag(spec, 1.0, 1.0, 0.0), 5)
    with pytest.raises(DivergedRollout) as err:
        eval_cost(ocp, ProblemParams(np.array([1e200]), np.zeros(1)), np.zeros(5))
    assert err.value.step == 0


def test_diverging_policy_cost_is_inf():
    spec = envs.linear_system([[1e200]], [[1.0]], [-1.0], [1.0])
    ocp = Ocp(spec, envs.weights_from_diag(spec, 1.0, 1.0, 0.0), 5)
    net = PolicyNet((1, 1), [-1.0], [1.0])
    samples = [ProblemParams(np.array([1e200]), np.zeros(1)), ProblemParams(np.zeros(1), np.zeros(1))]
    costs = policy_costs(ocp, samples, net)
    assert costs[0] == np.inf and costs[1] == 0.0
    with pytest.raises(DivergedRollout):
        rollout_policy(ocp, samples[0], net)


def test_sampling_determinism_and_degenerate_box():
    box = SamplingBox([-1.0, 0.0], [1.0, 2.0], [0.0, 1.0])
    a, b = sample_params(box, 5, 11), sample_params(box, 5, 11)
    assert all(np.array_equal(p.x0, q.x0) for p, q in zip(a, b))
    one = sample_params(SamplingBox([0.3, -0.2], [0.3, -0.2], [0.0, 1.0]), 1, 0)
    assert np.array_equal(one[0].x0, [0.3, -0.2])


def test_sampling_mean():
    box = SamplingBox([-1.0, 2.0], [3.0, 2.5], [0.0, 0.0])
    X = np.array([p.x0 for p in sample_params(box, 1000, 3)])
    width = np.array([4.0, 0.5])
    sigma = width / np.sqrt(12.0)
    assert np.all(np.abs(X.mean(axis=0) - [1.0, 2.25]) < 3 * sigma / np.sqrt(1000))
    assert np.all(X >= [-1.0, 2.0]) and np.all(X <= [3.0, 2.5])


def test_sampling_goal_box_and_errors():
    box = SamplingBox([0.0], [1.0], None, goal_low=[-2.0, 0.0], goal_high=[-1.0, 0.5])
    s = sample_params(box, 20, 0)
    G = np.array([p.goal for p in s])
    assert np.all(G >= [-2.0, 0.0]) and np.all(G <= [-1.0, 0.5])
    with pytest.raises(ConfigError):
        sample_params(SamplingBox([1.0], [0.0], [0.0]), 3, 0)
    with pytest.raises(ConfigError):
        sample_params(SamplingBox([0.0], [1.0], [0.0]), 0, 0)
