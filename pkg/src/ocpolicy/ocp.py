"""Sampled optimal-control problems, rollouts and cost evaluation."""
from dataclasses import dataclass, field

import numpy as np

from . import envs, instrument, kernels


class DivergedRollout(RuntimeError):
    def __init__(self, step):
        super().__init__(f"rollout produced a non-finite state at step {step}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass
class ProblemParams:
    x0: np.ndarray
    goal: np.ndarray


@dataclass
class Ocp:
    spec: envs.SystemSpec
    weights: envs.CostWeights
    T: int

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("horizon T must be >= 1")


@dataclass
class Trajectory:
    """x: (T+1, nx), u: (T, nu), k: (T, nu), K: (T, nu, nx). Gains are empty for policy rollouts."""
    x: np.ndarray
    u: np.ndarray
    k: np.ndarray = None
    K: np.ndarray = None
    cost: float = np.nan


@dataclass
class SamplingBox:
    x0_low: np.ndarray
    x0_high: np.ndarray
    goal: np.ndarray
    goal_low: np.ndarray = None
    goal_high: np.ndarray = None


@dataclass
class SampleSet:
    params: list
    seed: object = None

    def __len__(self):
        return len(self.params)

    def __iter__(self):
        return iter(self.params)

    def __getitem__(self, i):
        return self.params[i]


def sample_params(box, n, seed):
    """i.i.d. uniform draws of x0 (and of the goal when a goal box is given)."""
    if n < 1:
        raise ConfigError("need at least one sample")
    lo = np.asarray(box.x0_low, dtype=float)
    hi = np.asarray(box.x0_high, dtype=float)
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ConfigError("empty x0 sampling box")
    rng = np.random.default_rng(seed)
    x0s = rng.uniform(lo, hi, size=(n, lo.size))
    if box.goal_low is not None:
        glo = np.asarray(box.goal_low, dtype=float)
        ghi = np.asarray(box.goal_high, dtype=float)
        if np.any(ghi < glo):
            raise ConfigError("empty goal sampling box")
        goals = rng.uniform(glo, ghi, size=(n, glo.size))
    else:
        goals = np.broadcast_to(np.asarray(box.goal, dtype=float), (n, np.size(box.goal)))
    return SampleSet([ProblemParams(x0s[i].copy(), goals[i].copy()) for i in range(n)], seed)


def trajectory_cost(ocp, goal, X, U):
    return float(np.sum(envs.cost_values(ocp.spec, ocp.weights, goal, X, U)))


def eval_cost(ocp, beta, u):
    """R(beta; u): roll the dynamics from beta.x0 under u (no clamping)."""
    u = np.ascontiguousarray(u, dtype=float).reshape(ocp.T, ocp.spec.n_u)
    spec = ocp.spec
    X, _, bad = kernels.rollout(*spec.kernel_args, np.asarray(beta.x0, dtype=float), u,
                                spec.u_min, spec.u_max, False)
    instrument.bump("sim_calls", ocp.T if bad < 0 else bad + 1)
    if bad >= 0:
        raise DivergedRollout(bad)
    return trajectory_cost(ocp, beta.goal, X, u)


def rollout_policy(ocp, beta, policy):
    traj = rollout_policies(ocp, [beta], policy)[0]
    if not np.isfinite(traj.cost):
        bad = int(np.argmax(~np.all(np.isfinite(traj.x), axis=1))) - 1
        raise DivergedRollout(bad)
    return traj


def rollout_policies(ocp, samples, policy):
    """Closed-loop rollouts of u_t = policy(x_t), batched across samples.

    A sample whose state turns non-finite stops there and gets cost +inf.
    """
    spec = ocp.spec
    n = len(samples)
    X = np.zeros((n, ocp.T + 1, spec.n_x))
    U = np.zeros((n, ocp.T, spec.n_u))
    X[:, 0] = [b.x0 for b in samples]
    alive = np.ones(n, dtype=bool)
    for t in range(ocp.T):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        xt = np.ascontiguousarray(X[idx, t])
        ut = np.ascontiguousarray(policy.forward(xt))
        nxt = np.empty_like(xt)
        kernels.step_batch(*spec.kernel_args, xt, ut, nxt)
        instrument.bump("sim_calls", idx.size)
        U[idx, t] = ut
        X[idx, t + 1] = nxt
        bad = ~np.all(np.isfinite(nxt), axis=1)
        alive[idx[bad]] = False
    out = []
    for i, beta in enumerate(samples):
        if alive[i]:
            cost = trajectory_cost(ocp, beta.goal, X[i], U[i])
        else:
            cost = np.inf
        out.append(Trajectory(X[i], U[i], cost=cost))
    return out


def policy_costs(ocp, samples, policy):
    return np.array([tr.cost for tr in rollout_policies(ocp, samples, policy)])
