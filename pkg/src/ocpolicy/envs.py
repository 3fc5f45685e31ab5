"""Benchmark systems with exact first-order derivatives.

Three systems are provided: a discrete double integrator ("lqr", or any
user-supplied linear system), a torque-driven pendulum and a fully actuated
double pendulum. Angles are measured from the stable downward equilibrium
and are never wrapped; the end-effector position used by the cost is
periodic in them anyway.

All dynamics use semi-implicit Euler: velocities are advanced first, then
positions with the new velocities.
"""
from dataclasses import dataclass, field

import numpy as np

from . import instrument, kernels

KINDS = {"lqr": kernels.LINEAR, "pendulum": kernels.PENDULUM,
         "double_pendulum": kernels.DOUBLE_PENDULUM}


class DimensionError(ValueError):
    pass


@dataclass
class SystemSpec:
    kind: str
    n_x: int
    n_u: int
    dt: float
    u_min: np.ndarray
    u_max: np.ndarray
    params: dict = field(default_factory=dict)
    A: np.ndarray = None
    B: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}")
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(self.n_u)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(self.n_u)
        if not np.all(self.u_min < self.u_max):
            raise ValueError("u_min must be strictly below u_max")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.kind == "lqr":
            self.A = np.ascontiguousarray(self.A, dtype=float)
            self.B = np.ascontiguousarray(self.B, dtype=float)
            if self.A.shape != (self.n_x, self.n_x) or self.B.shape != (self.n_x, self.n_u):
                raise DimensionError("A/B shapes do not match (n_x, n_u)")
        else:
            self.A = np.zeros((1, 1))
            self.B = np.zeros((1, 1))
        self._pvec = self._param_vector()

    def _param_vector(self):
        p = self.params
        if self.kind == "lqr":
            return np.array([self.dt])
        if self.kind == "pendulum":
            return np.array([p["m"], p["l"], p["g"], p["damping"], self.dt], dtype=float)
        return np.array([p["m1"], p["m2"], p["l1"], p["l2"], p["g"], p["damping"], self.dt],
                        dtype=float)

    @property
    def kernel_args(self):
        return KINDS[self.kind], self._pvec, self.A, self.B

    @property
    def bounded(self):
        return bool(np.any(np.isfinite(self.u_min)) or np.any(np.isfinite(self.u_max)))

    def clamp(self, u):
        return np.clip(u, self.u_min, self.u_max)

    @property
    def n_p(self):
        return self.n_x if self.kind == "lqr" else 2

    @property
    def position_dims(self):
        return {"lqr": 0, "pendulum": 1, "double_pendulum": 2}[self.kind]


def double_integrator(dt=0.1, u_bound=1.0):
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[dt * dt], [dt]])
    return SystemSpec("lqr", 2, 1, dt, [-u_bound], [u_bound], A=A, B=B)


def linear_system(A, B, u_min, u_max, dt=1.0):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return SystemSpec("lqr", A.shape[0], B.shape[1], dt, u_min, u_max, A=A, B=B)


def pendulum(m=1.0, l=1.0, g=9.81, damping=0.0, dt=0.05, u_bound=3.0):
    return SystemSpec("pendulum", 2, 1, dt, [-u_bound], [u_bound],
                      params=dict(m=m, l=l, g=g, damping=damping))


def double_pendulum(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=9.81, damping=0.0, dt=0.05,
                    u_bound=10.0):
    ub = np.broadcast_to(np.asarray(u_bound, dtype=float), (2,))
    return SystemSpec("double_pendulum", 4, 2, dt, -ub, ub,
                      params=dict(m1=m1, m2=m2, l1=l1, l2=l2, g=g, damping=damping))


def _check(spec, x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n_x,):
        raise DimensionError(f"state has shape {x.shape}, expected ({spec.n_x},)")
    if u is None:
        return x, None
    u = np.asarray(u, dtype=float)
    if u.shape != (spec.n_u,):
        raise DimensionError(f"control has shape {u.shape}, expected ({spec.n_u},)")
    return x, u


def step(spec, x, u):
    """x_{t+1} = f(x_t, u_t). Controls are not clamped here."""
    x, u = _check(spec, x, u)
    out = np.empty(spec.n_x)
    kernels.step_into(*spec.kernel_args, x, u, out)
    instrument.bump("sim_calls")
    return out


@dataclass
class DynamicsDerivs:
    fx: np.ndarray
    fu: np.ndarray


def step_derivs(spec, x, u):
    x, u = _check(spec, x, u)
    fx = np.zeros((spec.n_x, spec.n_x))
    fu = np.zeros((spec.n_x, spec.n_u))
    kernels.derivs_into(*spec.kernel_args, x, u, fx, fu)
    return DynamicsDerivs(fx, fu)


def end_effector(spec, X):
    """Task-space position p(x) and its Jacobian for a batch of states."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    if spec.kind == "lqr":
        return X.copy(), np.broadcast_to(np.eye(spec.n_x), (n, spec.n_x, spec.n_x)).copy()
    J = np.zeros((n, 2, spec.n_x))
    if spec.kind == "pendulum":
        l = spec.params["l"]
        th = X[:, 0]
        P = np.stack([l * np.sin(th), -l * np.cos(th)], axis=1)
        J[:, 0, 0] = l * np.cos(th)
        J[:, 1, 0] = l * np.sin(th)
        return P, J
    l1, l2 = spec.params["l1"], spec.params["l2"]
    q1, q12 = X[:, 0], X[:, 0] + X[:, 1]
    P = np.stack([l1 * np.sin(q1) + l2 * np.sin(q12),
                  -l1 * np.cos(q1) - l2 * np.cos(q12)], axis=1)
    J[:, 0, 0] = l1 * np.cos(q1) + l2 * np.cos(q12)
    J[:, 0, 1] = l2 * np.cos(q12)
    J[:, 1, 0] = l1 * np.sin(q1) + l2 * np.sin(q12)
    J[:, 1, 1] = l2 * np.sin(q12)
    return P, J


@dataclass
class CostWeights:
    """Quadratic weights of the stage cost.

    ``w_x`` is a full n_x x n_x matrix; for the pendulums only the velocity
    block is nonzero (see ``weights_from_diag``). The terminal cost reuses
    ``w_p`` and ``w_x`` scaled by ``terminal``.
    """
    w_p: np.ndarray
    w_u: np.ndarray
    w_x: np.ndarray
    terminal: float = 10.0

    def __post_init__(self):
        self.w_p = np.atleast_2d(np.asarray(self.w_p, dtype=float))
        self.w_u = np.atleast_2d(np.asarray(self.w_u, dtype=float))
        self.w_x = np.atleast_2d(np.asarray(self.w_x, dtype=float))


def weights_from_diag(spec, w_p, w_u, w_x, terminal=10.0):
    """Build weights from diagonal entries; pendulum ``w_x`` lists velocity weights only."""
    w_p = np.broadcast_to(np.asarray(w_p, dtype=float), (spec.n_p,))
    w_u = np.broadcast_to(np.asarray(w_u, dtype=float), (spec.n_u,))
    if spec.kind == "lqr":
        wx = np.broadcast_to(np.asarray(w_x, dtype=float), (spec.n_x,))
    else:
        nv = spec.n_x // 2
        wx = np.concatenate([np.zeros(nv), np.broadcast_to(np.asarray(w_x, dtype=float), (nv,))])
    return CostWeights(np.diag(w_p), np.diag(w_u), np.diag(wx), terminal)


@dataclass
class CostTerms:
    value: float
    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lxu: np.ndarray


def stage_cost(spec, weights, goal, x, u):
    """l(x,u) = 1/2|p(x)-goal|^2_Wp + 1/2|u|^2_Wu + 1/2|x|^2_Wx with Gauss-Newton lxx."""
    x, u = _check(spec, x, u)
    P, J = end_effector(spec, x[None])
    e = P[0] - goal
    Wp, Wu, Wx = weights.w_p, weights.w_u, weights.w_x
    value = 0.5 * e @ Wp @ e + 0.5 * u @ Wu @ u + 0.5 * x @ Wx @ x
    lx = J[0].T @ Wp @ e + Wx @ x
    lxx = J[0].T @ Wp @ J[0] + Wx
    return CostTerms(float(value), lx, Wu @ u, lxx, Wu.copy(), np.zeros((spec.n_x, spec.n_u)))


def terminal_cost(spec, weights, goal, x):
    x, _ = _check(spec, x)
    P, J = end_effector(spec, x[None])
    e = P[0] - goal
    s = weights.terminal
    Wp, Wx = weights.w_p, weights.w_x
    value = s * (0.5 * e @ Wp @ e + 0.5 * x @ Wx @ x)
    lx = s * (J[0].T @ Wp @ e + Wx @ x)
    lxx = s * (J[0].T @ Wp @ J[0] + Wx)
    return CostTerms(float(value), lx, np.zeros(spec.n_u), lxx,
                     np.zeros((spec.n_u, spec.n_u)), np.zeros((spec.n_x, spec.n_u)))


def cost_values(spec, weights, goal, X, U):
    """Per-step costs, length T+1 (terminal last)."""
    P, _ = end_effector(spec, X)
    E = P - goal
    Wp, Wu, Wx = weights.w_p, weights.w_u, weights.w_x
    state = 0.5 * np.einsum("ti,ij,tj->t", E, Wp, E) + 0.5 * np.einsum("ti,ij,tj->t", X, Wx, X)
    out = state.copy()
    out[:-1] += 0.5 * np.einsum("ti,ij,tj->t", U, Wu, U)
    out[-1] *= weights.terminal
    return out


def cost_expansions(spec, weights, goal, X, U):
    """Stacked gradients/Gauss-Newton Hessians along a trajectory.

    Returns (lx[T+1], lu[T], lxx[T+1], luu[T], lux[T]) with lux shaped (nu, nx).
    """
    T = U.shape[0]
    P, J = end_effector(spec, X)
    E = P - goal
    Wp, Wu, Wx = weights.w_p, weights.w_u, weights.w_x
    lx = np.einsum("tpi,pq,tq->ti", J, Wp, E) + X @ Wx.T
    lxx = np.einsum("tpi,pq,tqj->tij", J, Wp, J) + Wx
    lx[-1] *= weights.terminal
    lxx[-1] *= weights.terminal
    lu = U @ Wu.T
    luu = np.broadcast_to(Wu, (T, spec.n_u, spec.n_u)).copy()
    lux = np.zeros((T, spec.n_u, spec.n_x))
    return lx, lu, lxx, luu, lux


def energy(spec, x):
    """Total mechanical energy of a pendulum state (used for sanity checks)."""
    p = spec.params
    if spec.kind == "pendulum":
        return 0.5 * p["m"] * p["l"] ** 2 * x[1] ** 2 - p["m"] * p["g"] * p["l"] * np.cos(x[0])
    if spec.kind == "double_pendulum":
        m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["g"]
        q1, q2, v = x[0], x[1], x[2:]
        c2 = np.cos(q2)
        M = np.array([[(m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2 * m2 * l1 * l2 * c2,
                       m2 * l2 ** 2 + m2 * l1 * l2 * c2],
                      [m2 * l2 ** 2 + m2 * l1 * l2 * c2, m2 * l2 ** 2]])
        pot = -(m1 + m2) * g * l1 * np.cos(q1) - m2 * g * l2 * np.cos(q1 + q2)
        return 0.5 * v @ M @ v + pot
    raise ValueError("energy is defined for pendulum systems only")
