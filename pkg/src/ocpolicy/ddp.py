"""Box-constrained iLQR with optional augmented-Lagrangian attractor terms.

Gauss-Newton expansions (no second derivatives of the dynamics), a
projected-Newton box-QP per step of the backward sweep, clamped forward
rollouts and a backtracking line search on actual vs. predicted decrease.
Gains follow ``du = k + K dx``.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import envs, instrument, kernels
from .ocp import DivergedRollout, Trajectory


class SolverFailure(RuntimeError):
    pass


@dataclass
class DdpSettings:
    max_iters: int = 50
    grad_tol: float = 1e-8
    backtrack: float = 0.5
    min_step: float = 2.0 ** -10
    accept_ratio: float = 0.0
    reg_init: float = 0.0
    reg_min: float = 1e-6
    reg_max: float = 1e10
    reg_up: float = 10.0
    reg_down: float = 2.0
    qp_max_iters: int = 100
    qp_tol: float = 1e-12
    constrained: bool = True

    def __post_init__(self):
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.max_iters < 0 or self.grad_tol <= 0 or self.min_step <= 0:
            raise ValueError("solver settings must be positive")


@dataclass
class ExtraQuadCost:
    """Per-step attractors 1/2 mu_t |u_t - ru_t|^2 + 1/2 mu_t |x_t - rx_t|^2 (t < T)."""
    mu: np.ndarray
    ru: np.ndarray = None
    rx: np.ndarray = None

    def __post_init__(self):
        if np.any(np.asarray(self.mu) < 0):
            raise ValueError("attractor weights must be non-negative")


@dataclass
class PolicyAttractor:
    """Penalty 1/2 mu_t |u_t + shift_t - policy(x_t)|^2 with shift = lambda / mu."""
    net: object
    shift: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.mu) <= 0):
            raise ValueError("attractor weights must be positive")


@dataclass
class DdpReport:
    iterations: int = 0
    final_cost: float = np.nan
    grad_norm: float = np.nan
    converged: bool = False
    cost_trace: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    error: str = None


class _Objective:
    def __init__(self, ocp, beta, extra):
        self.ocp = ocp
        self.goal = np.asarray(beta.goal, dtype=float)
        self.extra = extra

    def cost(self, X, U):
        """(total objective, task cost R)."""
        task = float(np.sum(envs.cost_values(self.ocp.spec, self.ocp.weights, self.goal, X, U)))
        ex = self.extra
        if ex is None:
            return task, task
        T = self.ocp.T
        mu = np.broadcast_to(ex.mu, (T,))
        if isinstance(ex, PolicyAttractor):
            r = U + ex.shift - ex.net.forward(X[:T])
            extra = 0.5 * np.sum(mu * np.sum(r * r, axis=1))
        else:
            extra = 0.0
            if ex.ru is not None:
                extra += 0.5 * np.sum(mu * np.sum((U - ex.ru) ** 2, axis=1))
            if ex.rx is not None:
                extra += 0.5 * np.sum(mu * np.sum((X[:T] - ex.rx) ** 2, axis=1))
        return task + extra, task

    def expand(self, X, U):
        spec = self.ocp.spec
        T = self.ocp.T
        fx, fu = kernels.linearize(*spec.kernel_args, X, U)
        lx, lu, lxx, luu, lux = envs.cost_expansions(spec, self.ocp.weights, self.goal, X, U)
        ex = self.extra
        if ex is not None:
            mu = np.broadcast_to(ex.mu, (T,))
            eye_u = np.eye(spec.n_u)
            if isinstance(ex, PolicyAttractor):
                pi, J = ex.net.forward_and_jacobian(X[:T])
                r = U + ex.shift - pi
                lu += mu[:, None] * r
                luu += mu[:, None, None] * eye_u
                lx[:T] -= mu[:, None] * np.einsum("tui,tu->ti", J, r)
                lxx[:T] += mu[:, None, None] * np.einsum("tui,tuj->tij", J, J)
                lux -= mu[:, None, None] * J
            else:
                if ex.ru is not None:
                    lu += mu[:, None] * (U - ex.ru)
                    luu += mu[:, None, None] * eye_u
                if ex.rx is not None:
                    lx[:T] += mu[:, None] * (X[:T] - ex.rx)
                    lxx[:T] += mu[:, None, None] * np.eye(spec.n_x)
        return fx, fu, lx, lu, lxx, luu, lux


def backward_pass(expansions, ubar, bounds, reg=0.0, settings=None):
    """Run the backward sweep on precomputed expansions.

    ``expansions`` is (fx, fu, lx, lu, lxx, luu, lux); ``bounds`` is
    (u_min, u_max) or None. Returns (k, K, (dV1, dV2), failed_at).
    """
    s = settings or DdpSettings()
    fx, fu, lx, lu, lxx, luu, lux = expansions
    if bounds is None:
        lo = np.full(ubar.shape, -np.inf)
        hi = np.full(ubar.shape, np.inf)
        bounded = False
    else:
        lo = np.ascontiguousarray(bounds[0] - ubar)
        hi = np.ascontiguousarray(bounds[1] - ubar)
        bounded = True
    k, K, dV1, dV2, failed = kernels.backward_pass(
        fx, fu, lx, lu, lxx, luu, lux, lo, hi, float(reg), bounded, s.qp_max_iters, s.qp_tol)
    return k, K, (dV1, dV2), failed


def forward_pass(ocp, traj, k, K, alpha, constrained=True):
    """Candidate trajectory u = clamp(ubar + alpha k + K (x - xbar)); None if it diverges."""
    spec = ocp.spec
    clamp = constrained and spec.bounded
    X, U, bad = kernels.forward_pass(*spec.kernel_args, traj.x, traj.u, k, K, float(alpha),
                                     spec.u_min, spec.u_max, clamp)
    instrument.bump("sim_calls", ocp.T if bad < 0 else bad + 1)
    if bad >= 0:
        return None
    return Trajectory(X, U)


def solve(ocp, beta, warm_start=None, extra=None, settings=None):
    """Locally optimal box-feasible trajectory for one problem instance."""
    s = settings or DdpSettings()
    spec = ocp.spec
    clamp = s.constrained and spec.bounded
    bounds = (spec.u_min, spec.u_max) if clamp else None
    U0 = np.zeros((ocp.T, spec.n_u)) if warm_start is None else \
        np.array(warm_start, dtype=float).reshape(ocp.T, spec.n_u)
    X, U, bad = kernels.rollout(*spec.kernel_args, np.asarray(beta.x0, dtype=float), U0,
                                spec.u_min, spec.u_max, clamp)
    instrument.bump("sim_calls", ocp.T if bad < 0 else bad + 1)
    if bad >= 0:
        raise DivergedRollout(bad)

    obj = _Objective(ocp, beta, extra)
    total, task = obj.cost(X, U)
    report = DdpReport(cost_trace=[total])
    reg = s.reg_init
    expansions = None
    k = K = None
    while True:
        if expansions is None:
            expansions = obj.expand(X, U)
        k, K, (dV1, dV2), failed = backward_pass(expansions, U, bounds, reg, s)
        if failed >= 0:
            reg = max(reg * s.reg_up, s.reg_min)
            if reg > s.reg_max:
                raise SolverFailure(f"Quu not positive definite at step {failed}")
            continue
        report.grad_norm = abs(dV1)
        if report.grad_norm < s.grad_tol:
            report.converged = True
            break
        if report.iterations >= s.max_iters:
            break
        alpha = 1.0
        accepted = None
        while alpha >= s.min_step:
            cand = forward_pass(ocp, Trajectory(X, U), k, K, alpha, s.constrained)
            if cand is not None:
                expected = -(alpha * dV1 + 0.5 * alpha * alpha * dV2)
                new_total, new_task = obj.cost(cand.x, cand.u)
                if expected > 0 and np.isfinite(new_total):
                    ratio = (total - new_total) / expected
                    if ratio > s.accept_ratio:
                        accepted = (cand, new_total, new_task, ratio)
                        break
            alpha *= s.backtrack
        if accepted is None:
            reg = max(reg * s.reg_up, s.reg_min)
            if reg > s.reg_max:
                break
            continue
        cand, total, task, ratio = accepted
        X, U = cand.x, cand.u
        expansions = None
        report.iterations += 1
        report.cost_trace.append(total)
        report.ratios.append(ratio)
        reg = reg / s.reg_down
        if reg < s.reg_min:
            reg = 0.0
    report.final_cost = total
    return Trajectory(X, U, k, K, task), report


def _solve_one(args):
    ocp, beta, warm, extra, settings = args
    try:
        return solve(ocp, beta, warm, extra, settings)
    except (SolverFailure, DivergedRollout, np.linalg.LinAlgError) as exc:
        return None, DdpReport(error=f"{type(exc).__name__}: {exc}")


def solve_batch(ocp, samples, warm_starts=None, extras=None, settings=None, workers=1):
    """Independent solves; failed samples yield (None, report-with-error)."""
    n = len(samples)
    warm_starts = [None] * n if warm_starts is None else list(warm_starts)
    extras = [None] * n if extras is None else list(extras)
    if len(warm_starts) != n or len(extras) != n:
        raise ValueError("warm_starts and extras must align with samples")
    jobs = [(ocp, samples[i], warm_starts[i], extras[i], settings) for i in range(n)]
    if workers <= 1 or n == 1:
        return [_solve_one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_solve_one, jobs))
