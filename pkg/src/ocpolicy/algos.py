"""Outer training loops alternating trajectory optimization and policy fitting.

``run_pddp`` projects DDP solutions onto the policy class by regression.
``run_plal`` runs ADMM on the consensus constraint u = policy(x), optionally
with duplicated (multiple-shooting) states so the OC step never needs the
policy Jacobian.
"""
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ddp, instrument, learn
from .learn import CloneDataset, SobolevConfig, TrainingAborted
from .ocp import policy_costs, rollout_policies

log = logging.getLogger(__name__)

ALGORITHMS = ("pddp", "plal", "plal_ms")


@dataclass
class OuterLoopConfig:
    algorithm: str = "pddp"
    iterations: int = 20
    mu: float = 10.0
    constraints: bool = True
    online: bool = False
    sobolev: SobolevConfig = field(default_factory=SobolevConfig)
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    shadow_lr: float = 0.1
    eval_every: int = 1
    early_stop_tol: float = 0.0
    seed: int = 0
    workers: int = 1
    solver: ddp.DdpSettings = field(default_factory=ddp.DdpSettings)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.iterations < 1:
            raise ValueError("need at least one outer iteration")
        if self.mu < 1e-6:
            raise ValueError("penalty weight mu must be >= 1e-6")


@dataclass
class IterationRecord:
    k: int
    sim_calls: int
    train_cost: float = np.nan
    train_policy_cost: float = np.nan
    test_cost: float = np.nan
    consensus_u: float = np.nan
    consensus_x: float = np.nan
    oc_time_s: float = 0.0
    learn_time_s: float = 0.0
    ddp_iters_mean: float = np.nan
    oc_jacobian_calls: int = 0
    failures: int = 0
    warm_cost: float = np.nan


@dataclass
class ConsensusState:
    lam: np.ndarray                 # (N, T, nu)
    mu: np.ndarray                  # (N, T)
    gamma: np.ndarray = None        # (N, T, nx), multiple shooting only
    x2: np.ndarray = None           # (N, T, nx), multiple shooting only
    consensus_u: float = np.nan
    consensus_x: float = np.nan
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n, T, n_u, n_x, mu, ms=False):
        return cls(np.zeros((n, T, n_u)), np.full((n, T), float(mu)),
                   np.zeros((n, T, n_x)) if ms else None,
                   np.zeros((n, T, n_x)) if ms else None)


def _mean(values):
    values = np.asarray(values, dtype=float)
    return float(np.mean(values)) if values.size else np.nan


def _settings(cfg):
    return replace(cfg.solver, constrained=cfg.constraints)


def _check_failures(results, n):
    failures = sum(1 for tr, _ in results if tr is None)
    if failures > n / 2:
        errors = {rep.error for tr, rep in results if tr is None}
        raise TrainingAborted(f"{failures}/{n} trajectory solves failed: {sorted(errors)}")
    return failures


def _evaluate(rec, ocp, train, test, net, k, cfg):
    rec.train_policy_cost = _mean(policy_costs(ocp, train, net))
    if test is not None and (k % cfg.eval_every == 0 or k == cfg.iterations):
        rec.test_cost = _mean(policy_costs(ocp, test, net))


def _initial_record(ocp, train, test, net, start_calls):
    rec = IterationRecord(k=0, sim_calls=0)
    rec.train_policy_cost = _mean(policy_costs(ocp, train, net))
    if test is not None:
        rec.test_cost = _mean(policy_costs(ocp, test, net))
    rec.sim_calls = instrument.read("sim_calls") - start_calls
    return rec


def run_pddp(ocp, train, net, cfg, test=None, resample=None, on_record=None):
    """Projected DDP. ``resample(k)`` supplies a fresh SampleSet in online mode."""
    start = instrument.read("sim_calls")
    records = [_initial_record(ocp, train, test, net, start)]
    if on_record:
        on_record(records[0])
    opt = learn.AdamState(lr=cfg.lr)
    settings = _settings(cfg)
    for k in range(1, cfg.iterations + 1):
        if cfg.online and resample is not None:
            train = resample(k)
        rec = IterationRecord(k=k, sim_calls=0)
        t0 = time.perf_counter()
        warm = rollout_policies(ocp, train, net)
        rec.warm_cost = _mean([tr.cost for tr in warm])
        results = ddp.solve_batch(ocp, train, [tr.u for tr in warm], None, settings, cfg.workers)
        rec.oc_time_s = time.perf_counter() - t0
        rec.failures = _check_failures(results, len(train))
        trajs = [tr for tr, _ in results]
        rec.train_cost = _mean([tr.cost for tr in trajs if tr is not None])
        rec.ddp_iters_mean = _mean([rep.iterations for tr, rep in results if tr is not None])

        t0 = time.perf_counter()
        data = CloneDataset.from_trajectories(trajs)
        learn.fit(net, data, "clone", cfg.sobolev, cfg.epochs, cfg.batch_size,
                  seed=[cfg.seed, k], adam=opt)
        rec.learn_time_s = time.perf_counter() - t0
        _evaluate(rec, ocp, train, test, net, k, cfg)
        rec.sim_calls = instrument.read("sim_calls") - start
        records.append(rec)
        log.info("pddp k=%d train=%.6g test=%.6g", k, rec.train_cost, rec.test_cost)
        if on_record:
            on_record(rec)
    return net, records


def dual_update(state, trajs, net):
    """lam += mu (u - pi(x)); with shadow states pi is evaluated at x2 and
    gamma += mu (x1 - x2). Failed samples (None) keep their multipliers."""
    ms = state.x2 is not None
    res_u, res_x = [], []
    for i, tr in enumerate(trajs):
        if tr is None:
            continue
        T = tr.u.shape[0]
        mu = state.mu[i][:, None]
        at = state.x2[i] if ms else tr.x[:T]
        r = tr.u - net.forward(at)
        state.lam[i] += mu * r
        res_u.append(np.max(np.linalg.norm(r, axis=1)))
        if ms:
            rx = tr.x[:T] - state.x2[i]
            state.gamma[i] += mu * rx
            res_x.append(np.max(np.linalg.norm(rx, axis=1)))
    state.consensus_u = float(max(res_u)) if res_u else np.nan
    state.consensus_x = float(max(res_x)) if res_x else np.nan
    state.history.append((state.consensus_u, state.consensus_x))
    return state


def box_discrepancy_floor(U, u_min, u_max):
    """1/2 sum dist(u_t, box)^2: no box-bounded policy can clone targets below this."""
    U = np.asarray(U, dtype=float)
    gap = U - np.clip(U, u_min, u_max)
    return 0.5 * float(np.sum(gap * gap))


def _extras(state, net, ms):
    n = state.lam.shape[0]
    out = []
    for i in range(n):
        mu = state.mu[i]
        shift = state.lam[i] / mu[:, None]
        if ms:
            out.append(ddp.ExtraQuadCost(mu, ru=net.forward(state.x2[i]) - shift,
                                         rx=state.x2[i] - state.gamma[i] / mu[:, None]))
        else:
            out.append(ddp.PolicyAttractor(net, shift, mu))
    return out


def run_plal(ocp, train, net, cfg, test=None, on_record=None):
    """ADMM on the sampled consensus problem with fixed samples."""
    ms = cfg.algorithm == "plal_ms"
    n, T = len(train), ocp.T
    start = instrument.read("sim_calls")
    records = [_initial_record(ocp, train, test, net, start)]
    if on_record:
        on_record(records[0])
    state = ConsensusState.zeros(n, T, ocp.spec.n_u, ocp.spec.n_x, cfg.mu, ms)
    opt = learn.AdamState(lr=cfg.lr)
    settings = _settings(cfg)
    prev_U = None
    for k in range(1, cfg.iterations + 1):
        rec = IterationRecord(k=k, sim_calls=0)
        t0 = time.perf_counter()
        if prev_U is None:
            warm = rollout_policies(ocp, train, net)
            prev_U = [tr.u.copy() for tr in warm]
            rec.warm_cost = _mean([tr.cost for tr in warm])
            if ms:
                state.x2[:] = [tr.x[:T] for tr in warm]
        with instrument.delta("input_jacobian") as jac:
            extras = _extras(state, net, ms)
            results = ddp.solve_batch(ocp, train, prev_U, extras, settings, cfg.workers)
        rec.oc_time_s = time.perf_counter() - t0
        rec.oc_jacobian_calls = jac["n"]
        rec.failures = _check_failures(results, n)
        trajs = [tr for tr, _ in results]
        for i, tr in enumerate(trajs):
            if tr is not None:
                prev_U[i] = tr.u.copy()
        rec.train_cost = _mean([tr.cost for tr in trajs if tr is not None])
        rec.ddp_iters_mean = _mean([rep.iterations for tr, rep in results if tr is not None])

        t0 = time.perf_counter()
        ok = [i for i, tr in enumerate(trajs) if tr is not None]
        data = CloneDataset.from_trajectories(
            trajs,
            lam=np.concatenate([state.lam[i] for i in ok]),
            mu=np.concatenate([state.mu[i] for i in ok]),
            gamma=np.concatenate([state.gamma[i] for i in ok]) if ms else None,
            x2=np.concatenate([state.x2[i] for i in ok]) if ms else None)
        learn.fit(net, data, "al_ms" if ms else "al", cfg.sobolev, cfg.epochs, cfg.batch_size,
                  seed=[cfg.seed, k], adam=opt, shadow_adam=learn.AdamState(lr=cfg.shadow_lr))
        if ms:
            for row, (i, t) in enumerate(data.index):
                state.x2[i, t] = data.x2[row]
        dual_update(state, trajs, net)
        rec.learn_time_s = time.perf_counter() - t0
        rec.consensus_u = state.consensus_u
        rec.consensus_x = state.consensus_x
        _evaluate(rec, ocp, train, test, net, k, cfg)
        rec.sim_calls = instrument.read("sim_calls") - start
        records.append(rec)
        log.info("%s k=%d train=%.6g test=%.6g res_u=%.3g res_x=%.3g", cfg.algorithm, k,
                 rec.train_cost, rec.test_cost, rec.consensus_u, rec.consensus_x)
        if on_record:
            on_record(rec)
        hist = [h[0] for h in state.history][-6:]
        if len(hist) == 6 and hist[-1] > 10.0 * hist[0] and np.all(np.diff(hist) > 0):
            raise TrainingAborted(f"consensus residual diverging: {hist[-6]:.3g} -> {hist[-1]:.3g}")
        if cfg.early_stop_tol > 0 and state.consensus_u < cfg.early_stop_tol and \
                (not ms or state.consensus_x < cfg.early_stop_tol):
            break
    return net, state, records


def run(ocp, train, net, cfg, test=None, resample=None, on_record=None):
    if cfg.algorithm == "pddp":
        net, records = run_pddp(ocp, train, net, cfg, test, resample, on_record)
        return net, None, records
    return run_plal(ocp, train, net, cfg, test, on_record)


def reference_costs(ocp, samples, net=None, settings=None, workers=1):
    """Per-instance DDP optimum: best of a cold start and (if given) a policy warm start."""
    s = settings or ddp.DdpSettings(max_iters=500)
    cold = ddp.solve_batch(ocp, samples, None, None, s, workers)
    best = np.array([tr.cost if tr is not None else np.inf for tr, _ in cold])
    if net is not None:
        warm = rollout_policies(ocp, samples, net)
        res = ddp.solve_batch(ocp, samples, [tr.u for tr in warm], None, s, workers)
        best = np.minimum(best, [tr.cost if tr is not None else np.inf for tr, _ in res])
    return best


@dataclass
class WarmStartRow:
    sample: int
    iters_cold: int
    iters_warm: int
    converged_cold: bool
    converged_warm: bool
    cost_cold: float
    cost_warm: float


def warmstart_benchmark(ocp, net, test, settings=None, workers=1):
    """DDP iterations to reach the gradient tolerance from zero controls vs. a policy rollout."""
    s = settings or ddp.DdpSettings(max_iters=500)
    cold = ddp.solve_batch(ocp, test, None, None, s, workers)
    warm_u = [tr.u for tr in rollout_policies(ocp, test, net)]
    warm = ddp.solve_batch(ocp, test, warm_u, None, s, workers)
    rows = []
    for i, ((tc, rc), (tw, rw)) in enumerate(zip(cold, warm)):
        rows.append(WarmStartRow(i, rc.iterations, rw.iterations, rc.converged, rw.converged,
                                 tc.cost if tc is not None else np.inf,
                                 tw.cost if tw is not None else np.inf))
    return rows
