"""Supervised losses for the policy and the mini-batch Adam loop.

Losses return ``(value, grad_theta)``; the augmented-Lagrangian loss in
multiple-shooting mode also returns the gradient with respect to the shadow
states. Sobolev targets are DDP gains under ``du = k + K dx``, so the policy
input-Jacobian is matched to ``K`` directly.
"""
from dataclasses import dataclass, field

import numpy as np


class TrainingAborted(RuntimeError):
    pass


@dataclass
class CloneDataset:
    """Flat (sample, time) rows. Optional fields are None when unused."""
    x: np.ndarray
    u: np.ndarray
    K: np.ndarray = None
    lam: np.ndarray = None
    mu: np.ndarray = None
    gamma: np.ndarray = None
    x2: np.ndarray = None
    index: np.ndarray = None

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("u", "K", "lam", "mu", "gamma", "x2", "index"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise ValueError(f"field {name} has {arr.shape[0]} rows, expected {n}")
        if self.mu is not None and np.any(self.mu <= 0):
            raise ValueError("penalty weights must be positive")

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        kw = {}
        for name in ("x", "u", "K", "lam", "mu", "gamma", "x2", "index"):
            arr = getattr(self, name)
            kw[name] = None if arr is None else arr[idx]
        return CloneDataset(**kw)

    @classmethod
    def from_trajectories(cls, trajs, **extra):
        """Stack trajectories (states x_0..x_{T-1}) into rows, skipping None entries."""
        keep = [(i, tr) for i, tr in enumerate(trajs) if tr is not None]
        x = np.concatenate([tr.x[:-1] for _, tr in keep])
        u = np.concatenate([tr.u for _, tr in keep])
        K = None
        if all(tr.K is not None for _, tr in keep):
            K = np.concatenate([tr.K for _, tr in keep])
        index = np.concatenate([np.stack([np.full(tr.u.shape[0], i), np.arange(tr.u.shape[0])],
                                         axis=1) for i, tr in keep])
        return cls(x, u, K, index=index, **extra)


@dataclass
class SobolevConfig:
    mode: str = "off"           # off | full | stochastic
    weight: float = 0.1
    directions: int = 1
    unbiased: bool = False      # scale the stochastic term by n_u
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("off", "full", "stochastic"):
            raise ValueError(f"unknown Sobolev mode {self.mode!r}")
        if self.weight < 0 or self.directions < 1:
            raise ValueError("Sobolev weight must be >= 0 and directions >= 1")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None
    counts: np.ndarray = None   # per-row step counts (shadow states only)


def adam_step(state, params, grad):
    """Bias-corrected Adam update of ``params`` in place."""
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def clone_loss(net, batch):
    """sum 1/2 |u - pi(x)|^2."""
    r = batch.u - net.forward(batch.x)
    return 0.5 * float(np.sum(r * r)), net.backward_params(batch.x, -r)


def sobolev_loss_full(net, batch):
    """1/2 sum |K - d pi/dx|_F^2 from n_u input sweeps per point."""
    value = 0.0
    grad = np.zeros(net.n_params)
    n = len(batch)
    for j in range(net.n_u):
        V = np.zeros((n, net.n_u))
        V[:, j] = 1.0
        e = batch.K[:, j, :] - net.input_jvp(batch.x, V)
        value += 0.5 * float(np.sum(e * e))
        grad += net.sobolev_backward_params(batch.x, V, -e)
    return value, grad


def sample_directions(rng, n, n_u):
    V = rng.standard_normal((n, n_u))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def sobolev_loss_stochastic(net, batch, cfg, rng, directions=None):
    """1/2 sum |v'K - d(v'pi)/dx|^2 averaged over ``cfg.directions`` random unit v per point.

    One input sweep plus one second-order sweep per direction.
    """
    m = cfg.directions
    X = np.repeat(batch.x, m, axis=0)
    Ks = np.repeat(batch.K, m, axis=0)
    V = sample_directions(rng, X.shape[0], net.n_u) if directions is None else directions
    e = np.einsum("bu,bui->bi", V, Ks) - net.input_jvp(X, V)
    scale = (net.n_u if cfg.unbiased else 1.0) / m
    value = 0.5 * scale * float(np.sum(e * e))
    grad = scale * net.sobolev_backward_params(X, V, -e)
    return value, grad


def al_policy_loss(net, batch, ms=False):
    """Augmented-Lagrangian consensus terms of the learning step.

    Without multiple shooting: sum lam'(u - pi(x)) + mu/2 |u - pi(x)|^2.
    With it: sum mu/2 |u + lam/mu - pi(x2)|^2 + mu/2 |x1 + gamma/mu - x2|^2
    - (|lam|^2 + |gamma|^2) / (2 mu), where x1 is ``batch.x``.
    Returns (value, grad_theta, grad_x2 or None).
    """
    mu = batch.mu[:, None]
    if not ms:
        r = batch.u - net.forward(batch.x)
        value = float(np.sum(batch.lam * r) + 0.5 * np.sum(mu * r * r))
        return value, net.backward_params(batch.x, -(batch.lam + mu * r)), None
    ru = batch.u + batch.lam / mu - net.forward(batch.x2)
    rx = batch.x + batch.gamma / mu - batch.x2
    value = float(0.5 * np.sum(mu * ru * ru) + 0.5 * np.sum(mu * rx * rx)
                  - 0.5 * np.sum((np.sum(batch.lam ** 2, axis=1) + np.sum(batch.gamma ** 2, axis=1))
                                 / batch.mu))
    up = -mu * ru
    g_theta = net.backward_params(batch.x2, up)
    g_x2 = net.input_jvp(batch.x2, up) - mu * rx
    return value, g_theta, g_x2


@dataclass
class FitReport:
    epoch_losses: list = field(default_factory=list)
    steps: int = 0


def fit(net, data, objective="clone", sobolev=None, epochs=20, batch_size=64, seed=0,
        adam=None, shadow_adam=None):
    """Mini-batch Adam on ``objective`` (clone | al | al_ms) plus optional Sobolev term.

    In ``al_ms`` mode the shadow states ``data.x2`` are updated in place with
    their own Adam state. Deterministic for a fixed seed.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if objective not in ("clone", "al", "al_ms"):
        raise ValueError(f"unknown objective {objective!r}")
    sob = sobolev or SobolevConfig()
    use_sob = sob.mode != "off" and sob.weight > 0 and data.K is not None
    rng = np.random.default_rng(seed)
    dir_rng = np.random.default_rng([sob.seed, *np.atleast_1d(seed).tolist()])
    opt = adam if adam is not None else AdamState()
    shadow = shadow_adam if shadow_adam is not None else AdamState(lr=1e-2)
    report = FitReport()
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = data.take(idx)
            gx2 = None
            if objective == "clone":
                value, grad = clone_loss(net, batch)
            else:
                value, grad, gx2 = al_policy_loss(net, batch, ms=objective == "al_ms")
            if use_sob:
                if sob.mode == "full":
                    sv, sg = sobolev_loss_full(net, batch)
                else:
                    sv, sg = sobolev_loss_stochastic(net, batch, sob, dir_rng)
                value += sob.weight * sv
                grad = grad + sob.weight * sg
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingAborted(f"non-finite loss at Adam step {opt.step}")
            total += value
            adam_step(opt, net.theta, grad)
            if gx2 is not None:
                _shadow_step(shadow, data, idx, gx2)
            report.steps += 1
        report.epoch_losses.append(total)
    return report


def _shadow_step(state, data, idx, grad_rows):
    """Adam on the rows ``idx`` of the shadow states (per-row moment buffers)."""
    if state.m is None:
        state.m = np.zeros_like(data.x2)
        state.v = np.zeros_like(data.x2)
        state.step = 0
        state.counts = np.zeros(data.x2.shape[0], dtype=np.int64)
    state.counts[idx] += 1
    c = state.counts[idx][:, None]
    m = state.beta1 * state.m[idx] + (1.0 - state.beta1) * grad_rows
    v = state.beta2 * state.v[idx] + (1.0 - state.beta2) * grad_rows ** 2
    state.m[idx] = m
    state.v[idx] = v
    mhat = m / (1.0 - state.beta1 ** c)
    vhat = v / (1.0 - state.beta2 ** c)
    data.x2[idx] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
