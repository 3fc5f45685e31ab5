"""Reference solvers used to check the optimizer and the derivatives.

Nothing here calls into ``kernels``, ``ddp`` or ``policy``; only plain
numpy linear algebra is shared.
"""
import itertools
from dataclasses import dataclass

import numpy as np


class OracleError(RuntimeError):
    pass


@dataclass
class RiccatiSolution:
    P: np.ndarray      # (T+1, n, n)
    K: np.ndarray      # (T, m, n), u* = -K x
    x: np.ndarray      # (T+1, n)
    u: np.ndarray      # (T, m)
    cost: float


def riccati_solve(A, B, Q, R, Qf, T, x0):
    """Finite-horizon discrete LQR for 1/2 sum x'Qx + u'Ru + 1/2 x_T'Qf x_T."""
    A, B, Q, R, Qf = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R, Qf))
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise OracleError("R must be positive definite") from exc
    n, m = B.shape
    P = np.zeros((T + 1, n, n))
    K = np.zeros((T, m, n))
    P[T] = Qf
    for t in range(T - 1, -1, -1):
        Pn = P[t + 1]
        S = R + B.T @ Pn @ B
        K[t] = np.linalg.solve(S, B.T @ Pn @ A)
        Pt = Q + A.T @ Pn @ A - A.T @ Pn @ B @ K[t]
        P[t] = 0.5 * (Pt + Pt.T)
    x = np.zeros((T + 1, n))
    u = np.zeros((T, m))
    x[0] = x0
    cost = 0.0
    for t in range(T):
        u[t] = -K[t] @ x[t]
        cost += 0.5 * (x[t] @ Q @ x[t] + u[t] @ R @ u[t])
        x[t + 1] = A @ x[t] + B @ u[t]
    cost += 0.5 * x[T] @ Qf @ x[T]
    return RiccatiSolution(P, K, x, u, float(cost))


def lq_matrices(ocp):
    """(A, B, Q, R, Qf) of a linear ocp with goal 0."""
    spec, w = ocp.spec, ocp.weights
    if spec.kind != "lqr":
        raise OracleError("LQ oracle needs a linear system")
    Q = w.w_p + w.w_x
    return spec.A, spec.B, Q, w.w_u, w.terminal * Q


def dense_qp(ocp, beta):
    """Condensed QP 1/2 u'Hu + f'u + c of a linear ocp over stacked controls."""
    A, B, _, R, _ = lq_matrices(ocp)
    w = ocp.weights
    T, n, m = ocp.T, A.shape[0], B.shape[1]
    Phi = np.zeros((T, n, n))     # x_{t+1} = Phi_t x0 + sum_s G[t, s] u_s
    G = np.zeros((T, n, T * m))
    Ak = np.eye(n)
    for t in range(T):
        Ak = A @ Ak
        Phi[t] = Ak
        for s in range(t + 1):
            G[t, :, s * m:(s + 1) * m] = np.linalg.matrix_power(A, t - s) @ B
    H = np.kron(np.eye(T), R)
    f = np.zeros(T * m)
    x0 = np.asarray(beta.x0, dtype=float)
    g = np.asarray(beta.goal, dtype=float)
    c = 0.5 * (x0 - g) @ w.w_p @ (x0 - g) + 0.5 * x0 @ w.w_x @ x0
    for t in range(T):
        s = w.terminal if t == T - 1 else 1.0
        Qt = s * (w.w_p + w.w_x)
        qt = -s * (w.w_p @ g)
        free = Phi[t] @ x0
        H += G[t].T @ Qt @ G[t]
        f += G[t].T @ (Qt @ free + qt)
        c += 0.5 * free @ Qt @ free + qt @ free + 0.5 * s * g @ w.w_p @ g
    return 0.5 * (H + H.T), f, c


def direct_solve_box(ocp, beta, bounds=None, tol=1e-9, max_iter=200000):
    """Accelerated projected gradient on the condensed QP; returns u of shape (T, m)."""
    H, f, _ = dense_qp(ocp, beta)
    m = ocp.spec.n_u
    lo, hi = bounds if bounds is not None else (ocp.spec.u_min, ocp.spec.u_max)
    lo = np.tile(np.asarray(lo, dtype=float), ocp.T)
    hi = np.tile(np.asarray(hi, dtype=float), ocp.T)
    L = np.linalg.eigvalsh(H)[-1]
    u = np.clip(np.zeros(H.shape[0]), lo, hi)
    y = u.copy()
    tk = 1.0
    for _ in range(max_iter):
        grad = H @ y + f
        un = np.clip(y - grad / L, lo, hi)
        gm = L * np.max(np.abs(u - np.clip(u - (H @ u + f) / L, lo, hi)))
        if gm < tol:
            return u.reshape(ocp.T, m)
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        y = un + (tk - 1.0) / tn * (un - u)
        # restart on non-monotone progress
        if (un - u) @ (H @ un + f - (H @ u + f)) < 0 or \
                0.5 * un @ H @ un + f @ un > 0.5 * u @ H @ u + f @ u:
            y = un.copy()
            tn = 1.0
        u, tk = un, tn
    raise OracleError("projected gradient did not reach the requested tolerance")


def kkt_residual(H, f, u, lo, hi):
    """Max violation of the box-QP optimality conditions at u."""
    g = H @ u + f
    r = np.where(u <= lo, np.minimum(g, 0.0), np.where(u >= hi, np.maximum(g, 0.0), g))
    infeas = np.maximum(lo - u, 0.0) + np.maximum(u - hi, 0.0)
    return float(np.max(np.abs(r)) + np.max(infeas))


def finite_diff(fn, point, scheme="central", h=1e-5):
    """Finite-difference derivative of fn at point.

    Step per coordinate is ``h * max(1, |x_i|)``. The result has shape
    ``shape(fn(point)) + shape(point)``.
    """
    x0 = np.asarray(point, dtype=float)
    f0 = np.asarray(fn(x0.copy()), dtype=float)
    out = np.zeros(f0.shape + x0.shape)
    flat = x0.ravel()
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xp[i] += step
        fp = np.asarray(fn(xp.reshape(x0.shape)), dtype=float)
        if scheme == "central":
            xm = flat.copy()
            xm[i] -= step
            fm = np.asarray(fn(xm.reshape(x0.shape)), dtype=float)
            d = (fp - fm) / (2.0 * step)
        elif scheme == "forward":
            d = (fp - f0) / step
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        out[(...,) + np.unravel_index(i, x0.shape)] = d
    return out


def boxqp_enumerate(H, g, lo, hi):
    """Exact box-QP minimiser by trying every lower/free/upper pattern."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    if n > 12:
        raise OracleError("enumeration is limited to 12 dimensions")
    best, best_val = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        x = np.zeros(n)
        pat = np.array(pattern)
        fixed_lo, fixed_hi, free = pat == 0, pat == 2, pat == 1
        if np.any(~np.isfinite(lo[fixed_lo])) or np.any(~np.isfinite(hi[fixed_hi])):
            continue
        x[fixed_lo] = lo[fixed_lo]
        x[fixed_hi] = hi[fixed_hi]
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ x[~free])
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            continue
        val = 0.5 * x @ H @ x + g @ x
        if val < best_val:
            best, best_val = x, val
    return best
