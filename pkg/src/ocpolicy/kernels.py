"""Hot loops: dynamics, rollouts, box-QP and the DDP backward sweep.

Every function here is written so it runs both under ``numba.njit`` and as
plain numpy code (see ``_jit``). Shapes follow the convention

    X: (T+1, nx)   U: (T, nu)   k: (T, nu)   K: (T, nu, nx)

and gains act as ``du = k + K dx``.
"""
import numpy as np

from ._jit import kernel

LINEAR = 0
PENDULUM = 1
DOUBLE_PENDULUM = 2

# parameter vector layout per system kind
#   LINEAR:          [dt]                      (A, B carried separately)
#   PENDULUM:        [m, l, g, damping, dt]
#   DOUBLE_PENDULUM: [m1, m2, l1, l2, g, damping, dt]


@kernel
def _dp_accel(p, q1, q2, v1, v2, tau1, tau2):
    m1, m2, l1, l2, g, damp = p[0], p[1], p[2], p[3], p[4], p[5]
    c2 = np.cos(q2)
    s2 = np.sin(q2)
    h0 = m2 * l1 * l2
    d = m2 * l2 * l2
    m11 = (m1 + m2) * l1 * l1 + d + 2.0 * h0 * c2
    m12 = d + h0 * c2
    m22 = d
    s12 = np.sin(q1 + q2)
    g1 = (m1 + m2) * g * l1 * np.sin(q1) + m2 * g * l2 * s12
    g2 = m2 * g * l2 * s12
    cor1 = -h0 * s2 * (2.0 * v1 * v2 + v2 * v2)
    cor2 = h0 * s2 * v1 * v1
    r1 = tau1 - damp * v1 - cor1 - g1
    r2 = tau2 - damp * v2 - cor2 - g2
    det = m11 * m22 - m12 * m12
    a1 = (m22 * r1 - m12 * r2) / det
    a2 = (-m12 * r1 + m11 * r2) / det
    return a1, a2, m11, m12, m22, det


@kernel
def step_into(kind, p, A, B, x, u, out):
    if kind == LINEAR:
        out[:] = A @ x + B @ u
    elif kind == PENDULUM:
        m, l, g, damp, dt = p[0], p[1], p[2], p[3], p[4]
        acc = (u[0] - damp * x[1]) / (m * l * l) - g / l * np.sin(x[0])
        w = x[1] + dt * acc
        out[0] = x[0] + dt * w
        out[1] = w
    else:
        dt = p[6]
        a1, a2, _, _, _, _ = _dp_accel(p, x[0], x[1], x[2], x[3], u[0], u[1])
        w1 = x[2] + dt * a1
        w2 = x[3] + dt * a2
        out[0] = x[0] + dt * w1
        out[1] = x[1] + dt * w2
        out[2] = w1
        out[3] = w2


@kernel
def derivs_into(kind, p, A, B, x, u, fx, fu):
    """Exact Jacobians of ``step_into`` (semi-implicit Euler)."""
    if kind == LINEAR:
        fx[:, :] = A
        fu[:, :] = B
    elif kind == PENDULUM:
        m, l, g, damp, dt = p[0], p[1], p[2], p[3], p[4]
        inertia = m * l * l
        dw_dth = -dt * g / l * np.cos(x[0])
        dw_dw = 1.0 - dt * damp / inertia
        dw_du = dt / inertia
        fx[1, 0] = dw_dth
        fx[1, 1] = dw_dw
        fu[1, 0] = dw_du
        fx[0, 0] = 1.0 + dt * dw_dth
        fx[0, 1] = dt * dw_dw
        fu[0, 0] = dt * dw_du
    else:
        m1, m2, l1, l2, g, damp, dt = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
        q1, q2, v1, v2 = x[0], x[1], x[2], x[3]
        a1, a2, m11, m12, m22, det = _dp_accel(p, q1, q2, v1, v2, u[0], u[1])
        i11 = m22 / det
        i12 = -m12 / det
        i22 = m11 / det
        c2 = np.cos(q2)
        s2 = np.sin(q2)
        h0 = m2 * l1 * l2
        c12 = np.cos(q1 + q2)
        # d(rhs)/dq1 = -dG/dq1
        r_q1_1 = -((m1 + m2) * g * l1 * np.cos(q1) + m2 * g * l2 * c12)
        r_q1_2 = -(m2 * g * l2 * c12)
        # d(rhs)/dq2 - dM/dq2 @ acc
        dm11 = -2.0 * h0 * s2
        dm12 = -h0 * s2
        r_q2_1 = (h0 * c2 * (2.0 * v1 * v2 + v2 * v2) - m2 * g * l2 * c12
                  - (dm11 * a1 + dm12 * a2))
        r_q2_2 = -h0 * c2 * v1 * v1 - m2 * g * l2 * c12 - dm12 * a1
        # d(rhs)/dv = -damp I - dC/dv
        r_v1_1 = -damp + 2.0 * h0 * s2 * v2
        r_v1_2 = -2.0 * h0 * s2 * v1
        r_v2_1 = 2.0 * h0 * s2 * (v1 + v2)
        r_v2_2 = -damp
        da = np.empty((2, 4))
        cols1 = (r_q1_1, r_q2_1, r_v1_1, r_v2_1)
        cols2 = (r_q1_2, r_q2_2, r_v1_2, r_v2_2)
        for j in range(4):
            da[0, j] = i11 * cols1[j] + i12 * cols2[j]
            da[1, j] = i12 * cols1[j] + i22 * cols2[j]
        for i in range(2):
            for j in range(4):
                dw = dt * da[i, j]
                if j == i + 2:
                    dw += 1.0
                fx[2 + i, j] = dw
                fx[i, j] = (1.0 if j == i else 0.0) + dt * dw
        fu[2, 0] = dt * i11
        fu[2, 1] = dt * i12
        fu[3, 0] = dt * i12
        fu[3, 1] = dt * i22
        for i in range(2):
            for j in range(2):
                fu[i, j] = dt * fu[2 + i, j]


@kernel
def _all_finite(x):
    for i in range(x.shape[0]):
        if not np.isfinite(x[i]):
            return False
    return True


@kernel
def rollout(kind, p, A, B, x0, U, lo, hi, clamp):
    """Open-loop rollout. Returns (X, U_applied, diverged_at or -1)."""
    T, nu = U.shape
    X = np.zeros((T + 1, x0.shape[0]))
    Uc = U.copy()
    X[0] = x0
    for t in range(T):
        if clamp:
            for j in range(nu):
                Uc[t, j] = min(max(Uc[t, j], lo[j]), hi[j])
        step_into(kind, p, A, B, X[t], Uc[t], X[t + 1])
        if not _all_finite(X[t + 1]):
            return X, Uc, t
    return X, Uc, -1


@kernel
def forward_pass(kind, p, A, B, xbar, ubar, k, K, alpha, lo, hi, clamp):
    """u_t = clamp(ubar_t + alpha k_t + K_t (x_t - xbar_t)) rolled through f."""
    T, nu = ubar.shape
    X = np.zeros(xbar.shape)
    U = np.zeros(ubar.shape)
    X[0] = xbar[0]
    for t in range(T):
        du = K[t] @ (X[t] - xbar[t])
        for j in range(nu):
            v = ubar[t, j] + alpha * k[t, j] + du[j]
            if clamp:
                v = min(max(v, lo[j]), hi[j])
            U[t, j] = v
        step_into(kind, p, A, B, X[t], U[t], X[t + 1])
        if not _all_finite(X[t + 1]):
            return X, U, t
    return X, U, -1


@kernel
def linearize(kind, p, A, B, X, U):
    T, nu = U.shape
    nx = X.shape[1]
    fx = np.zeros((T, nx, nx))
    fu = np.zeros((T, nx, nu))
    for t in range(T):
        derivs_into(kind, p, A, B, X[t], U[t], fx[t], fu[t])
    return fx, fu


@kernel
def chol_factor(H, L):
    """Lower Cholesky factor of a small SPD matrix; False if not PD."""
    n = H.shape[0]
    L[:, :] = 0.0
    for j in range(n):
        s = H[j, j]
        for q in range(j):
            s -= L[j, q] * L[j, q]
        if not (s > 0.0) or not np.isfinite(s):
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = H[i, j]
            for q in range(j):
                s -= L[i, q] * L[j, q]
            L[i, j] = s / L[j, j]
    return True


@kernel
def chol_solve(L, b):
    n = b.shape[0]
    y = np.zeros(n)
    for i in range(n):
        s = b[i]
        for q in range(i):
            s -= L[i, q] * y[q]
        y[i] = s / L[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for q in range(i + 1, n):
            s -= L[q, i] * x[q]
        x[i] = s / L[i, i]
    return x


@kernel
def _clamped_set(x, g, lo, hi):
    n = x.shape[0]
    free = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if (x[i] <= lo[i] and g[i] > 0.0) or (x[i] >= hi[i] and g[i] < 0.0):
            free[i] = False
    return free


@kernel
def _sub(H, idx):
    nf = idx.shape[0]
    S = np.zeros((nf, nf))
    for a in range(nf):
        for b in range(nf):
            S[a, b] = H[idx[a], idx[b]]
    return S


@kernel
def boxqp(H, q, lo, hi, x0, maxiter, tol):
    """Projected-Newton solve of min 1/2 x'Hx + q'x  s.t. lo <= x <= hi.

    Returns (x, free, status) with status 0 converged, 1 iteration cap or
    stalled line search, -1 Hessian not positive definite on the free set.
    """
    n = q.shape[0]
    x = np.empty(n)
    for i in range(n):
        x[i] = min(max(x0[i], lo[i]), hi[i])
    gscale = 1.0
    for i in range(n):
        gscale = max(gscale, abs(q[i]))
    status = 1
    for _ in range(maxiter):
        g = q + H @ x
        free = _clamped_set(x, g, lo, hi)
        idx = np.nonzero(free)[0]
        nf = idx.shape[0]
        if nf == 0:
            status = 0
            break
        gmax = 0.0
        for a in range(nf):
            gmax = max(gmax, abs(g[idx[a]]))
        if gmax <= tol * gscale:
            status = 0
            break
        Hff = _sub(H, idx)
        L = np.zeros((nf, nf))
        if not chol_factor(Hff, L):
            return x, free, -1
        gf = np.empty(nf)
        for a in range(nf):
            gf[a] = g[idx[a]]
        dxf = chol_solve(L, -gf)
        dx = np.zeros(n)
        for a in range(nf):
            dx[idx[a]] = dxf[a]
        f0 = 0.5 * x @ (H @ x) + q @ x
        alpha = 1.0
        accepted = False
        xn = np.empty(n)
        while alpha > 1e-12:
            for i in range(n):
                xn[i] = min(max(x[i] + alpha * dx[i], lo[i]), hi[i])
            fn = 0.5 * xn @ (H @ xn) + q @ xn
            if f0 - fn >= 0.1 * (g @ (x - xn)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        moved = 0.0
        for i in range(n):
            moved = max(moved, abs(xn[i] - x[i]))
        x[:] = xn
        if moved == 0.0:
            break
    g = q + H @ x
    free = _clamped_set(x, g, lo, hi)
    return x, free, status


@kernel
def backward_pass(fx, fu, lx, lu, lxx, luu, lux, lo, hi, reg, bounded, qp_maxiter, qp_tol):
    """Gauss-Newton DDP sweep with box-constrained control steps.

    ``lx``/``lxx`` carry T+1 entries (terminal last); ``lo``/``hi`` are the
    per-step bounds on the control *increment*. Returns
    (k, K, dV1, dV2, failed_at) where failed_at is -1 on success.
    """
    T, nx, nu = fu.shape[0], fu.shape[1], fu.shape[2]
    k = np.zeros((T, nu))
    K = np.zeros((T, nu, nx))
    Vx = lx[T].copy()
    Vxx = lxx[T].copy()
    dV1 = 0.0
    dV2 = 0.0
    L = np.zeros((nu, nu))
    for t in range(T - 1, -1, -1):
        A = fx[t]
        B = fu[t]
        VA = Vxx @ A
        VB = Vxx @ B
        Qx = lx[t] + A.T @ Vx
        Qu = lu[t] + B.T @ Vx
        Qxx = lxx[t] + A.T @ VA
        Quu = luu[t] + B.T @ VB
        Qux = lux[t] + B.T @ VA
        Qreg = Quu.copy()
        for j in range(nu):
            Qreg[j, j] += reg
        kt = np.zeros(nu)
        Kt = np.zeros((nu, nx))
        if bounded:
            kt, free, status = boxqp(Qreg, Qu, lo[t], hi[t], np.zeros(nu), qp_maxiter, qp_tol)
            if status < 0:
                return k, K, dV1, dV2, t
            idx = np.nonzero(free)[0]
            nf = idx.shape[0]
            if nf > 0:
                Hff = _sub(Qreg, idx)
                Lf = np.zeros((nf, nf))
                if not chol_factor(Hff, Lf):
                    return k, K, dV1, dV2, t
                rhs = np.empty(nf)
                for c in range(nx):
                    for a in range(nf):
                        rhs[a] = -Qux[idx[a], c]
                    col = chol_solve(Lf, rhs)
                    for a in range(nf):
                        Kt[idx[a], c] = col[a]
        else:
            if not chol_factor(Qreg, L):
                return k, K, dV1, dV2, t
            kt = chol_solve(L, -Qu)
            rhs = np.empty(nu)
            for c in range(nx):
                for a in range(nu):
                    rhs[a] = -Qux[a, c]
                col = chol_solve(L, rhs)
                for a in range(nu):
                    Kt[a, c] = col[a]
        k[t] = kt
        K[t] = Kt
        Quuk = Quu @ kt
        dV1 += kt @ Qu
        dV2 += kt @ Quuk
        Vx = Qx + Kt.T @ Quuk + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ (Quu @ Kt) + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k, K, dV1, dV2, -1


@kernel
def step_batch(kind, p, A, B, X, U, out):
    for i in range(X.shape[0]):
        step_into(kind, p, A, B, X[i], U[i], out[i])
