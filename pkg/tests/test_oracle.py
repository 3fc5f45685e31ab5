import numpy as np
import pytest

from ocpolicy import envs, oracle
from ocpolicy.ocp import Ocp, ProblemParams


def test_riccati_scalar_one_step():
    # minimise 1/2 u^2 + 1/2 (x0 + u)^2 from x0 = 1: u* = -1/2
    sol = oracle.riccati_solve([[1.0]], [[1.0]], [[0.0]], [[1.0]], [[1.0]], 1, [1.0])
    assert np.isclose(sol.u[0, 0], -0.5) and np.isclose(sol.cost, 0.25)


def test_riccati_rejects_singular_R():
    with pytest.raises(oracle.OracleError):
        oracle.riccati_solve(np.eye(2), np.ones((2, 1)), np.eye(2), [[0.0]], np.eye(2), 5, np.ones(2))


def test_riccati_matches_dense_qp():
    spec = envs.double_integrator()
    ocp = Ocp(spec, envs.weights_from_diag(spec, [1.0, 0.5], 0.1, [0.2, 0.0]), 12)
    beta = ProblemParams(np.array([1.0, -0.5]), np.zeros(2))
    sol = oracle.riccati_solve(*oracle.lq_matrices(ocp), ocp.T, beta.x0)
    H, f, c = oracle.dense_qp(ocp, beta)
    u = np.linalg.solve(H, -f)
    assert np.max(np.abs(u - sol.u.ravel())) < 1e-10
    assert np.isclose(0.5 * u @ H @ u + f @ u + c, sol.cost)


def test_dense_qp_value_matches_rollout_cost():
    spec = envs.double_integrator()
    ocp = Ocp(spec, envs.weights_from_diag(spec, 1.0, 0.1, 0.3), 8)
    beta = ProblemParams(np.array([0.5, 1.0]), np.array([0.2, -0.1]))
    H, f, c = oracle.dense_qp(ocp, beta)
    u = np.random.default_rng(0).normal(size=8)
    from ocpolicy.ocp import eval_cost
    assert np.isclose(0.5 * u @ H @ u + f @ u + c, eval_cost(ocp, beta, u), rtol=1e-12)


def test_direct_box_solution_is_kkt():
    spec = envs.double_integrator()
    ocp = Ocp(spec, envs.weights_from_diag(spec, 1.0, 0.1, 0.0), 30)
    beta = ProblemParams(np.array([3.0, 1.0]), np.zeros(2))
    u = oracle.direct_solve_box(ocp, beta)
    H, f, _ = oracle.dense_qp(ocp, beta)
    lo, hi = np.full(30, -1.0), np.full(30, 1.0)
    assert oracle.kkt_residual(H, f, u.ravel(), lo, hi) < 1e-7
    assert np.any(np.abs(u) == 1.0)


def test_finite_diff_shapes_and_accuracy():
    fn = lambda x: np.array([np.sin(x[0]) * x[1], x[0] ** 2])
    J = oracle.finite_diff(fn, np.array([0.3, 2.0]))
    assert J.shape == (2, 2)
    assert np.allclose(J, [[np.cos(0.3) * 2.0, np.sin(0.3)], [0.6, 0.0]], atol=1e-9)
    Jf = oracle.finite_diff(fn, np.array([0.3, 2.0]), scheme="forward", h=1e-7)
    assert np.allclose(Jf, J, atol=1e-6)
    with pytest.raises(ValueError):
        oracle.finite_diff(fn, np.zeros(2), scheme="backward")


def test_boxqp_enumerate_known_solution():
    H = np.eye(2)
    g = np.array([-3.0, 0.5])
    x = oracle.boxqp_enumerate(H, g, np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    assert np.allclose(x, [1.0, -0.5])
    with pytest.raises(oracle.OracleError):
        oracle.boxqp_enumerate(np.eye(13), np.zeros(13), -np.ones(13), np.ones(13))


def test_oracle_is_independent_of_solver_kernels():
    import ast
    import inspect
    tree = ast.parse(inspect.getsource(oracle))
    names = {a.name for n in ast.walk(tree) if isinstance(n, (ast.Import, ast.ImportFrom))
             for a in n.names}
    mods = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom)}
    assert not (names | mods) & {"kernels", "ddp", "policy"}
