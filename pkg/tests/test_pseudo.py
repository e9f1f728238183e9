import numpy as np
import pytest

import htlgmm as H
from htlgmm.moments import ExternalSummary, ThetaTilde
from htlgmm.weighting import WeightMatrix, WeightSpec, build_weight, estimate_variance, matrix_sqrt_psd

from conftest import make_linear_instance, make_logistic_instance


def _pd_weight(dim, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    c = a @ a.T + dim * np.eye(dim)
    return WeightMatrix(c=c, c_half=matrix_sqrt_psd(c))


def _state(data, family, seed=0):
    rng = np.random.default_rng(seed)
    theta = 0.3 * rng.standard_normal(data.p_a + data.p_z)
    tt = ThetaTilde(theta[: data.p_a], theta[data.p_a :])
    beta0 = 0.3 * rng.standard_normal(data.p_x)
    weight = _pd_weight(data.p_x + data.p_z, seed + 1)
    return beta0, tt, weight


def test_linear_exactness_constant_gap():
    data, _, _ = make_linear_instance(0, n=80, p_z=2, p_w=4)
    beta0, tt, weight = _state(data, "linear", seed=4)
    ps = H.build_pseudo(data, "linear", beta0, tt, weight)
    rng = np.random.default_rng(10)
    gaps = []
    for _ in range(10):
        b = rng.standard_normal(data.p_x)
        surrogate = 0.5 * np.sum((ps.y_ps - ps.x_ps @ b) ** 2)
        exact = H.gmm_objective(data, "linear", b, tt, weight)
        gaps.append(surrogate - exact)
    spread = max(gaps) - min(gaps)
    assert spread <= 1e-8 * max(1.0, abs(np.mean(gaps)) + abs(exact))
    # for the linear family the surrogate matches the objective outright
    assert abs(np.mean(gaps)) < 1e-8 * max(1.0, exact)
    assert abs(ps.objective_offset) < 1e-8


def test_explicit_linear_forms():
    data, _, _ = make_linear_instance(2, n=50, p_z=2, p_w=3)
    beta0, tt, weight = _state(data, "linear", seed=6)
    ps = H.build_pseudo(data, "linear", beta0, tt, weight)
    n = data.n
    stack = np.hstack([data.X, data.Z])
    x_expected = weight.c_half @ stack.T @ data.X / np.sqrt(n)
    y_expected = weight.c_half @ np.concatenate([
        data.X.T @ data.y,
        data.Z.T @ (data.XR @ tt.stacked),
    ]) / np.sqrt(n)
    assert np.max(np.abs(ps.x_ps - x_expected)) < 1e-10
    assert np.max(np.abs(ps.y_ps - y_expected)) < 1e-10
    # beta-independence of the linear pseudo problem
    ps2 = H.build_pseudo(data, "linear", np.zeros(data.p_x), tt, weight)
    assert np.max(np.abs(ps.x_ps - ps2.x_ps)) < 1e-12
    assert np.max(np.abs(ps.y_ps - ps2.y_ps)) < 1e-12


def test_explicit_logistic_forms():
    from scipy.special import expit

    data, _, _ = make_logistic_instance(3, n=60, p_z=2, p_w=2)
    beta0, tt, weight = _state(data, "logistic", seed=8)
    ps = H.build_pseudo(data, "logistic", beta0, tt, weight)
    n = data.n
    d = expit(data.X @ beta0) * (1 - expit(data.X @ beta0))
    stack = np.hstack([data.X, data.Z])
    dx = data.X * d[:, None]
    x_expected = weight.c_half @ stack.T @ dx / np.sqrt(n)
    inner = stack.T @ (dx @ beta0 - expit(data.X @ beta0))
    inner = inner + np.concatenate([
        data.X.T @ data.y,
        data.Z.T @ expit(data.XR @ tt.stacked),
    ])
    y_expected = weight.c_half @ inner / np.sqrt(n)
    assert np.max(np.abs(ps.x_ps - x_expected)) < 1e-10
    assert np.max(np.abs(ps.y_ps - y_expected)) < 1e-10


def test_ols_collapse_without_calibration_rows():
    # no shared covariates, identity weight, no penalty: the pseudo
    # least-squares minimizer is the OLS solution
    rng = np.random.default_rng(12)
    X = rng.standard_normal((40, 3))
    y = X @ np.array([1.0, -2.0, 0.5]) + rng.standard_normal(40)
    data = H.Dataset.from_blocks(y, W=X)
    weight = WeightMatrix(c=np.eye(3), c_half=np.eye(3))
    tt = ThetaTilde(np.zeros(0), np.zeros(0))
    ps = H.build_pseudo(data, "linear", np.zeros(3), tt, weight)
    beta = np.linalg.lstsq(ps.x_ps, ps.y_ps, rcond=None)[0]
    ols = np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.max(np.abs(beta - ols)) < 1e-10


@pytest.mark.parametrize("family,maker", [
    ("linear", make_linear_instance),
    ("logistic", make_logistic_instance),
])
def test_one_step_tangency(family, maker):
    data, _, _ = maker(9, n=70, p_z=2, p_w=2)
    beta0, tt, weight = _state(data, family, seed=9)
    ps = H.build_pseudo(data, family, beta0, tt, weight)
    me = H.eval_jacobians(data, family, beta0, tt)
    grad_surrogate = ps.x_ps.T @ (ps.x_ps @ beta0 - ps.y_ps)
    grad_exact = data.n * me.jac_beta.T @ (weight.c @ me.u_stacked)
    scale = max(np.max(np.abs(grad_exact)), 1e-12)
    assert np.max(np.abs(grad_surrogate - grad_exact)) / scale < 1e-10
    assert abs(ps.objective_offset) <= 1e-8 * max(1.0, H.gmm_objective(data, family, beta0, tt, weight))


def test_gmm_objective_zero_at_exact_moments():
    rng = np.random.default_rng(20)
    X = rng.integers(-2, 3, size=(30, 4)).astype(float)
    data_beta = np.array([0.5, -0.25, 0.0, 0.0])
    y = X @ data_beta  # exact linear response, no noise
    data = H.Dataset.from_blocks(y, A=X[:, :1], Z=X[:, 1:2], W=X[:, 2:])
    tt = ThetaTilde(data_beta[:1], data_beta[1:2])  # matches beta on [A|Z], beta_W=0
    weight = _pd_weight(5, 21)
    obj = H.gmm_objective(data, "linear", data_beta, tt, weight)
    assert obj == pytest.approx(0.0, abs=1e-20)


def test_objective_invariant_to_root_decomposition():
    data, _, _ = make_linear_instance(22, n=60, p_z=2, p_w=3)
    beta0, tt, weight = _state(data, "linear", seed=22)
    u = np.concatenate([
        H.eval_u1(data, "linear", beta0),
        H.eval_u2(data, "linear", beta0, tt),
    ])
    via_c = 0.5 * data.n * u @ weight.c @ u
    via_half = 0.5 * data.n * np.sum((weight.c_half @ u) ** 2)
    assert via_c == pytest.approx(H.gmm_objective(data, "linear", beta0, tt, weight), rel=1e-12)
    assert abs(via_c - via_half) <= 1e-10 * max(1.0, abs(via_c))


def test_grid_search_locates_pseudo_minimizer():
    # brute-force the weighted moment objective of a two-parameter toy on
    # a fine grid and compare with the pseudo least-squares solution
    rng = np.random.default_rng(30)
    n = 60
    X = rng.standard_normal((n, 2))
    y = X @ np.array([0.8, -0.6]) + 0.3 * rng.standard_normal(n)
    data = H.Dataset.from_blocks(y, Z=X[:, :1], W=X[:, 1:])
    theta = np.array([0.75])
    tt = ThetaTilde(np.zeros(0), theta)
    weight = _pd_weight(3, 31)

    ps = H.build_pseudo(data, "linear", np.zeros(2), tt, weight)
    closed = np.linalg.lstsq(ps.x_ps, ps.y_ps, rcond=None)[0]

    # independent quadratic pieces straight from the moment definitions
    jac = np.vstack([X.T @ X, data.Z.T @ X]) / n
    q = np.concatenate([X.T @ y, data.Z.T @ (data.XR @ theta)]) / n
    G = n * jac.T @ weight.c @ jac
    g = n * jac.T @ weight.c @ q
    grid = np.arange(-2.0, 2.0 + 1e-12, 1e-3)
    best_val = np.inf
    best = None
    for b1 in grid:
        vals = 0.5 * (G[0, 0] * b1**2 + 2 * G[0, 1] * b1 * grid + G[1, 1] * grid**2)
        vals -= b1 * g[0] + grid * g[1]
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = vals[k]
            best = (b1, grid[k])
    assert abs(best[0] - closed[0]) <= 1e-3 + 1e-9
    assert abs(best[1] - closed[1]) <= 1e-3 + 1e-9


def test_pseudo_row_count_is_moment_dimension():
    for n in (30, 300):
        data, _, _ = make_linear_instance(33, n=n, p_z=3, p_w=4)
        beta0, tt, weight = _state(data, "linear", seed=33)
        ps = H.build_pseudo(data, "linear", beta0, tt, weight)
        assert ps.x_ps.shape == (data.p_x + data.p_z, data.p_x)
        assert ps.y_ps.shape == (data.p_x + data.p_z,)


def test_fault_hook_breaks_exactness():
    import htlgmm.pseudo as pseudo_mod

    data, _, _ = make_linear_instance(40, n=50, p_z=2, p_w=2)
    beta0, tt, weight = _state(data, "linear", seed=40)
    try:
        pseudo_mod._FAULT_FLIP_MOMENT_SIGN = True
        ps = H.build_pseudo(data, "linear", beta0, tt, weight)
    finally:
        pseudo_mod._FAULT_FLIP_MOMENT_SIGN = False
    b = np.random.default_rng(41).standard_normal(data.p_x)
    surrogate = 0.5 * np.sum((ps.y_ps - ps.x_ps @ b) ** 2)
    exact = H.gmm_objective(data, "linear", b, tt, weight)
    b2 = np.random.default_rng(42).standard_normal(data.p_x)
    surrogate2 = 0.5 * np.sum((ps.y_ps - ps.x_ps @ b2) ** 2)
    exact2 = H.gmm_objective(data, "linear", b2, tt, weight)
    gap1, gap2 = surrogate - exact, surrogate2 - exact2
    assert abs(gap1 - gap2) > 1e-6  # no longer constant in beta
