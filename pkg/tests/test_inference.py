import numpy as np
import pytest
from scipy.special import expit

import htlgmm as H
from htlgmm.errors import EmptySupport, InvalidPValue, SingleClass
from htlgmm.inference import bh_adjust, sandwich_sigma, wald_inference
from htlgmm.moments import ExternalSummary, ThetaTilde
from htlgmm.weighting import WeightSpec, build_weight, estimate_variance

from conftest import make_linear_instance


def test_reduces_to_robust_ols_sandwich():
    # low-dimensional linear case, no shared covariates, optimal weight:
    # the sandwich collapses to the heteroskedasticity-robust OLS one
    rng = np.random.default_rng(0)
    n, p = 400, 3
    X = rng.standard_normal((n, p))
    noise = (0.5 + 0.5 * X[:, 0] ** 2) * rng.standard_normal(n)  # heteroskedastic
    y = X @ np.array([1.0, -0.5, 0.25]) + noise
    data = H.Dataset.from_blocks(y, W=X)
    ext = ExternalSummary(np.zeros(0), np.zeros((0, 0)), n_ext=10)
    tt = ThetaTilde(np.zeros(0), np.zeros(0))
    beta_hat = np.linalg.lstsq(X, y, rcond=None)[0]
    blocks = estimate_variance(data, "linear", beta_hat, tt, ext, np.zeros((0, 0)))
    weight = build_weight(blocks, WeightSpec("optimal"))
    sigma = sandwich_sigma(data, "linear", beta_hat, np.arange(p), tt, weight, blocks)

    resid = y - X @ beta_hat
    bread = np.linalg.inv(X.T @ X / n)
    meat = (X * resid[:, None]).T @ (X * resid[:, None]) / n
    oracle = bread @ meat @ bread  # asymptotic robust-OLS covariance
    assert np.max(np.abs(sigma - oracle)) / np.max(np.abs(oracle)) < 1e-8


def test_scaling_outcome_scales_standard_errors():
    data, _, _ = make_linear_instance(5, n=150, p_z=2, p_w=2)
    ext = ExternalSummary(np.array([0.4, -0.2]), np.eye(2) / 2000, n_ext=2000)

    def fit_se(y_mult):
        d = H.Dataset(y=data.y * y_mult, X=data.X, a_idx=data.a_idx,
                      z_idx=data.z_idx, w_idx=data.w_idx)
        red = H.fit_reduced_main(d, "linear")
        tt = ThetaTilde(red.theta[:0], red.theta[0:2] * 0 + ext.theta_z * y_mult)
        beta_hat = np.linalg.lstsq(d.X, d.y, rcond=None)[0]
        ext_scaled = ExternalSummary(ext.theta_z * y_mult, ext.cov_theta_z * y_mult**2, ext.n_ext)
        blocks = estimate_variance(d, "linear", beta_hat, tt, ext_scaled, np.zeros((0, 0)))
        weight = build_weight(blocks, WeightSpec("optimal"))
        sigma = sandwich_sigma(d, "linear", beta_hat, np.arange(d.p_x), tt, weight, blocks)
        return wald_inference(beta_hat, sigma, d.n).se

    se1 = fit_se(1.0)
    se2 = fit_se(2.0)
    assert np.max(np.abs(se2 / se1 - 2.0)) < 1e-8


def test_empty_support_raises():
    data, _, _ = make_linear_instance(6, n=60, p_z=2, p_w=2)
    ext = ExternalSummary(np.array([0.1, 0.1]), np.eye(2) / 500, n_ext=500)
    red = H.fit_reduced_main(data, "linear")
    tt = ThetaTilde(red.theta[:0], ext.theta_z)
    beta0 = np.zeros(data.p_x)
    blocks = estimate_variance(data, "linear", beta0, tt, ext, np.zeros((0, 0)))
    weight = build_weight(blocks, WeightSpec("optimal"))
    with pytest.raises(EmptySupport):
        sandwich_sigma(data, "linear", beta0, np.zeros(0, dtype=int), tt, weight, blocks)


def test_wald_zero_estimate_gives_p_one():
    rep = wald_inference(np.array([0.0, 1.0]), np.diag([1.0, 1.0]), n=100)
    assert rep.p_values[0] == 1.0
    assert rep.p_values[1] < 1.0


def test_wald_interval_width_scales_with_se():
    sigma1 = np.diag([1.0])
    sigma4 = np.diag([4.0])
    r1 = wald_inference(np.array([0.5]), sigma1, n=50)
    r2 = wald_inference(np.array([0.5]), sigma4, n=50)
    w1 = r1.ci_upper[0] - r1.ci_lower[0]
    w2 = r2.ci_upper[0] - r2.ci_lower[0]
    assert w2 == pytest.approx(2.0 * w1, rel=1e-12)


def test_normal_quantile_value():
    rep = wald_inference(np.array([1.0]), np.diag([1.0]), n=1, level=0.95)
    halfwidth = rep.ci_upper[0] - 1.0
    assert halfwidth == pytest.approx(1.959964, abs=5e-7)


def test_bh_hand_case():
    q, rejected = bh_adjust(np.array([0.01, 0.04, 0.03, 0.005]), 0.05)
    assert rejected.all()
    assert np.allclose(q, [0.02, 0.04, 0.04, 0.02])


def test_bh_single_p_equals_itself():
    q, rej = bh_adjust(np.array([0.03]), 0.05)
    assert q[0] == pytest.approx(0.03)
    assert rej[0]


def test_bh_all_ones_rejects_nothing():
    q, rej = bh_adjust(np.ones(7), 0.05)
    assert not rej.any()
    assert np.allclose(q, 1.0)


def test_bh_invalid_pvalue():
    with pytest.raises(InvalidPValue):
        bh_adjust(np.array([0.5, 1.2]), 0.05)
    with pytest.raises(InvalidPValue):
        bh_adjust(np.array([0.5, np.nan]), 0.05)


def test_bh_permutation_invariant_and_monotone():
    rng = np.random.default_rng(3)
    p = rng.random(25)
    q, rej = bh_adjust(p, 0.1)
    perm = rng.permutation(25)
    q_p, rej_p = bh_adjust(p[perm], 0.1)
    assert np.allclose(q_p, q[perm])
    assert set(np.flatnonzero(rej_p)) == set(np.flatnonzero(rej[perm]))
    order = np.argsort(p)
    assert np.all(np.diff(q[order]) >= -1e-15)


def test_sigma_diagonal_to_se_contract():
    sigma = np.diag([4.0, 9.0])
    rep = wald_inference(np.array([1.0, 2.0]), sigma, n=100)
    assert np.allclose(rep.se, [0.2, 0.3])


# ---------------------------------------------------------------------------
# metrics


def test_metrics_perfect_scores():
    assert H.r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert H.auc_score([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0


def test_auc_matches_all_pairs_oracle():
    rng = np.random.default_rng(4)
    scores = rng.standard_normal(500)
    scores[:50] = np.round(scores[:50], 1)  # force some ties
    labels = (rng.random(500) < 0.4).astype(float)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for s1 in pos:
        wins += np.sum(s1 > neg) + 0.5 * np.sum(s1 == neg)
    oracle = wins / (len(pos) * len(neg))
    assert abs(H.auc_score(scores, labels) - oracle) < 1e-12


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(5)
    scores = rng.standard_normal(10_000)
    labels = (rng.random(10_000) < 0.5).astype(float)
    assert abs(H.auc_score(scores, labels) - 0.5) < 0.02


def test_auc_single_class_raises():
    with pytest.raises(SingleClass):
        H.auc_score([0.1, 0.5], [1, 1])


def test_eval_metrics_dispatch():
    assert H.eval_metrics([1.0, 2.0], [1.0, 2.0], "linear") == 1.0
    assert H.eval_metrics([0.9, 0.1], [1, 0], "logistic") == 1.0


# ---------------------------------------------------------------------------
# desk-scale normality of the studentized estimates (full run: acceptance)


def test_sandwich_studentization_smoke():
    bz = np.array([0.6, -0.5])
    bw = np.array([0.7, -0.4, 0.0])
    icpt = -0.5
    p = 5
    cov = np.eye(p)
    cov[0, 2] = cov[2, 0] = 0.3
    root = np.linalg.cholesky(cov)
    beta_star = np.concatenate([[icpt], bz, bw])
    target = np.array([1, 2, 3, 4])  # nonzero coordinates (skip intercept handled below)

    zscores = []
    chosen = (0.03, 0.0)
    for rep in range(150):
        rng = np.random.default_rng([600, rep])
        n = 2000
        X = rng.standard_normal((n, p)) @ root.T
        y = (rng.random(n) < expit(icpt + X[:, :2] @ bz + X[:, 2:] @ bw)).astype(float)
        data = H.Dataset.from_blocks(y, A=np.ones((n, 1)), Z=X[:, :2], W=X[:, 2:])
        XE = rng.standard_normal((10 * n, p)) @ root.T
        yE = (rng.random(10 * n) < expit(icpt + XE[:, :2] @ bz + XE[:, 2:] @ bw)).astype(float)
        ef = H.fit_glm(yE, np.column_stack([np.ones(10 * n), XE[:, :2]]), "logistic")
        ext = ExternalSummary(ef.theta[1:], ef.cov_sandwich[1:, 1:], 10 * n)

        red = H.fit_reduced_main(data, "logistic")
        tt = ThetaTilde(red.theta[:1], ext.theta_z)
        beta0 = H.fit_glm(data.y, data.X, "logistic").theta
        v_a = n * red.cov_sandwich[:1, :1]
        blocks = estimate_variance(data, "logistic", beta0, tt, ext, v_a)
        weight = build_weight(blocks, WeightSpec("ms", alpha=chosen[0]))
        ps = H.build_pseudo(data, "logistic", beta0, tt, weight)
        pen = H.PenaltySpec(
            "adaptive_lasso",
            weights=H.adaptive_weights(beta0, 1.0, "glm"),
            unpenalized=(0,),
        )
        lam = 0.05 * np.sqrt(n)
        beta_hat = H.coordinate_descent(ps.x_ps, ps.y_ps, pen, lam)
        support = np.flatnonzero(beta_hat != 0.0)
        if not set(target) <= set(support):
            continue
        blocks_f = estimate_variance(data, "logistic", beta_hat, tt, ext, v_a)
        sigma = sandwich_sigma(data, "logistic", beta_hat, support, tt, weight, blocks_f)
        se = np.sqrt(np.diag(sigma) / n)
        pos = {j: k for k, j in enumerate(support)}
        for j in target:
            k = pos[j]
            zscores.append((beta_hat[j] - beta_star[j]) / se[k])
    zscores = np.asarray(zscores)
    assert len(zscores) > 400
    assert 0.8 <= zscores.std() <= 1.2
    assert abs(zscores.mean()) < 0.15
