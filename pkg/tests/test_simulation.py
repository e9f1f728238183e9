import numpy as np
import pytest
from scipy.special import expit

import htlgmm as H
from htlgmm.errors import ConfigError
from htlgmm.simulation import (
    SimConfig,
    _weighted_auc,
    build_covariance,
    calibrate_effects,
    fit_external_reduced,
    plan_truth,
    rescale_external,
    run_study,
    simulate_dataset,
    standardize_dataset,
    true_beta_columns,
)


def small_config(**kw):
    base = dict(
        family="linear",
        p_z=10,
        p_w=10,
        n=(120,),
        n_nonnull_z=10,
        n_nonnull_w=1,
        n_cross_pairs=1,
        n_replicates=2,
        test_size=4000,
        methods=("htlgmm_ms", "main", "external"),
        cv_folds=4,
        n_lambda=12,
        seed=7,
    )
    base.update(kw)
    return SimConfig(**base)


def test_covariance_structure():
    cfg = small_config()
    plan = plan_truth(cfg)
    sigma, root, repair = build_covariance(cfg, plan)
    # within-block neighbours and next-neighbours
    assert sigma[0, 1] == pytest.approx(0.5)
    assert sigma[0, 2] == pytest.approx(0.25)
    assert sigma[3, 3] == pytest.approx(1.0)
    # the designated coupling carries 0.3; all other z-w entries are zero
    zi, wj = plan.cross_pairs[0]
    col = cfg.p_z + wj
    assert sigma[zi, col] == pytest.approx(0.3)
    cross = sigma[: cfg.p_z, cfg.p_z :].copy()
    cross[zi, wj] = 0.0
    assert np.max(np.abs(cross)) == 0.0
    assert np.allclose(root @ root.T, sigma, atol=1e-10)
    assert repair == 0.0


def test_covariance_sampling_oracle():
    cfg = small_config()
    plan = plan_truth(cfg)
    sigma, root, _ = build_covariance(cfg, plan)
    rng = np.random.default_rng(1)
    draws = rng.standard_normal((100_000, sigma.shape[0])) @ root.T
    emp = np.corrcoef(draws, rowvar=False)
    assert np.max(np.abs(emp - sigma)) < 0.01


def test_nonnull_placement_rules():
    cfg40 = small_config(p_z=40, n_nonnull_z=10, p_w=150, n_nonnull_w=15, n_cross_pairs=10)
    plan = plan_truth(cfg40)
    blocks = plan.nonnull_z // 10
    counts = [int(np.sum(blocks == b)) for b in range(4)]
    assert counts == [3, 2, 3, 2]
    wblocks = plan.nonnull_w // 10
    assert len(plan.nonnull_w) == 15
    assert sorted(wblocks.tolist()) == list(range(15))  # one per leading block
    assert len(plan.cross_pairs) == 10
    zs = [z for z, _ in plan.cross_pairs]
    ws = [w for _, w in plan.cross_pairs]
    assert len(set(ws)) == 10 and set(zs) <= set(plan.nonnull_z.tolist())
    # alternating signs over the combined placement
    nz = np.sort(np.concatenate([plan.nonnull_z, 40 + plan.nonnull_w]))
    signs = plan.signs[nz]
    assert np.all(signs[::2] == 1.0) and np.all(signs[1::2] == -1.0)


def test_linear_calibration_algebra():
    cfg = small_config()
    plan = plan_truth(cfg)
    sigma, _, _ = build_covariance(cfg, plan)
    truth = calibrate_effects(cfg, sigma, plan)
    s2 = truth.beta_star @ sigma @ truth.beta_star
    expected_eps = np.sqrt(s2 * (1 - cfg.target_r2) / cfg.target_r2)
    assert truth.sigma_eps == pytest.approx(expected_eps, rel=1e-12)
    assert s2 / (s2 + truth.sigma_eps**2) == pytest.approx(cfg.target_r2, rel=1e-12)


def test_weighted_auc_null_signal():
    rng = np.random.default_rng(2)
    u = np.sort(rng.standard_normal(50_000))
    probs = np.full(50_000, 0.2)
    # zero signal: AUC is exactly one half, prevalence is the intercept solve
    assert _weighted_auc(0.0 * u, probs) == pytest.approx(0.5, abs=1e-12)
    assert expit(np.log(0.2 / 0.8)) == pytest.approx(0.2)


def test_logistic_calibration_hits_targets_on_fresh_draws():
    cfg = small_config(family="logistic")
    plan = plan_truth(cfg)
    sigma, _, _ = build_covariance(cfg, plan)
    truth = calibrate_effects(cfg, sigma, plan)
    rng = np.random.default_rng(999)  # fresh seed, independent of calibration
    n = 200_000
    X = rng.standard_normal((n, sigma.shape[0])) @ truth.covariance_root.T
    eta = truth.intercept_star + X @ truth.beta_star
    y = (rng.random(n) < expit(eta)).astype(float)
    assert y.mean() == pytest.approx(cfg.prevalence, abs=0.005)
    assert H.auc_score(eta, y) == pytest.approx(cfg.target_auc, abs=0.01)


def test_simulated_dataset_matches_family_conventions():
    cfg_lin = small_config()
    plan = plan_truth(cfg_lin)
    sigma, _, _ = build_covariance(cfg_lin, plan)
    truth = calibrate_effects(cfg_lin, sigma, plan)
    d = simulate_dataset(truth, cfg_lin, 50, np.random.default_rng(0))
    assert d.p_a == 0 and d.p_z == 10 and d.p_w == 10

    cfg_log = small_config(family="logistic")
    truth_log = calibrate_effects(cfg_log, sigma, plan)
    d2 = simulate_dataset(truth_log, cfg_log, 50, np.random.default_rng(0))
    assert d2.p_a == 1
    assert set(np.unique(d2.y)) <= {0.0, 1.0}
    assert np.all(d2.A == 1.0)
    cols = true_beta_columns(truth_log, cfg_log)
    assert cols.shape == (21,)
    assert cols[0] == truth_log.intercept_star


def test_standardize_and_rescale_roundtrip():
    cfg = small_config(family="logistic")
    plan = plan_truth(cfg)
    sigma, _, _ = build_covariance(cfg, plan)
    truth = calibrate_effects(cfg, sigma, plan)
    rng = np.random.default_rng(3)
    data = simulate_dataset(truth, cfg, 400, rng)
    std, scaler = standardize_dataset(data, "logistic")
    assert np.allclose(std.X[:, 1:].mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(std.X[:, 1:].std(axis=0), 1.0, atol=1e-12)
    assert np.all(std.X[:, 0] == 1.0)

    # a fit on the standardized scale maps back to the raw scale exactly
    fit_std = H.fit_glm(std.y, std.X, "logistic")
    beta_orig = scaler.to_original(fit_std.theta, data.a_idx)
    fit_raw = H.fit_glm(data.y, data.X, "logistic")
    assert np.max(np.abs(beta_orig - fit_raw.theta)) < 1e-6

    ext_data = simulate_dataset(truth, cfg, 2000, rng)
    ext, _ = fit_external_reduced(ext_data, "logistic")
    ext_std = rescale_external(ext, scaler, data.z_idx)
    s = scaler.scale[data.z_idx]
    assert np.allclose(ext_std.theta_z, ext.theta_z * s)
    assert np.allclose(ext_std.cov_theta_z, ext.cov_theta_z * np.outer(s, s))


def test_run_study_deterministic_and_structured():
    cfg = small_config()
    r1 = run_study(cfg)
    r2 = run_study(cfg)
    for m in cfg.methods:
        a = r1.metrics[m][120]
        b = r2.metrics[m][120]
        assert np.array_equal(a, b)
        assert a.shape == (2,)
        assert np.isfinite(a).all()
    assert r1.failures == 0
    s = r1.summary["main"][120]
    assert s["lo"] <= s["mean"] <= s["hi"]


def test_external_only_bounded_by_true_model():
    cfg = small_config(n=(200,), n_replicates=3)
    rep = run_study(cfg)
    ext_mean = rep.summary["external"][200]["mean"]
    assert ext_mean <= rep.true_metric + 0.02
    assert rep.true_metric == pytest.approx(cfg.target_r2, abs=0.02)


def test_degenerate_external_copy_of_main_is_sane():
    # external summary fitted on a copy of the main study itself: the fit
    # must stay finite and close to the main-only analysis
    cfg = small_config(n=(300,), n_replicates=3, ext_ratio=1.0)
    plan = plan_truth(cfg)
    sigma, _, _ = build_covariance(cfg, plan)
    truth = calibrate_effects(cfg, sigma, plan)
    diffs = []
    for rep in range(3):
        rng = np.random.default_rng([17, rep])
        data = simulate_dataset(truth, cfg, 300, rng)
        ext, _ = fit_external_reduced(data, "linear")  # same rows as main
        std, scaler = standardize_dataset(data, "linear")
        ext_std = rescale_external(ext, scaler, data.z_idx)
        fit_cfg = H.FitConfig(family="linear", weight=H.WeightSpec("ms"),
                              cv_folds=4, n_lambda=12, seed=rep)
        rep_htl = H.fit(std, ext_std, fit_cfg)
        rep_main = H.fit_main_only(std, fit_cfg)
        rng_t = np.random.default_rng([18, rep])
        X_test = rng_t.standard_normal((4000, sigma.shape[0])) @ truth.covariance_root.T
        y_test = X_test @ truth.beta_star + truth.sigma_eps * rng_t.standard_normal(4000)
        b_h = scaler.to_original(rep_htl.beta, data.a_idx)
        b_m = scaler.to_original(rep_main.beta, data.a_idx)
        m_h = H.r_squared(X_test @ b_h, y_test)
        m_m = H.r_squared(X_test @ b_m, y_test)
        assert np.isfinite(m_h)
        diffs.append(m_h - m_m)
    assert abs(np.mean(diffs)) <= 0.05


def test_inference_arm_collects_fdr_coverage_power():
    cfg = small_config(
        family="logistic",
        n=(400,),
        n_replicates=2,
        penalty="adaptive_lasso",
        run_inference=True,
        methods=("htlgmm_ms", "main"),
        test_size=3000,
        alpha_grid=(0.5, 2.0),
    )
    rep = run_study(cfg)
    arr = rep.inference["htlgmm_ms"][400]
    assert set(arr) == {"fdr", "coverage", "power_z", "power_w"}
    assert np.isfinite(arr["power_z"]).all()
    assert np.all((arr["fdr"] >= 0) & (arr["fdr"] <= 1))
    assert np.all((arr["coverage"] >= 0) & (arr["coverage"] <= 1))
    # the main-only arm has selection power but no intervals
    assert np.isfinite(rep.inference["main"][400]["power_z"]).all()
    assert np.isnan(rep.inference["main"][400]["coverage"]).all()


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(n_replicates=0)
    with pytest.raises(ConfigError):
        small_config(p_z=7)
    with pytest.raises(ConfigError):
        small_config(methods=("nope",))
    with pytest.raises(ConfigError):
        small_config(penalty="scad")
    with pytest.raises(ConfigError):
        small_config(run_inference=True)  # needs adaptive_lasso
