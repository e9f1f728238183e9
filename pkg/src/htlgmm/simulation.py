"""Simulation harness: data generation, calibration and method comparison.

Covariates are block-correlated Gaussians (AR-within-block, selected
cross-block couplings between non-null pairs).  Effect sizes are
calibrated so the true model hits a target R-squared (linear) or target
AUC and prevalence (logistic).  run_study simulates main + external
studies from one truth, fits each requested method, scores a shared test
set, and (optionally) collects FDR / coverage / power for the
adaptive-lasso inference arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .driver import FitConfig, fit, fit_main_only
from .errors import (
    CalibrationFailure,
    ConfigError,
    HtlgmmError,
    NotPositiveDefinite,
)
from .glm import Dataset, fit_glm, get_family
from .inference import bh_adjust
from .metrics import eval_metrics
from .moments import ExternalSummary
from .solver import PenaltySpec
from .weighting import WeightSpec

METHODS = ("htlgmm_ms", "htlgmm_ridge", "htlgmm_ow", "main", "external")

# sub-stream labels hung off the study seed
_STREAM_PLAN = 1
_STREAM_CALIBRATE = 2
_STREAM_TEST = 3
_STREAM_REPLICATE = 4

_CALIBRATION_DRAWS = 1_000_000


@dataclass(frozen=True)
class SimConfig:
    """Design of one simulation study."""

    family: str = "logistic"
    p_z: int = 10
    p_w: int = 150
    n: tuple = (500,)
    ext_ratio: float = 10.0
    block_size: int = 10
    within_rho: float = 0.5
    cross_rho: float = 0.3
    n_cross_pairs: int = 10
    n_nonnull_z: int = 10
    n_nonnull_w: int = 15
    target_r2: float = 0.343
    target_auc: float = 0.754
    prevalence: float = 0.2
    seed: int = 0
    n_replicates: int = 100
    test_size: int = 100_000
    methods: tuple = ("htlgmm_ms", "main", "external")
    penalty: str = "lasso"
    gamma: float = 1.0
    pilot: str = "glm"
    run_inference: bool = False
    cv_folds: int = 10
    n_lambda: int = 50
    alpha_grid: tuple | None = None  # multipliers of the data-driven anchor
    q_level: float = 0.05
    honest_cv: bool = True

    def __post_init__(self):
        n = (self.n,) if isinstance(self.n, (int, np.integer)) else tuple(int(v) for v in self.n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be at least 1")
        if self.p_z % self.block_size or self.p_w % self.block_size:
            raise ConfigError("p_z and p_w must be multiples of block_size")
        if self.n_nonnull_z > self.p_z or self.n_nonnull_w > self.p_w:
            raise ConfigError("more non-null effects than variables")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.penalty not in ("lasso", "adaptive_lasso"):
            raise ConfigError("penalty must be lasso or adaptive_lasso")
        if self.run_inference and self.penalty != "adaptive_lasso":
            raise ConfigError("the inference arm requires adaptive_lasso")
        if any(v < 1 for v in n):
            raise ConfigError("main-study sizes must be positive")


@dataclass(frozen=True)
class TruthPlan:
    """Seed-determined placement of the non-null effects."""

    nonnull_z: np.ndarray   # indices within the z block
    nonnull_w: np.ndarray   # indices within the w block
    cross_pairs: tuple      # (z_index, w_index) couples, block-local indices
    signs: np.ndarray       # +-1 per covariate, zero on nulls


@dataclass(frozen=True)
class SimTruth:
    """Calibrated data-generating truth."""

    beta_star: np.ndarray      # coefficients over the (z, w) covariates
    sigma_eps: float           # residual SD (linear family; 0 otherwise)
    intercept_star: float      # logistic intercept (0 for linear)
    covariance_root: np.ndarray
    plan: TruthPlan
    magnitude: float
    pd_repair: float


def plan_truth(config: SimConfig) -> TruthPlan:
    """Draw the non-null placement once per study seed.

    All ten z variables are causal when p_z equals the non-null count;
    with four z blocks the counts per block follow the 3/2/3/2 layout.
    Non-null w effects sit one per block in the leading blocks; the
    non-null z's are coupled to distinct non-null w's.
    """
    rng = np.random.default_rng([config.seed, _STREAM_PLAN])
    B = config.block_size
    if config.n_nonnull_z == config.p_z:
        nz = np.arange(config.p_z)
    elif config.p_z == 4 * B and config.n_nonnull_z == 10:
        counts = (3, 2, 3, 2)
        nz = np.concatenate([
            b * B + np.sort(rng.choice(B, size=c, replace=False))
            for b, c in enumerate(counts)
        ])
    else:
        nz = np.sort(rng.choice(config.p_z, size=config.n_nonnull_z, replace=False))

    n_blocks_w = config.p_w // B
    if config.n_nonnull_w <= n_blocks_w:
        nw = np.array([
            b * B + rng.integers(B) for b in range(config.n_nonnull_w)
        ])
    else:
        nw = np.sort(rng.choice(config.p_w, size=config.n_nonnull_w, replace=False))

    k = min(config.n_cross_pairs, nz.size, nw.size)
    partners = rng.choice(nw, size=k, replace=False)
    pairs = tuple((int(nz[i]), int(partners[i])) for i in range(k))

    p = config.p_z + config.p_w
    signs = np.zeros(p)
    nonnull_full = np.sort(np.concatenate([nz, config.p_z + nw]))
    signs[nonnull_full] = np.where(np.arange(nonnull_full.size) % 2 == 0, 1.0, -1.0)
    return TruthPlan(nonnull_z=nz, nonnull_w=nw, cross_pairs=pairs, signs=signs)


def build_covariance(config: SimConfig, plan: TruthPlan | None = None):
    """Target covariance of the (z, w) covariates and its Cholesky factor.

    Blocks carry corr rho^|i-j| within; designated non-null (z, w)
    pairs get the cross correlation.  If the insertion breaks positive
    definiteness the matrix is repaired by eigenvalue clipping and the
    perturbation size recorded.
    """
    if plan is None:
        plan = plan_truth(config)
    p = config.p_z + config.p_w
    B = config.block_size
    sigma = np.zeros((p, p))
    lags = np.abs(np.subtract.outer(np.arange(B), np.arange(B)))
    block = config.within_rho**lags
    for start in range(0, p, B):
        sigma[start : start + B, start : start + B] = block
    for zi, wj in plan.cross_pairs:
        col = config.p_z + wj
        val = config.cross_rho * np.sqrt(sigma[zi, zi] * sigma[col, col])
        sigma[zi, col] = val
        sigma[col, zi] = val

    repair = 0.0
    w = np.linalg.eigvalsh(sigma)
    if w[0] <= 1e-8:
        vals, vecs = np.linalg.eigh(sigma)
        fixed = (vecs * np.maximum(vals, 1e-8)) @ vecs.T
        fixed = 0.5 * (fixed + fixed.T)
        repair = float(np.linalg.norm(fixed - sigma, "fro"))
        sigma = fixed
        if np.linalg.eigvalsh(sigma)[0] <= 0:
            raise NotPositiveDefinite("covariance not PD after projection")
    root = np.linalg.cholesky(sigma)
    return sigma, root, repair


def _weighted_auc(eta_sorted: np.ndarray, probs: np.ndarray) -> float:
    """Population AUC of sorted scores with per-draw case probabilities."""
    w1 = probs
    w0 = 1.0 - probs
    concordant = float(np.sum(w1 * (np.cumsum(w0) - w0)))
    denom = float(w1.sum() * w0.sum() - np.sum(w1 * w0))
    return concordant / denom


def calibrate_effects(config: SimConfig, sigma: np.ndarray, plan: TruthPlan | None = None) -> SimTruth:
    """Pick the common effect magnitude (and intercept / residual SD).

    Linear: the signal variance is set to the target R-squared and the
    residual variance to its complement, which yields the target exactly.
    Logistic: bisection on the signal scale with an inner intercept
    solve targeting the prevalence, both on a fixed bank of 1e6 standard
    normal draws of the true linear predictor.
    """
    if plan is None:
        plan = plan_truth(config)
    sigma = np.asarray(sigma, dtype=float)
    _, root, repair = build_covariance(config, plan)
    e = plan.signs
    q2 = float(e @ sigma @ e)
    if q2 <= 0:
        raise CalibrationFailure("degenerate sign pattern")

    if get_family(config.family).is_logistic:
        rng = np.random.default_rng([config.seed, _STREAM_CALIBRATE])
        u = np.sort(rng.standard_normal(_CALIBRATION_DRAWS))

        def solve_intercept(s: float) -> float:
            def prev_gap(a):
                return float(np.mean(expit(a + s * u))) - config.prevalence

            return brentq(prev_gap, -40.0, 40.0, xtol=1e-10)

        def auc_gap(s: float) -> float:
            a = solve_intercept(s)
            return _weighted_auc(s * u, expit(a + s * u)) - config.target_auc

        lo, hi = 1e-3, 20.0
        try:
            if auc_gap(lo) > 0 or auc_gap(hi) < 0:
                raise CalibrationFailure("target AUC outside bracket")
            s_star = brentq(auc_gap, lo, hi, xtol=1e-8)
        except ValueError as exc:
            raise CalibrationFailure(str(exc)) from exc
        intercept = solve_intercept(s_star)
        c = s_star / np.sqrt(q2)
        return SimTruth(
            beta_star=c * e,
            sigma_eps=0.0,
            intercept_star=float(intercept),
            covariance_root=root,
            plan=plan,
            magnitude=float(c),
            pd_repair=repair,
        )

    # linear: put the signal variance at the target and the noise at the rest
    s2 = config.target_r2
    c = np.sqrt(s2 / q2)
    sigma_eps = float(np.sqrt(s2 * (1.0 - config.target_r2) / config.target_r2))
    return SimTruth(
        beta_star=c * e,
        sigma_eps=sigma_eps,
        intercept_star=0.0,
        covariance_root=root,
        plan=plan,
        magnitude=float(c),
        pd_repair=repair,
    )


def simulate_dataset(truth: SimTruth, config: SimConfig, n: int, rng) -> Dataset:
    """One study drawn from the calibrated truth.

    Logistic datasets carry an intercept column as the design block A;
    linear datasets have an empty A (outcomes are mean-zero by design).
    """
    p = truth.beta_star.size
    xw = rng.standard_normal((n, p)) @ truth.covariance_root.T
    eta = xw @ truth.beta_star
    Z, W = xw[:, : config.p_z], xw[:, config.p_z :]
    if get_family(config.family).is_logistic:
        y = (rng.random(n) < expit(truth.intercept_star + eta)).astype(float)
        return Dataset.from_blocks(y, A=np.ones((n, 1)), Z=Z, W=W)
    y = eta + truth.sigma_eps * rng.standard_normal(n)
    return Dataset.from_blocks(y, Z=Z, W=W)


def true_beta_columns(truth: SimTruth, config: SimConfig) -> np.ndarray:
    """Truth expressed in dataset column order (design block included)."""
    if get_family(config.family).is_logistic:
        return np.concatenate([[truth.intercept_star], truth.beta_star])
    return truth.beta_star.copy()


def fit_external_reduced(ext_data: Dataset, family):
    """External analyst's reduced fit; returns the shipped summary plus
    the full coefficient vector used by the external-only baseline."""
    fit_res = fit_glm(ext_data.y, ext_data.XR, family)
    p_a = ext_data.p_a
    summary = ExternalSummary(
        theta_z=fit_res.theta[p_a:],
        cov_theta_z=fit_res.cov_sandwich[p_a:, p_a:],
        n_ext=ext_data.n,
    )
    return summary, fit_res.theta


# ---------------------------------------------------------------------------
# standardization (fit on unit-variance columns, report on the original scale)


@dataclass(frozen=True)
class ColumnScaler:
    center: np.ndarray
    scale: np.ndarray
    y_center: float

    def to_original(self, beta_std: np.ndarray, a_idx) -> np.ndarray:
        """Map standardized-scale coefficients back to the data scale."""
        beta = beta_std / self.scale
        shift = float(self.center @ beta)
        a_idx = np.asarray(a_idx, dtype=int)
        if shift != 0.0 and a_idx.size:
            beta = beta.copy()
            beta[a_idx[0]] -= shift
        return beta

    def se_to_original(self, se_std: np.ndarray, support) -> np.ndarray:
        return se_std / self.scale[np.asarray(support, dtype=int)]


def standardize_dataset(data: Dataset, family) -> tuple[Dataset, ColumnScaler]:
    """Center and unit-scale the Z and W columns (A untouched); linear
    outcomes are centered as well."""
    family = get_family(family)
    center = np.zeros(data.p_x)
    scale = np.ones(data.p_x)
    cols = np.concatenate([data.z_idx, data.w_idx]).astype(int)
    X = data.X.copy()
    for j in cols:
        c = float(X[:, j].mean())
        s = float(X[:, j].std())
        if s <= 0:
            s = 1.0
        center[j] = c
        scale[j] = s
        X[:, j] = (X[:, j] - c) / s
    y = data.y
    y_center = 0.0
    if not family.is_logistic:
        y_center = float(y.mean())
        y = y - y_center
    std = Dataset(y=y, X=X, a_idx=data.a_idx, z_idx=data.z_idx, w_idx=data.w_idx)
    return std, ColumnScaler(center=center, scale=scale, y_center=y_center)


def rescale_external(external: ExternalSummary, scaler: ColumnScaler, z_idx) -> ExternalSummary:
    """Express external reduced-model coefficients on the standardized
    main-study scale."""
    s = scaler.scale[np.asarray(z_idx, dtype=int)]
    return ExternalSummary(
        theta_z=external.theta_z * s,
        cov_theta_z=external.cov_theta_z * np.outer(s, s),
        n_ext=external.n_ext,
        scaled=external.scaled,
    )


# ---------------------------------------------------------------------------
# study runner


_WEIGHT_FOR = {
    "htlgmm_ms": "ms",
    "htlgmm_ridge": "ridge",
    "htlgmm_ow": "optimal",
}


@dataclass
class SimReport:
    """Study output: per-replicate metrics plus aggregated summaries."""

    config: SimConfig
    true_metric: float
    metrics: dict        # method -> {n -> array of per-replicate metrics}
    summary: dict        # method -> {n -> dict(mean, sd, lo, hi, n_fail)}
    inference: dict      # method -> {n -> dict of per-replicate arrays}
    inference_summary: dict
    failures: int

    @property
    def methods(self):
        return self.config.methods

    @property
    def n_values(self):
        return self.config.n


def _fit_config_for(method: str, config: SimConfig) -> FitConfig:
    if config.penalty == "adaptive_lasso":
        penalty = PenaltySpec("adaptive_lasso", gamma=config.gamma)
    else:
        penalty = PenaltySpec("lasso")
    weight = WeightSpec(
        mode=_WEIGHT_FOR[method],
        alpha=config.alpha_grid,
        alpha_scaled=config.alpha_grid is not None,
    )
    return FitConfig(
        family=config.family,
        penalty=penalty,
        weight=weight,
        cv_folds=config.cv_folds,
        n_lambda=config.n_lambda,
        seed=config.seed,
        infer=config.run_inference,
        honest_cv=config.honest_cv,
        pilot=config.pilot,
        q_level=config.q_level,
    )


def _truth_columns(truth: SimTruth, config: SimConfig):
    """Column indices (dataset convention) of non-null and null effects."""
    offset = 1 if get_family(config.family).is_logistic else 0
    nz = truth.plan.nonnull_z + offset
    nw = truth.plan.nonnull_w + offset + config.p_z
    p_cols = offset + config.p_z + config.p_w
    penalized = np.arange(offset, p_cols)
    nonnull = set(nz.tolist()) | set(nw.tolist())
    null_cols = np.array([j for j in penalized if j not in nonnull], dtype=int)
    return nz, nw, null_cols, penalized


def _affine_predictor(beta_cols, shift, data: Dataset):
    """Split a dataset-column coefficient vector into (covariate coefs,
    intercept) acting on the raw (z, w) covariates."""
    if data.p_a:
        return beta_cols[data.p_a :], float(beta_cols[0] + shift)
    return beta_cols, float(shift)


def _inference_numbers(report, data, scaler, config, beta_true_cols,
                       nonnull_z_cols, nonnull_w_cols, null_cols):
    """FDR / coverage / power for one fitted replicate."""
    out = {"fdr": np.nan, "coverage": np.nan, "power_z": np.nan, "power_w": np.nan}
    support = report.support if report.support is not None else np.zeros(0, dtype=int)
    sset = set(int(j) for j in support)
    nz = [int(j) for j in nonnull_z_cols]
    nw = [int(j) for j in nonnull_w_cols]
    if nz:
        out["power_z"] = float(np.mean([j in sset for j in nz]))
    if nw:
        out["power_w"] = float(np.mean([j in sset for j in nw]))
    inf = getattr(report, "inference", None)
    if inf is None:
        return out

    sup = np.asarray(inf.support, dtype=int)
    scale_sup = scaler.scale[sup]
    lo = inf.ci_lower / scale_sup
    hi = inf.ci_upper / scale_sup
    pos = {int(j): k for k, j in enumerate(sup)}
    covered = []
    for j in nz + nw:
        if j in pos:
            covered.append(bool(lo[pos[j]] <= beta_true_cols[j] <= hi[pos[j]]))
        else:
            covered.append(False)  # unselected non-null: interval misses
    out["coverage"] = float(np.mean(covered))

    a_set = set(int(j) for j in data.a_idx)
    keep = np.array([k for k, j in enumerate(sup) if int(j) not in a_set], dtype=int)
    if keep.size == 0:
        out["fdr"] = 0.0
        return out
    _, rejected = bh_adjust(inf.p_values[keep], config.q_level)
    rej_cols = sup[keep][rejected]
    null_set = set(int(j) for j in null_cols)
    out["fdr"] = sum(1 for j in rej_cols if int(j) in null_set) / max(1, rej_cols.size)
    return out


def _run_method(method, data, external, theta_ext_full, config,
                beta_true_cols, nonnull_z_cols, nonnull_w_cols, null_cols):
    """Fit one method on one replicate; returns an affine predictor over
    the raw covariates plus the inference numbers."""
    family = get_family(config.family)
    p_cov = config.p_z + config.p_w
    if method == "external":
        # the external design block (intercept) exists only for logistic
        coef = np.zeros(p_cov)
        if family.is_logistic:
            coef[: config.p_z] = theta_ext_full[1:]
            icpt = float(theta_ext_full[0])
        else:
            coef[: config.p_z] = theta_ext_full
            icpt = 0.0
        return {"coef": coef, "intercept": icpt}

    data_std, scaler = standardize_dataset(data, family)
    if method == "main":
        report = fit_main_only(data_std, _fit_config_for("htlgmm_ms", config))
    else:
        ext_std = rescale_external(external, scaler, data.z_idx)
        report = fit(data_std, ext_std, _fit_config_for(method, config))

    beta_orig = scaler.to_original(report.beta, data.a_idx)
    shift = 0.0
    if not family.is_logistic:
        shift = scaler.y_center - float(scaler.center @ beta_orig)
    coef, icpt = _affine_predictor(beta_orig, shift, data)
    entry = {"coef": coef, "intercept": icpt}
    if config.run_inference:
        entry.update(
            _inference_numbers(report, data, scaler, config, beta_true_cols,
                               nonnull_z_cols, nonnull_w_cols, null_cols)
        )
    return entry


def _replicate_result(truth: SimTruth, config: SimConfig, n: int, rep: int) -> dict:
    """All method fits for one replicate (no test-set scoring here)."""
    family = get_family(config.family)
    rng = np.random.default_rng([config.seed, _STREAM_REPLICATE, int(n), rep])
    data = simulate_dataset(truth, config, int(n), rng)
    ext_data = simulate_dataset(truth, config, int(round(config.ext_ratio * n)), rng)
    external, theta_ext_full = fit_external_reduced(ext_data, family)
    nz, nw, null_cols, _ = _truth_columns(truth, config)
    beta_true_cols = true_beta_columns(truth, config)
    out = {}
    for method in config.methods:
        try:
            out[method] = _run_method(
                method, data, external, theta_ext_full, config,
                beta_true_cols, nz, nw, null_cols,
            )
        except HtlgmmError:
            out[method] = {"failed": True}
    return out


def run_study(config: SimConfig, threads: int = 1) -> SimReport:
    """Run the replicated comparison for one simulation design.

    Replicates draw from independent seed streams, so results do not
    depend on scheduling; threads > 1 distributes replicates over worker
    processes.
    """
    family = get_family(config.family)
    plan = plan_truth(config)
    sigma, _, _ = build_covariance(config, plan)
    truth = calibrate_effects(config, sigma, plan)

    rng_test = np.random.default_rng([config.seed, _STREAM_TEST])
    X_test = rng_test.standard_normal((config.test_size, truth.beta_star.size))
    X_test = X_test @ truth.covariance_root.T
    eta_test = X_test @ truth.beta_star
    if family.is_logistic:
        y_test = (rng_test.random(config.test_size)
                  < expit(truth.intercept_star + eta_test)).astype(float)
    else:
        y_test = eta_test + truth.sigma_eps * rng_test.standard_normal(config.test_size)
    true_metric = eval_metrics(eta_test, y_test, family)

    jobs = [(int(n), rep) for n in config.n for rep in range(config.n_replicates)]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                _replicate_result,
                [truth] * len(jobs), [config] * len(jobs),
                [n for n, _ in jobs], [r for _, r in jobs],
            ))
    else:
        results = [_replicate_result(truth, config, n, rep) for n, rep in jobs]

    metrics = {m: {int(n): np.full(config.n_replicates, np.nan) for n in config.n}
               for m in config.methods}
    inference = {
        m: {int(n): {k: np.full(config.n_replicates, np.nan)
                     for k in ("fdr", "coverage", "power_z", "power_w")}
            for n in config.n}
        for m in config.methods if m != "external"
    }
    failures = 0
    for (n, rep), res in zip(jobs, results):
        for method in config.methods:
            entry = res[method]
            if entry.get("failed"):
                failures += 1
                continue
            eta = X_test @ entry["coef"] + entry["intercept"]
            metrics[method][n][rep] = eval_metrics(eta, y_test, family)
            if config.run_inference and method != "external":
                for k in ("fdr", "coverage", "power_z", "power_w"):
                    if k in entry:
                        inference[method][n][k][rep] = entry[k]

    summary = {
        m: {n: _summarize(vals) for n, vals in per_n.items()}
        for m, per_n in metrics.items()
    }
    inference_summary = {
        m: {
            n: {k: float(np.nanmean(v)) if np.any(~np.isnan(v)) else float("nan")
                for k, v in arrs.items()}
            for n, arrs in per_n.items()
        }
        for m, per_n in inference.items()
    }
    return SimReport(
        config=config,
        true_metric=float(true_metric),
        metrics=metrics,
        summary=summary,
        inference=inference if config.run_inference else {m: {} for m in inference},
        inference_summary=inference_summary if config.run_inference else {m: {} for m in inference},
        failures=failures,
    )


def _summarize(vals: np.ndarray) -> dict:
    ok = vals[~np.isnan(vals)]
    n_fail = int(np.sum(np.isnan(vals)))
    if ok.size == 0:
        return {"mean": float("nan"), "sd": float("nan"), "lo": float("nan"),
                "hi": float("nan"), "n_fail": n_fail}
    mean = float(ok.mean())
    sd = float(ok.std(ddof=1)) if ok.size > 1 else 0.0
    half = 1.96 * sd / np.sqrt(ok.size)
    return {"mean": mean, "sd": sd, "lo": mean - half, "hi": mean + half, "n_fail": n_fail}
