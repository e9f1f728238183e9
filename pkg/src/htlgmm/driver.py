"""End-to-end estimation pipeline.

fit() runs the full one-step procedure: an initial main-study estimate,
reduced-model design effects, moment-variance assembly, weight
construction, the pseudo least-squares transform, a cross-validated
penalized solve over the joint (kernel alpha, lambda) grid, and optional
post-selection inference under the adaptive lasso.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .errors import (
    ConfigError,
    IncompatibleExternal,
    SingularCombinedCovariance,
)
from .glm import Dataset, GlmFit, fit_glm, fit_reduced_main, get_family
from .inference import InferenceReport, bh_adjust, sandwich_sigma, wald_inference
from .moments import ExternalSummary, ThetaTilde
from .pseudo import build_pseudo
from .solver import (
    CvReport,
    PathGrid,
    PenaltySpec,
    adaptive_weights,
    coordinate_descent,
    cross_validate,
    fit_penalized_glm,
    fit_penalized_glm_path,
    glm_lambda_max,
    lambda_path,
)
from .weighting import (
    WeightMatrix,
    WeightSpec,
    build_weight,
    default_alpha_grid,
    estimate_variance,
    inverse_floored,
)

# fixed stream offsets so that every random draw descends from the one
# user-provided seed
_SEED_INIT = 11
_SEED_CV = 13


@dataclass(frozen=True)
class FitConfig:
    """Configuration of one fit.

    infer=True is only allowed with the adaptive-lasso penalty; the
    design block A is always excluded from the penalty.  one_step_iters
    controls how many quadratic re-expansions are performed (default a
    single one); the weight matrix is frozen across re-expansions unless
    refresh_weight is set.
    """

    family: str = "linear"
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    weight: WeightSpec = field(default_factory=WeightSpec)
    cv_folds: int = 10
    n_lambda: int = 100
    lambda_min_ratio: float | None = None
    one_step_iters: int = 1
    refresh_weight: bool = False
    seed: int = 0
    infer: bool = False
    ci_level: float = 0.95
    q_level: float = 0.05
    honest_cv: bool = True
    pilot: str = "glm"
    init: str = "lasso_cv"
    init_beta: np.ndarray | None = None
    cv_criterion: str | None = None

    def __post_init__(self):
        if self.infer and self.penalty.kind != "adaptive_lasso":
            raise ConfigError("inference is only available under adaptive_lasso")
        if self.one_step_iters < 1:
            raise ConfigError("one_step_iters must be >= 1")
        if self.init not in ("lasso_cv", "glm", "vector"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.pilot not in ("glm", "ridge"):
            raise ConfigError(f"unknown pilot {self.pilot!r}")


@dataclass
class FitReport:
    """Fit output: coefficients, selection, tuning, diagnostics."""

    beta: np.ndarray
    support: np.ndarray
    chosen_lambda: float
    chosen_alpha: float | None
    cv_report: CvReport | None
    inference: InferenceReport | None
    diagnostics: dict


def _ratio_for(data: Dataset, config: FitConfig) -> float:
    if config.lambda_min_ratio is not None:
        return config.lambda_min_ratio
    return 1e-3 if data.n < data.p_x else 1e-4


def _with_design_unpenalized(penalty: PenaltySpec, data: Dataset) -> PenaltySpec:
    extra = tuple(sorted(set(penalty.unpenalized) | set(int(j) for j in data.a_idx)))
    return replace(penalty, unpenalized=extra)


def _pilot_coefficients(data: Dataset, family, config: FitConfig) -> np.ndarray:
    """Main-study pilot for the adaptive weights (GLM or ridge)."""
    if config.pilot == "glm":
        return fit_glm(data.y, data.X, family).theta
    ridge = _with_design_unpenalized(PenaltySpec("ridge"), data)
    anchor = glm_lambda_max(data.y, data.X, family, _with_design_unpenalized(PenaltySpec("lasso"), data))
    return fit_penalized_glm(data.y, data.X, family, ridge, 1e-2 * anchor)


def _resolve_penalty(data: Dataset, family, config: FitConfig) -> PenaltySpec:
    """Attach adaptive weights (from a pilot fit on this split) if needed."""
    penalty = _with_design_unpenalized(config.penalty, data)
    if penalty.kind != "adaptive_lasso" or penalty.weights is not None:
        return penalty
    pilot = _pilot_coefficients(data, family, config)
    w = adaptive_weights(pilot, penalty.gamma, config.pilot)
    return replace(penalty, weights=w)


class _MainOnlyPipeline:
    """Path factory for penalized GLM fits of the main study alone."""

    def __init__(self, family, config: FitConfig, ratio: float):
        self.family = get_family(family)
        self.config = config
        self.ratio = ratio
        self._full = None

    def __call__(self, data: Dataset, lambdas=None) -> PathGrid:
        if lambdas is None and self._full is not None and self._full[0] is data:
            return self._full[1]
        penalty = _resolve_penalty(data, self.family, self.config)
        path = fit_penalized_glm_path(
            data.y,
            data.X,
            self.family,
            penalty,
            n_lambda=self.config.n_lambda,
            lambda_min_ratio=self.ratio,
            lambdas=None if lambdas is None else lambdas[0],
        )
        grid = PathGrid(
            alphas=(None,),
            lambdas=path.lambdas[None, :],
            betas=path.betas[None, :, :],
        )
        if lambdas is None:
            self._full = (data, grid)
        return grid


def _initial_estimator(data: Dataset, family, config: FitConfig):
    """Step-1 initial coefficients plus the tuning value they used."""
    if config.init == "vector":
        if config.init_beta is None:
            raise ConfigError("init='vector' requires init_beta")
        beta0 = np.asarray(config.init_beta, dtype=float).ravel()
        return beta0, None
    if config.init == "glm":
        return fit_glm(data.y, data.X, family).theta, None
    lasso_cfg = replace(
        config, penalty=PenaltySpec("lasso"), infer=False, init="glm"
    )
    pipeline = _MainOnlyPipeline(family, lasso_cfg, _ratio_for(data, config))
    cv = cross_validate(
        data,
        family,
        pipeline,
        folds=config.cv_folds,
        seed=[config.seed, _SEED_INIT],
        criterion=config.cv_criterion,
    )
    grid = pipeline(data)
    beta0 = grid.betas[cv.chosen_index[0], cv.chosen_index[1]].copy()
    return beta0, cv.chosen_lambda


def _moment_state(data, family, config, external, beta0):
    """Reduced fit, plug-in theta and moment variance on one split."""
    red = fit_reduced_main(data, family)
    theta_tilde = ThetaTilde(theta_a=red.theta[: data.p_a], theta_z=external.theta_z)
    v_theta_a = data.n * red.cov_sandwich[: data.p_a, : data.p_a]
    blocks = estimate_variance(data, family, beta0, theta_tilde, external, v_theta_a)
    return red, theta_tilde, blocks


class _HtlgmmPipeline:
    """Path factory rebuilding the one-step pipeline on each data split.

    With honest=False the weight matrices built on the full data are
    reused inside folds (the moments and initial estimate are still
    recomputed on the training split).
    """

    def __init__(self, family, config, external, alphas, init_lambda):
        self.family = get_family(family)
        self.config = config
        self.external = external
        self.alphas = alphas
        self.init_lambda = init_lambda
        self.frozen_weights = None
        self._full = None
        self.pseudo_builds = 0      # constructions on the full data
        self.pseudo_builds_cv = 0   # constructions inside CV folds

    def _beta0(self, data: Dataset) -> np.ndarray:
        config = self.config
        if config.init == "vector":
            return np.asarray(config.init_beta, dtype=float).ravel()
        if config.init == "glm":
            return fit_glm(data.y, data.X, self.family).theta
        penalty = _with_design_unpenalized(PenaltySpec("lasso"), data)
        return fit_penalized_glm(data.y, data.X, self.family, penalty, self.init_lambda)

    def weights_for(self, blocks):
        return [
            build_weight(blocks, self.config.weight, alpha=a) for a in self.alphas
        ]

    def __call__(self, data: Dataset, lambdas=None) -> PathGrid:
        if lambdas is None and self._full is not None and self._full[0] is data:
            return self._full[1]
        config = self.config
        beta0 = self._beta0(data)
        _, theta_tilde, blocks = _moment_state(
            data, self.family, config, self.external, beta0
        )
        penalty = _resolve_penalty(data, self.family, config)
        if self.frozen_weights is not None and lambdas is not None:
            weights = self.frozen_weights
        else:
            weights = self.weights_for(blocks)
        n_alpha = len(self.alphas)
        grids = []
        betas = []
        from .moments import eval_jacobians

        moments = eval_jacobians(data, self.family, beta0, theta_tilde)
        for ia in range(n_alpha):
            ps = build_pseudo(data, self.family, beta0, theta_tilde, weights[ia],
                              moments=moments)
            if lambdas is None:
                self.pseudo_builds += 1
            else:
                self.pseudo_builds_cv += 1
            path = lambda_path(
                ps.x_ps,
                ps.y_ps,
                penalty,
                n_lambda=config.n_lambda,
                lambda_min_ratio=_ratio_for(data, config),
                lambdas=None if lambdas is None else lambdas[ia],
            )
            grids.append(path.lambdas)
            betas.append(path.betas)
        grid = PathGrid(
            alphas=tuple(self.alphas),
            lambdas=np.asarray(grids),
            betas=np.asarray(betas),
        )
        if lambdas is None:
            self._full = (data, grid)
        return grid


class _NoExternalPipeline:
    """Pipeline with the calibration moments removed.

    The moment system degenerates to the main-study score alone and the
    weight is the floored inverse of its Jacobian, under which the
    one-step problem coincides with the direct penalized fit of the main
    study (exactly so for the linear family).
    """

    def __init__(self, family, config, init_lambda):
        self.family = get_family(family)
        self.config = config
        self.init_lambda = init_lambda
        self._full = None
        self.pseudo_builds = 0
        self.pseudo_builds_cv = 0

    def _beta0(self, data):
        return _HtlgmmPipeline._beta0(self, data)

    def __call__(self, data: Dataset, lambdas=None) -> PathGrid:
        if lambdas is None and self._full is not None and self._full[0] is data:
            return self._full[1]
        config = self.config
        beta0 = self._beta0(data)
        family = self.family
        n = data.n
        d = family.mu_prime(data.X @ beta0)
        jac1 = data.X.T @ (data.X * d[:, None]) / n
        u1 = data.X.T @ (family.mu(data.X @ beta0) - data.y) / n
        weight = inverse_floored(jac1)
        x_ps = np.sqrt(n) * (weight.c_half @ jac1)
        y_ps = np.sqrt(n) * (weight.c_half @ (jac1 @ beta0 - u1))
        if lambdas is None:
            self.pseudo_builds += 1
        else:
            self.pseudo_builds_cv += 1
        penalty = _resolve_penalty(data, family, config)
        path = lambda_path(
            x_ps,
            y_ps,
            penalty,
            n_lambda=config.n_lambda,
            lambda_min_ratio=_ratio_for(data, config),
            lambdas=None if lambdas is None else lambdas[0],
        )
        grid = PathGrid(
            alphas=(None,), lambdas=path.lambdas[None, :], betas=path.betas[None, :, :]
        )
        if lambdas is None:
            self._full = (data, grid)
        return grid


def _resolve_alphas(spec: WeightSpec, blocks) -> tuple:
    if not spec.uses_alpha:
        return (0.0,)
    if spec.alpha is None:
        return default_alpha_grid(blocks)
    vals = (spec.alpha,) if isinstance(spec.alpha, (int, float)) else tuple(spec.alpha)
    if spec.alpha_scaled:
        p_x = blocks.v11.shape[0]
        anchor = float(np.trace(blocks.v11)) / max(p_x, 1)
        vals = tuple(v * anchor for v in vals)
    return tuple(float(a) for a in vals)


def fit(data: Dataset, external: ExternalSummary | None, config: FitConfig) -> FitReport:
    """Run the full pipeline on a dataset plus external summary.

    Passing external=None removes the calibration moments entirely; the
    result then reduces to the direct penalized fit of the main study.
    All randomness (fold assignment) derives from config.seed.
    """
    family = get_family(config.family)
    diagnostics: dict = {}

    if external is not None and external.p_z != data.p_z:
        raise IncompatibleExternal(
            f"external summary has p_Z={external.p_z}, data has p_Z={data.p_z}"
        )

    beta0, init_lambda = _initial_estimator(data, family, config)
    diagnostics["init_lambda"] = init_lambda

    if external is None:
        pipeline = _NoExternalPipeline(family, config, init_lambda)
        alphas = (0.0,)
    else:
        red, theta_tilde, blocks = _moment_state(data, family, config, external, beta0)
        stat, pval = transportability_check(data, family, external, reduced_fit=red)
        diagnostics["transportability_stat"] = stat
        diagnostics["transportability_p"] = pval
        diagnostics["reduced_converged"] = red.converged
        diagnostics["cond_v"] = float(np.linalg.cond(blocks.assembled))
        alphas = _resolve_alphas(config.weight, blocks)
        pipeline = _HtlgmmPipeline(family, config, external, alphas, init_lambda)
        if not config.honest_cv:
            pipeline.frozen_weights = pipeline.weights_for(blocks)

    cv = cross_validate(
        data,
        family,
        pipeline,
        folds=config.cv_folds,
        seed=[config.seed, _SEED_CV],
        criterion=config.cv_criterion,
    )
    full_grid = pipeline(data)
    ia, il = cv.chosen_index
    beta_hat = full_grid.betas[ia, il].copy()
    chosen_alpha = cv.chosen_alpha
    chosen_lambda = cv.chosen_lambda

    # optional quadratic re-expansions at the current estimate
    if config.one_step_iters > 1 and external is not None:
        penalty = _resolve_penalty(data, family, config)
        weight = build_weight(blocks, config.weight, alpha=alphas[ia])
        for _ in range(config.one_step_iters - 1):
            if config.refresh_weight:
                _, theta_tilde, blocks = _moment_state(
                    data, family, config, external, beta_hat
                )
                weight = build_weight(blocks, config.weight, alpha=alphas[ia])
            ps = build_pseudo(data, family, beta_hat, theta_tilde, weight)
            pipeline.pseudo_builds += 1
            beta_hat = coordinate_descent(
                ps.x_ps, ps.y_ps, penalty, chosen_lambda, beta_init=beta_hat
            )

    support = np.flatnonzero(beta_hat != 0.0)
    diagnostics["pseudo_builds"] = pipeline.pseudo_builds
    diagnostics["pseudo_builds_cv"] = pipeline.pseudo_builds_cv
    diagnostics["n"] = data.n
    diagnostics["p_x"] = data.p_x

    report = FitReport(
        beta=beta_hat,
        support=support,
        chosen_lambda=chosen_lambda,
        chosen_alpha=chosen_alpha,
        cv_report=cv,
        inference=None,
        diagnostics=diagnostics,
    )

    if config.infer and external is not None:
        red, theta_tilde, blocks_final = _moment_state(
            data, family, config, external, beta_hat
        )
        weight = build_weight(blocks_final, config.weight, alpha=alphas[ia])
        sigma = sandwich_sigma(
            data, family, beta_hat, support, theta_tilde, weight, blocks_final
        )
        report.inference = wald_inference(
            beta_hat[support], sigma, data.n, level=config.ci_level, support=support
        )
    return report


def fit_main_only(data: Dataset, config: FitConfig) -> FitReport:
    """Cross-validated penalized GLM of the main study alone.

    This is the standard-analysis baseline (and the Step-1 initial
    estimator machinery): a raw-data solution path tuned by the same
    fold scheme.  Inference flags are ignored here.
    """
    family = get_family(config.family)
    pipeline = _MainOnlyPipeline(family, config, _ratio_for(data, config))
    cv = cross_validate(
        data,
        family,
        pipeline,
        folds=config.cv_folds,
        seed=[config.seed, _SEED_CV],
        criterion=config.cv_criterion,
    )
    grid = pipeline(data)
    beta_hat = grid.betas[cv.chosen_index[0], cv.chosen_index[1]].copy()
    return FitReport(
        beta=beta_hat,
        support=np.flatnonzero(beta_hat != 0.0),
        chosen_lambda=cv.chosen_lambda,
        chosen_alpha=None,
        cv_report=cv,
        inference=None,
        diagnostics={"n": data.n, "p_x": data.p_x},
    )


def transportability_check(
    data: Dataset, family, external: ExternalSummary, reduced_fit: GlmFit | None = None
):
    """Wald test comparing the main-study reduced-model Z coefficients to
    the external estimates; chi-square reference with p_Z degrees of
    freedom.  Diagnostic only: never blocks a fit."""
    family = get_family(family)
    if external.p_z != data.p_z:
        raise IncompatibleExternal("external summary does not match p_Z")
    red = reduced_fit if reduced_fit is not None else fit_reduced_main(data, family)
    p_a = data.p_a
    diff = red.theta[p_a:] - external.theta_z
    combined = red.cov_sandwich[p_a:, p_a:] + external.v_theta_z() / external.n_ext
    try:
        stat = float(diff @ np.linalg.solve(combined, diff))
    except np.linalg.LinAlgError as exc:
        raise SingularCombinedCovariance("combined covariance is singular") from exc
    if not np.isfinite(stat):
        raise SingularCombinedCovariance("combined covariance is singular")
    return stat, float(chi2.sf(stat, df=data.p_z))


def predict(X, beta, family, response: bool = False) -> np.ndarray:
    """Linear predictor (or mean response) for a coefficient vector."""
    family = get_family(family)
    eta = np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float).ravel()
    return family.mu(eta) if response else eta
