"""Penalized-GMM transfer learning for high-dimensional GLMs.

Fuses individual-level data from a main study with summary-level
reduced-model coefficients from a larger external study through
calibration moment conditions, solved as a one-step penalized
least-squares problem with a regularized optimal weight matrix.
"""

from .driver import FitConfig, FitReport, fit, fit_main_only, predict, transportability_check
from .glm import Dataset, GlmFamily, GlmFit, LINEAR, LOGISTIC, fit_glm, fit_reduced_main, get_family
from .inference import InferenceReport, bh_adjust, sandwich_sigma, wald_inference
from .metrics import auc_score, eval_metrics, r_squared
from .moments import ExternalSummary, MomentEval, ThetaTilde, eval_jacobians, eval_u1, eval_u2, eval_u3
from .pseudo import PseudoProblem, build_pseudo, gmm_objective
from .simulation import (
    SimConfig,
    SimReport,
    SimTruth,
    build_covariance,
    calibrate_effects,
    plan_truth,
    run_study,
    simulate_dataset,
)
from .solver import (
    CvReport,
    PenaltySpec,
    SolvePath,
    adaptive_weights,
    coordinate_descent,
    cross_validate,
    fit_penalized_glm,
    fit_penalized_glm_path,
    kkt_check,
    lambda_path,
    make_folds,
)
from .weighting import (
    VarianceBlocks,
    WeightMatrix,
    WeightSpec,
    build_weight,
    estimate_variance,
    matrix_sqrt_psd,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ExternalSummary",
    "FitConfig",
    "FitReport",
    "GlmFamily",
    "GlmFit",
    "InferenceReport",
    "LINEAR",
    "LOGISTIC",
    "MomentEval",
    "PenaltySpec",
    "PseudoProblem",
    "SimConfig",
    "SimReport",
    "SimTruth",
    "SolvePath",
    "CvReport",
    "ThetaTilde",
    "VarianceBlocks",
    "WeightMatrix",
    "WeightSpec",
    "adaptive_weights",
    "auc_score",
    "bh_adjust",
    "build_covariance",
    "build_pseudo",
    "build_weight",
    "calibrate_effects",
    "coordinate_descent",
    "cross_validate",
    "estimate_variance",
    "eval_jacobians",
    "eval_metrics",
    "eval_u1",
    "eval_u2",
    "eval_u3",
    "fit",
    "fit_glm",
    "fit_main_only",
    "fit_penalized_glm",
    "fit_penalized_glm_path",
    "fit_reduced_main",
    "get_family",
    "gmm_objective",
    "kkt_check",
    "lambda_path",
    "make_folds",
    "matrix_sqrt_psd",
    "plan_truth",
    "predict",
    "r_squared",
    "run_study",
    "sandwich_sigma",
    "simulate_dataset",
    "transportability_check",
    "wald_inference",
]
