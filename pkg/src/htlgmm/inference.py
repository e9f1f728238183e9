"""Post-selection inference for the adaptive-lasso estimator.

Standard errors come from a bread-meat-bread sandwich built on the
pseudo design at the final estimate, with the moment variance
re-evaluated there as well.  Wald intervals and p-values follow, plus
step-up Benjamini-Hochberg adjustment for FDR control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import (
    DimensionMismatch,
    EmptySupport,
    InvalidPValue,
    SingularBread,
)
from .glm import Dataset, get_family
from .moments import eval_jacobians, _theta_vec
from .weighting import VarianceBlocks, WeightMatrix


@dataclass(frozen=True)
class InferenceReport:
    """Per-selected-coefficient inference summary.

    sigma_hat is the covariance of the sqrt(n)-scaled selected
    coefficients, so se = sqrt(diag(sigma_hat) / n).
    """

    support: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    q_values: np.ndarray
    sigma_hat: np.ndarray
    level: float


def sandwich_sigma(
    data: Dataset,
    family,
    beta_hat,
    support,
    theta_tilde,
    weight: WeightMatrix,
    blocks: VarianceBlocks,
) -> np.ndarray:
    """Sandwich covariance of the sqrt(n)-scaled selected coefficients.

    blocks must be the moment variance re-evaluated at beta_hat.  With
    the near-optimal weight (inverse regularized variance) this
    approaches the efficient covariance as the kernel tuning vanishes.
    """
    family = get_family(family)
    beta_hat = np.asarray(beta_hat, dtype=float).ravel()
    support = np.asarray(support, dtype=np.intp).ravel()
    if support.size == 0:
        raise EmptySupport("no selected coefficients to infer on")
    if beta_hat.size != data.p_x:
        raise DimensionMismatch("beta_hat has wrong length")
    theta = _theta_vec(theta_tilde, data.p_a + data.p_z)

    me = eval_jacobians(data, family, beta_hat, theta)
    x_ps = np.sqrt(data.n) * (weight.c_half @ me.jac_beta)
    xa = x_ps[:, support]
    bread = xa.T @ xa
    cvc = weight.c_half @ blocks.assembled @ weight.c_half
    meat = xa.T @ cvc @ xa
    try:
        tmp = np.linalg.solve(bread, meat)
        sigma = np.linalg.solve(bread, tmp.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularBread("selected-block Gram matrix is singular") from exc
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularBread("selected-block Gram matrix is singular")
    sigma = data.n * 0.5 * (sigma + sigma.T)
    return sigma


def wald_inference(beta_hat, sigma_hat, n: int, level: float = 0.95, support=None) -> InferenceReport:
    """Wald intervals and two-sided p-values from a sandwich covariance.

    beta_hat holds the selected coefficients in the order matching
    sigma_hat; q-values are the step-up BH adjustment of the p-values.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    beta_hat = np.asarray(beta_hat, dtype=float).ravel()
    sigma_hat = np.atleast_2d(np.asarray(sigma_hat, dtype=float))
    if sigma_hat.shape != (beta_hat.size, beta_hat.size):
        raise DimensionMismatch("sigma_hat does not match beta_hat")
    if support is None:
        support = np.arange(beta_hat.size)
    support = np.asarray(support, dtype=np.intp).ravel()
    se = np.sqrt(np.clip(np.diag(sigma_hat), 0.0, None) / n)
    z = norm.ppf(1.0 - (1.0 - level) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(se > 0, np.abs(beta_hat) / se, np.inf)
    p = 2.0 * norm.sf(stat)
    p = np.where(np.abs(beta_hat) == 0.0, 1.0, p)
    q, _ = bh_adjust(p, 0.05)
    return InferenceReport(
        support=support,
        se=se,
        ci_lower=beta_hat - z * se,
        ci_upper=beta_hat + z * se,
        p_values=p,
        q_values=q,
        sigma_hat=sigma_hat,
        level=level,
    )


def bh_adjust(p_values, q_level: float = 0.05):
    """Step-up Benjamini-Hochberg adjustment.

    Returns (q_values, rejected) where rejected is a boolean mask of
    hypotheses with q <= q_level.
    """
    p = np.asarray(p_values, dtype=float).ravel()
    if p.size == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidPValue("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q_sorted = np.minimum(q_sorted, 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    return q, q <= q_level
