"""Shared data generators for the test suite."""

import numpy as np
import pytest
from scipy.special import expit

import htlgmm as H


def ar1_cov(p, rho=0.5, block=None):
    """AR(1)-within-block covariance (one block when block is None)."""
    if block is None:
        block = p
    sigma = np.zeros((p, p))
    lags = np.abs(np.subtract.outer(np.arange(block), np.arange(block)))
    tile = rho**lags
    for s in range(0, p, block):
        e = min(s + block, p)
        sigma[s:e, s:e] = tile[: e - s, : e - s]
    return sigma


def make_linear_instance(seed, n=200, p_z=3, p_w=5, beta_z=None, beta_w=None, sigma_eps=1.0, rho=0.3):
    """Linear main-study dataset (no design block) plus its truth."""
    rng = np.random.default_rng(seed)
    p = p_z + p_w
    root = np.linalg.cholesky(ar1_cov(p, rho))
    X = rng.standard_normal((n, p)) @ root.T
    if beta_z is None:
        beta_z = np.linspace(0.8, -0.8, p_z)
    if beta_w is None:
        beta_w = np.zeros(p_w)
        beta_w[: min(2, p_w)] = (0.7, -0.5)[: min(2, p_w)]
    beta = np.concatenate([beta_z, beta_w])
    y = X @ beta + sigma_eps * rng.standard_normal(n)
    data = H.Dataset.from_blocks(y, Z=X[:, :p_z], W=X[:, p_z:])
    return data, beta, root


def make_logistic_instance(seed, n=300, p_z=3, p_w=5, intercept=-0.7, beta_z=None, beta_w=None, rho=0.3):
    """Logistic main-study dataset with an intercept design column."""
    rng = np.random.default_rng(seed)
    p = p_z + p_w
    root = np.linalg.cholesky(ar1_cov(p, rho))
    X = rng.standard_normal((n, p)) @ root.T
    if beta_z is None:
        beta_z = np.linspace(0.7, -0.7, p_z)
    if beta_w is None:
        beta_w = np.zeros(p_w)
        beta_w[: min(2, p_w)] = (0.6, -0.4)[: min(2, p_w)]
    beta = np.concatenate([beta_z, beta_w])
    y = (rng.random(n) < expit(intercept + X @ beta)).astype(float)
    data = H.Dataset.from_blocks(y, A=np.ones((n, 1)), Z=X[:, :p_z], W=X[:, p_z:])
    return data, np.concatenate([[intercept], beta]), root


def external_from(seed, data_template, beta_cols, family, n_ext, root):
    """Fit the reduced model on a fresh external draw of the same truth."""
    rng = np.random.default_rng(seed)
    p = root.shape[0]
    X = rng.standard_normal((n_ext, p)) @ root.T
    family = H.get_family(family)
    p_a = data_template.p_a
    eta = X @ beta_cols[p_a:]
    if family.is_logistic:
        icpt = beta_cols[0] if p_a else 0.0
        y = (rng.random(n_ext) < expit(icpt + eta)).astype(float)
        design = np.concatenate([np.ones((n_ext, 1)), X[:, : data_template.p_z]], axis=1)
        fit = H.fit_glm(y, design, family)
        return H.ExternalSummary(fit.theta[1:], fit.cov_sandwich[1:, 1:], n_ext)
    y = eta + rng.standard_normal(n_ext)
    design = np.concatenate([np.ones((n_ext, 1)), X[:, : data_template.p_z]], axis=1)
    fit = H.fit_glm(y, design, family)
    return H.ExternalSummary(fit.theta[1:], fit.cov_sandwich[1:, 1:], n_ext)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
