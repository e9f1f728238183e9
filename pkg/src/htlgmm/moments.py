"""Stacked estimating functions and their Jacobian blocks.

U1 is the full-model score, U2 the calibration moments linking the full
model to the reduced model on the shared covariates Z, and U3 the
reduced-model score on the main study.  All sample averages are
normalized by the main-study n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteInput
from .glm import Dataset, get_family


@dataclass(frozen=True)
class ThetaTilde:
    """Plug-in reduced-model parameters: main-study design effects stacked
    over the external estimates for the shared covariates."""

    theta_a: np.ndarray
    theta_z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta_a", np.asarray(self.theta_a, dtype=float).ravel())
        object.__setattr__(self, "theta_z", np.asarray(self.theta_z, dtype=float).ravel())
        if not (np.isfinite(self.theta_a).all() and np.isfinite(self.theta_z).all()):
            raise NonFiniteInput("ThetaTilde contains non-finite entries")

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.theta_a, self.theta_z])


@dataclass(frozen=True)
class ExternalSummary:
    """Summary-level reduced-model output from the external study.

    cov_theta_z follows the convention reported by standard software: it
    is the raw covariance of the estimate itself.  Set scaled=True if it
    is already the covariance of the sqrt(n_ext)-scaled estimator.
    """

    theta_z: np.ndarray
    cov_theta_z: np.ndarray
    n_ext: int
    scaled: bool = False

    def __post_init__(self):
        theta = np.asarray(self.theta_z, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.cov_theta_z, dtype=float))
        object.__setattr__(self, "theta_z", theta)
        object.__setattr__(self, "cov_theta_z", cov)
        if theta.size == 0:
            cov = cov.reshape(0, 0)
            object.__setattr__(self, "cov_theta_z", cov)
        if cov.shape != (theta.size, theta.size):
            raise DimensionMismatch("cov_theta_z must be p_Z x p_Z")
        if not (np.isfinite(theta).all() and np.isfinite(cov).all()):
            raise NonFiniteInput("ExternalSummary contains non-finite entries")
        if cov.size and np.max(np.abs(cov - cov.T)) > 1e-8 * (1.0 + np.max(np.abs(cov))):
            raise DimensionMismatch("cov_theta_z must be symmetric")
        if self.n_ext < 1:
            raise DimensionMismatch("n_ext must be at least 1")

    @property
    def p_z(self) -> int:
        return self.theta_z.size

    def v_theta_z(self) -> np.ndarray:
        """Covariance of the sqrt(n_ext)-scaled external estimator."""
        return self.cov_theta_z if self.scaled else self.n_ext * self.cov_theta_z


@dataclass(frozen=True)
class MomentEval:
    """Stacked moments with the Jacobian and reduced-model Gamma blocks."""

    u1: np.ndarray
    u2: np.ndarray
    jac_beta: np.ndarray      # (p_X + p_Z) x p_X, d U / d beta
    gamma_z_xr: np.ndarray    # p_Z x (p_A + p_Z)
    gamma_xr_xr: np.ndarray   # (p_A + p_Z) square, symmetric PSD

    @property
    def u_stacked(self) -> np.ndarray:
        return np.concatenate([self.u1, self.u2])


def _theta_vec(theta, expected: int) -> np.ndarray:
    vec = theta.stacked if isinstance(theta, ThetaTilde) else np.asarray(theta, dtype=float).ravel()
    if vec.size != expected:
        raise DimensionMismatch(f"theta has length {vec.size}, expected {expected}")
    return vec


def _beta_vec(beta, expected: int) -> np.ndarray:
    vec = np.asarray(beta, dtype=float).ravel()
    if vec.size != expected:
        raise DimensionMismatch(f"beta has length {vec.size}, expected {expected}")
    return vec


def eval_u1(data: Dataset, family, beta) -> np.ndarray:
    """Full-model score (1/n) sum {mu(x'beta) - y} x."""
    family = get_family(family)
    beta = _beta_vec(beta, data.p_x)
    resid = family.mu(data.X @ beta) - data.y
    return data.X.T @ resid / data.n


def eval_u2(data: Dataset, family, beta, theta_tilde) -> np.ndarray:
    """Calibration moments (1/n) sum {mu(x'beta) - mu(x_R'theta)} z."""
    family = get_family(family)
    beta = _beta_vec(beta, data.p_x)
    theta = _theta_vec(theta_tilde, data.p_a + data.p_z)
    diff = family.mu(data.X @ beta) - family.mu(data.XR @ theta)
    return data.Z.T @ diff / data.n


def eval_u3(data: Dataset, family, theta) -> np.ndarray:
    """Reduced-model score (1/n) sum {mu(x_R'theta) - y} x_R."""
    family = get_family(family)
    theta = _theta_vec(theta, data.p_a + data.p_z)
    resid = family.mu(data.XR @ theta) - data.y
    return data.XR.T @ resid / data.n


def eval_jacobians(data: Dataset, family, beta, theta) -> MomentEval:
    """Moments plus Jacobian/Gamma blocks at (beta, theta).

    jac_beta = (1/n) [X, Z]' D(beta) X with D = diag mu'(X beta); the
    Gamma blocks use D_R = diag mu'(X_R theta).  For the linear family
    both weight matrices are the identity.
    """
    family = get_family(family)
    beta = _beta_vec(beta, data.p_x)
    theta = _theta_vec(theta, data.p_a + data.p_z)
    n = data.n
    X, Z, XR = data.X, data.Z, data.XR

    d = family.mu_prime(X @ beta)
    dx = X * d[:, None]
    jac_beta = np.vstack([X.T @ dx, Z.T @ dx]) / n

    d_r = family.mu_prime(XR @ theta)
    xr_w = XR * d_r[:, None]
    gamma_xr_xr = XR.T @ xr_w / n
    gamma_xr_xr = 0.5 * (gamma_xr_xr + gamma_xr_xr.T)
    gamma_z_xr = Z.T @ xr_w / n

    return MomentEval(
        u1=eval_u1(data, family, beta),
        u2=eval_u2(data, family, beta, theta),
        jac_beta=jac_beta,
        gamma_z_xr=gamma_z_xr,
        gamma_xr_xr=gamma_xr_xr,
    )
