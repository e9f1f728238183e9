"""GLM families (linear, logistic) and unpenalized maximum-likelihood fitting.

The family object bundles the mean function mu = psi', its derivative and
the cumulant psi.  Linear models are fitted in a single least-squares
solve; logistic models use IRLS with step-halving.  Fits expose both a
model-based covariance (inverse information, already on the scale of the
estimate, i.e. divided by n) and a robust sandwich covariance on the same
scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    InvalidOutcome,
    NonConvergence,
    NonFiniteInput,
    SingularDesign,
)

PIVOT_RTOL = 1e-10


@dataclass(frozen=True)
class GlmFamily:
    """A one-parameter exponential-family regression model.

    kind is "linear" (identity mean, cumulant s^2/2) or "logistic"
    (expit mean, cumulant log(1+e^s)).
    """

    kind: str

    def __post_init__(self):
        if self.kind not in ("linear", "logistic"):
            raise ValueError(f"unknown family kind {self.kind!r}")

    @property
    def is_logistic(self) -> bool:
        return self.kind == "logistic"

    def mu(self, s):
        """Mean function mu(s) = d psi / d s."""
        s = np.asarray(s, dtype=float)
        return expit(s) if self.is_logistic else s

    def mu_prime(self, s):
        """Derivative of the mean function; constant 1 for linear."""
        s = np.asarray(s, dtype=float)
        if self.is_logistic:
            p = expit(s)
            return p * (1.0 - p)
        return np.ones_like(s)

    def psi(self, s):
        """Cumulant function."""
        s = np.asarray(s, dtype=float)
        if self.is_logistic:
            return np.logaddexp(0.0, s)
        return 0.5 * s * s

    def log_likelihood(self, y, eta):
        """Log likelihood up to the y-only base measure."""
        return float(np.sum(y * eta - self.psi(eta)))


LINEAR = GlmFamily("linear")
LOGISTIC = GlmFamily("logistic")


def get_family(spec) -> GlmFamily:
    """Resolve a GlmFamily from an instance or its kind string."""
    if isinstance(spec, GlmFamily):
        return spec
    if spec in ("linear", "gaussian"):
        return LINEAR
    if spec in ("logistic", "binomial"):
        return LOGISTIC
    raise ValueError(f"unknown family {spec!r}")


@dataclass(frozen=True)
class Dataset:
    """Main-study outcomes plus covariates with an [A | Z | W] column split.

    A holds study-specific design variables (e.g. an intercept), Z the
    covariates shared with the external study, W the main-study-only
    covariates.  The reduced design is the column slice [A | Z].
    """

    y: np.ndarray
    X: np.ndarray
    a_idx: np.ndarray
    z_idx: np.ndarray
    w_idx: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(np.asarray(self.y, dtype=float).ravel())
        X = np.ascontiguousarray(np.asarray(self.X, dtype=float))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        for name in ("a_idx", "z_idx", "w_idx"):
            idx = np.asarray(getattr(self, name), dtype=np.intp).ravel()
            object.__setattr__(self, name, idx)
        if X.ndim != 2:
            raise DimensionMismatch("X must be a 2-d array")
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        if y.shape[0] < 1:
            raise DimensionMismatch("need at least one observation")
        if not (np.isfinite(y).all() and np.isfinite(X).all()):
            raise NonFiniteInput("Dataset contains non-finite entries")
        all_idx = np.concatenate([self.a_idx, self.z_idx, self.w_idx])
        if len(np.unique(all_idx)) != all_idx.size or sorted(all_idx) != list(
            range(X.shape[1])
        ):
            raise DimensionMismatch(
                "partition must cover all columns exactly once"
            )

    @classmethod
    def from_blocks(cls, y, A=None, Z=None, W=None) -> "Dataset":
        """Assemble a dataset from (possibly empty) A, Z, W column blocks."""
        n = len(np.asarray(y).ravel())
        blocks, sizes = [], []
        for block in (A, Z, W):
            b = np.zeros((n, 0)) if block is None else np.atleast_2d(np.asarray(block, dtype=float))
            if b.shape[0] != n:
                b = b.T
            blocks.append(b)
            sizes.append(b.shape[1])
        X = np.hstack(blocks)
        bounds = np.cumsum([0] + sizes)
        return cls(
            y=y,
            X=X,
            a_idx=np.arange(bounds[0], bounds[1]),
            z_idx=np.arange(bounds[1], bounds[2]),
            w_idx=np.arange(bounds[2], bounds[3]),
        )

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_x(self) -> int:
        return self.X.shape[1]

    @property
    def p_a(self) -> int:
        return self.a_idx.size

    @property
    def p_z(self) -> int:
        return self.z_idx.size

    @property
    def p_w(self) -> int:
        return self.w_idx.size

    @property
    def xr_idx(self) -> np.ndarray:
        """Column indices of the reduced design, in [A | Z] order."""
        return np.concatenate([self.a_idx, self.z_idx])

    @property
    def A(self) -> np.ndarray:
        return self.X[:, self.a_idx]

    @property
    def Z(self) -> np.ndarray:
        return self.X[:, self.z_idx]

    @property
    def W(self) -> np.ndarray:
        return self.X[:, self.w_idx]

    @property
    def XR(self) -> np.ndarray:
        return self.X[:, self.xr_idx]

    def subset(self, rows) -> "Dataset":
        """Row subset with the same column partition."""
        return Dataset(
            y=self.y[rows],
            X=self.X[rows],
            a_idx=self.a_idx,
            z_idx=self.z_idx,
            w_idx=self.w_idx,
        )


@dataclass(frozen=True)
class GlmFit:
    """Unpenalized GLM fit.

    cov_model is the inverse (weighted) information of the estimate
    itself (variance of theta-hat); cov_sandwich is the robust
    Gamma^-1 V Gamma^-T / n estimate on the same scale, which is the
    default covariance consumed downstream.
    """

    theta: np.ndarray
    cov_model: np.ndarray
    cov_sandwich: np.ndarray
    converged: bool
    iterations: int

    @property
    def se_sandwich(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_sandwich))


def _check_full_rank(X: np.ndarray) -> None:
    """Pivoted QR rank diagnosis with a relative pivot threshold."""
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise SingularDesign(
            f"design has {X.shape[0]} rows for {X.shape[1]} columns"
        )
    R = qr(X, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(R))
    if d[0] == 0.0 or d[-1] < PIVOT_RTOL * d[0]:
        raise SingularDesign("design matrix is rank deficient")


def _empty_fit() -> GlmFit:
    z = np.zeros((0, 0))
    return GlmFit(np.zeros(0), z, z, True, 0)


def _covariances(X, resid, dvec):
    """Model and sandwich covariances from residuals and weights."""
    n = X.shape[0]
    gamma = X.T @ (X * dvec[:, None]) / n
    v_score = (X * resid[:, None]).T @ (X * resid[:, None]) / n
    gamma_inv = np.linalg.inv(gamma)
    cov_model = gamma_inv / n
    cov_sandwich = gamma_inv @ v_score @ gamma_inv.T / n
    cov_sandwich = 0.5 * (cov_sandwich + cov_sandwich.T)
    return cov_model, cov_sandwich


def fit_glm(
    y,
    X,
    family,
    max_iter: int = 100,
    tol_coef: float = 1e-8,
    tol_score: float = 1e-6,
    raise_on_nonconvergence: bool = True,
) -> GlmFit:
    """Fit a linear or logistic regression by least squares / IRLS.

    The returned estimate satisfies max |mean score| <= tol_score, where
    the score is (1/n) sum_i {mu(x_i' theta) - y_i} x_i.  Logistic fits
    halve the Newton step (up to 30 times) whenever the log likelihood
    would decrease.

    Raises SingularDesign for rank-deficient designs, InvalidOutcome for
    logistic outcomes outside {0, 1}, and NonConvergence when max_iter is
    exhausted (e.g. quasi-separation).
    """
    family = get_family(family)
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("y and X do not align")
    if not (np.isfinite(y).all() and np.isfinite(X).all()):
        raise NonFiniteInput("fit_glm received non-finite input")
    if X.shape[1] == 0:
        return _empty_fit()
    _check_full_rank(X)
    n = X.shape[0]

    if not family.is_logistic:
        theta, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = X @ theta - y
        _, cov_sandwich = _covariances(X, resid, np.ones(n))
        dof = max(n - X.shape[1], 1)
        sigma2 = resid @ resid / dof
        cov_model = sigma2 * np.linalg.inv(X.T @ X)
        return GlmFit(theta, cov_model, cov_sandwich, True, 1)

    if not np.isin(y, (0.0, 1.0)).all():
        raise InvalidOutcome("logistic outcome must be coded 0/1")

    theta = np.zeros(X.shape[1])
    eta = X @ theta
    loglik = family.log_likelihood(y, eta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-10)
        # one Newton step via weighted least squares on the working response
        grad = X.T @ (y - p)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(30):
            cand = theta + scale * step
            cand_ll = family.log_likelihood(y, X @ cand)
            if cand_ll >= loglik - 1e-12 * (1.0 + abs(loglik)):
                break
            scale *= 0.5
        else:
            break
        delta = scale * step
        theta = theta + delta
        eta = X @ theta
        loglik = family.log_likelihood(y, eta)
        score_ok = np.max(np.abs(X.T @ (expit(eta) - y) / n)) <= tol_score
        coef_ok = np.max(np.abs(delta)) <= tol_coef * (1.0 + np.max(np.abs(theta)))
        if score_ok and coef_ok:
            converged = True
            break
    if not converged and raise_on_nonconvergence:
        raise NonConvergence(
            f"logistic IRLS did not converge in {max_iter} iterations"
        )
    p = expit(eta)
    cov_model, cov_sandwich = _covariances(X, p - y, p * (1.0 - p))
    return GlmFit(theta, cov_model, cov_sandwich, converged, it)


def fit_reduced_main(data: Dataset, family, **kwargs) -> GlmFit:
    """Fit the reduced model (outcome on [A | Z]) to the main study.

    The leading p_A coordinates of the estimate are the design-variable
    effects; the trailing p_Z coordinates sit on the shared covariates.
    """
    return fit_glm(data.y, data.XR, family, **kwargs)
