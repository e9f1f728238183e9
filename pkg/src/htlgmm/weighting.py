"""Asymptotic variance of the stacked moments and the GMM weight matrix.

estimate_variance assembles the plug-in variance of sqrt(n) U_n,
including the correction terms induced by estimating the design-variable
effects on the main study and by the sampling noise of the external
summary.  build_weight turns it into a positive-definite weight C_n,
optionally regularized with a ridge or multiplicative-shrinkage kernel
on the high-dimensional score block, together with its symmetric square
root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    NotPositiveDefinite,
    NotSymmetric,
    SingularGamma,
)
from .glm import Dataset, get_family
from .moments import ExternalSummary, ThetaTilde, _theta_vec, eval_jacobians

EIG_FLOOR_RTOL = 1e-10

WEIGHT_MODES = ("unweighted", "optimal", "ridge", "ms")


@dataclass(frozen=True)
class VarianceBlocks:
    """Plug-in variance of sqrt(n) U_n and all of its ingredients.

    v11/v12/v22 are the blocks of the assembled matrix; the remaining
    fields are the empirical pieces they were built from, kept for
    diagnostics and for re-use by the post-selection sandwich.
    """

    v11: np.ndarray
    v12: np.ndarray
    v22: np.ndarray
    assembled: np.ndarray
    v_xz: np.ndarray
    v_xxr: np.ndarray
    v_zz: np.ndarray
    v_zxr: np.ndarray
    gamma_z_xr: np.ndarray
    gamma_xr_xr: np.ndarray
    v_theta_a: np.ndarray
    v_theta_z: np.ndarray
    r_hat: float

    @property
    def dim(self) -> int:
        return self.assembled.shape[0]


@dataclass(frozen=True)
class WeightSpec:
    """Choice of GMM weight.

    mode: "unweighted" (identity), "optimal" (inverse variance),
    "ridge" (variational kernel K11 = I) or "ms" (variational kernel
    K11 = V11, a constant multiplicative shrinkage of the score block).
    alpha is the kernel tuning value; a tuple means a grid to be tuned
    jointly with the penalty, None means the default data-driven grid.
    With alpha_scaled the given values are multipliers of the anchor
    trace(V11)/p_X rather than absolute levels.
    """

    mode: str = "ms"
    alpha: float | tuple | None = None
    alpha_scaled: bool = False

    def __post_init__(self):
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.mode!r}")
        if isinstance(self.alpha, (int, float)) and self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    @property
    def uses_alpha(self) -> bool:
        return self.mode in ("ridge", "ms")


@dataclass(frozen=True)
class WeightMatrix:
    """Symmetric PD weight C_n with its symmetric square root."""

    c: np.ndarray
    c_half: np.ndarray


def default_alpha_grid(blocks: VarianceBlocks) -> tuple:
    """Scale-free alpha grid anchored to the magnitude of the score block."""
    p_x = blocks.v11.shape[0]
    scale = float(np.trace(blocks.v11)) / max(p_x, 1)
    return tuple(scale * m for m in (0.0, 0.25, 0.5, 1.0, 2.0, 4.0))


def estimate_variance(
    data: Dataset,
    family,
    beta0,
    theta_tilde,
    external: ExternalSummary,
    v_theta_a: np.ndarray,
) -> VarianceBlocks:
    """Assemble the plug-in variance of sqrt(n) U_n at (beta0, theta_tilde).

    v_theta_a is the asymptotic covariance of sqrt(n) times the
    main-study design-effect estimate, i.e. n times the sandwich block
    of the reduced main-study fit.
    """
    family = get_family(family)
    n, p_a, p_z = data.n, data.p_a, data.p_z
    beta0 = np.asarray(beta0, dtype=float).ravel()
    if beta0.size != data.p_x:
        raise DimensionMismatch("beta0 has wrong length")
    theta = _theta_vec(theta_tilde, p_a + p_z)
    if external.p_z != p_z:
        raise DimensionMismatch("external summary does not match p_Z")
    v_theta_a = np.atleast_2d(np.asarray(v_theta_a, dtype=float))
    if v_theta_a.shape != (p_a, p_a):
        raise DimensionMismatch("v_theta_a must be p_A x p_A")

    X, Z, XR = data.X, data.Z, data.XR
    mu_x = family.mu(X @ beta0)
    mu_r = family.mu(XR @ theta)
    e_x = mu_x - data.y          # U1 residual
    e_z = mu_x - mu_r            # U2 residual
    e_3 = mu_r - data.y          # U3 residual

    xe = X * e_x[:, None]
    ze = Z * e_z[:, None]
    re = XR * e_3[:, None]
    v_xx = xe.T @ xe / n
    v_zz = ze.T @ ze / n
    v_xz = xe.T @ ze / n
    v_xxr = xe.T @ re / n
    v_zxr = ze.T @ re / n

    d_r = family.mu_prime(XR @ theta)
    xr_w = XR * d_r[:, None]
    gamma_xr_xr = XR.T @ xr_w / n
    gamma_xr_xr = 0.5 * (gamma_xr_xr + gamma_xr_xr.T)
    gamma_z_xr = Z.T @ xr_w / n

    r_hat = external.n_ext / n
    v_theta_z = external.v_theta_z()
    mid = np.zeros((p_a + p_z, p_a + p_z))
    if p_a:
        mid[:p_a, :p_a] = v_theta_a
    mid[p_a:, p_a:] = v_theta_z / r_hat
    v22 = v_zz + gamma_z_xr @ mid @ gamma_z_xr.T

    if p_a:
        # Gamma^{x_R,a}: leading p_A columns of the inverse of Gamma_{x_R,x_R}
        if _min_eig_ratio(gamma_xr_xr) < EIG_FLOOR_RTOL:
            raise SingularGamma("reduced-model Jacobian is singular")
        gamma_inv_a = np.linalg.solve(gamma_xr_xr, np.eye(p_a + p_z)[:, :p_a])
        gamma_az = gamma_xr_xr[:p_a, p_a:]
        corr_x = v_xxr @ gamma_inv_a @ gamma_az
        corr_z = v_zxr @ gamma_inv_a @ gamma_az
        v12 = v_xz + corr_x
        v22 = v22 + corr_z + corr_z.T
    else:
        v12 = v_xz

    v11 = 0.5 * (v_xx + v_xx.T)
    v22 = 0.5 * (v22 + v22.T)
    assembled = np.block([[v11, v12], [v12.T, v22]])
    assembled = 0.5 * (assembled + assembled.T)

    return VarianceBlocks(
        v11=v11,
        v12=v12,
        v22=v22,
        assembled=assembled,
        v_xz=v_xz,
        v_xxr=v_xxr,
        v_zz=v_zz,
        v_zxr=v_zxr,
        gamma_z_xr=gamma_z_xr,
        gamma_xr_xr=gamma_xr_xr,
        v_theta_a=v_theta_a,
        v_theta_z=v_theta_z,
        r_hat=r_hat,
    )


def _min_eig_ratio(m: np.ndarray) -> float:
    w = np.linalg.eigvalsh(m)
    top = w[-1]
    if top <= 0:
        return 0.0
    return max(w[0], 0.0) / top


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues are clamped to zero.  Raises NotSymmetric when
    the input is asymmetric beyond 1e-8 (relative to its magnitude).
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch("matrix_sqrt_psd needs a square matrix")
    scale = 1.0 + np.max(np.abs(m)) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.T)) > 1e-8 * scale:
        raise NotSymmetric("matrix is not symmetric")
    w, q = np.linalg.eigh(0.5 * (m + m.T))
    root = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
    return 0.5 * (root + root.T)


def inverse_floored(m: np.ndarray) -> WeightMatrix:
    """Inverse of a symmetric matrix with eigenvalues floored at
    EIG_FLOOR_RTOL times the top eigenvalue, plus its symmetric root."""
    w, q = np.linalg.eigh(0.5 * (m + m.T))
    top = w[-1]
    if top <= 0:
        raise NotPositiveDefinite("no positive spectrum to invert")
    w = np.maximum(w, EIG_FLOOR_RTOL * top)
    c = (q / w) @ q.T
    c_half = (q / np.sqrt(w)) @ q.T
    return WeightMatrix(c=0.5 * (c + c.T), c_half=0.5 * (c_half + c_half.T))


def build_weight(blocks: VarianceBlocks, spec: WeightSpec, alpha: float | None = None) -> WeightMatrix:
    """Weight matrix C_n = (V + alpha K)^{-1} for the requested kernel.

    alpha overrides spec.alpha when given (the driver loops over a grid).
    For "unweighted" the result is the identity; for "optimal" the kernel
    term is dropped.  Inversion floors eigenvalues at a relative
    threshold so that rank-deficient V (n <= p_X + p_Z) stays usable.
    """
    dim = blocks.dim
    if spec.mode == "unweighted":
        eye = np.eye(dim)
        return WeightMatrix(c=eye, c_half=eye.copy())

    m = blocks.assembled
    if spec.uses_alpha:
        if alpha is None:
            alpha = spec.alpha if isinstance(spec.alpha, (int, float)) else None
        if alpha is None:
            raise ValueError("variational weight needs a concrete alpha")
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        p_x = blocks.v11.shape[0]
        k11 = np.eye(p_x) if spec.mode == "ridge" else blocks.v11
        m = m.copy()
        m[:p_x, :p_x] += alpha * k11
    return inverse_floored(m)
