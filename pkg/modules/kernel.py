"""
HOLD Kernel Module
==================
Closed-form mathematics of the third-order Langevin forward process

    dq = p dt
    dp = -q dt + gamma s dt
    ds = -gamma p dt - xi s dt + sqrt(2 xi / L) dw

written per dimension as dx = F x dt + G dw with the 3x3 drift F and
G G^T = diag(0, 0, 2 xi / L). The full 3d-dimensional process is F (x) I_d,
so every quantity here is a 3x3 kernel broadcast over the d coordinates;
no 3d x 3d matrix is ever built.

Array conventions:
    - phase arrays have shape (..., 3, d): rows are the q, p, s blocks
    - time arguments are scalars or arrays broadcast against the leading axes
    - 3x3 kernels evaluated at an array of times have shape (..., 3, 3)

With xi=6 and gamma=sqrt(10) the drift has spectrum {-1, -2, -3}, which is
what makes the exponential, the transition covariance and the Cholesky
factor available in closed form.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import softmax

from modules.errors import NotPositiveDefinite, TimeOutOfRange
from modules.hold_config import HoldParams

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# =============================================================================
# CONSTANTS
# =============================================================================
SPECTRUM = np.array([-1.0, -2.0, -3.0])
PIVOT_THRESHOLD = 1e-14  # chol3 rejects pivots at or below this
SPECTRUM_TOLERANCE = 1e-9
DIRECTIONS = ("forward", "reverse", "split")

# D F D with D = diag(1, -1, 1) gives the split-step drift
_SIGN_FLIP = np.diag([1.0, -1.0, 1.0])


# =============================================================================
# DOMAIN TYPES
# =============================================================================
@dataclass(frozen=True)
class PhaseState:
    """
    Position, momentum and acceleration blocks of the SDE state.

    Each block has shape (..., d); all blocks share the same shape.
    """
    q: np.ndarray
    p: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.q), np.shape(self.p), np.shape(self.s)}
        if len(shapes) != 1:
            raise ValueError(f"q, p, s blocks must share one shape, got {sorted(shapes)}")
        if np.ndim(self.q) == 0 or np.shape(self.q)[-1] < 1:
            raise ValueError("phase blocks need a trailing dimension d >= 1")

    @property
    def d(self) -> int:
        return int(np.shape(self.q)[-1])

    def as_array(self) -> np.ndarray:
        """Stack into a (..., 3, d) phase array."""
        return np.stack([self.q, self.p, self.s], axis=-2).astype(np.float64)

    @classmethod
    def from_array(cls, x: np.ndarray) -> "PhaseState":
        x = np.asarray(x, dtype=np.float64)
        return cls(q=x[..., 0, :], p=x[..., 1, :], s=x[..., 2, :])

    @classmethod
    def from_position(cls, q0: np.ndarray) -> "PhaseState":
        """State with the given positions and zero momentum/acceleration (BCSM mean)."""
        q0 = np.asarray(q0, dtype=np.float64)
        zeros = np.zeros_like(q0)
        return cls(q=q0, p=zeros, s=zeros.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.s)))


@dataclass(frozen=True)
class KernelMoments:
    """Mean (..., 3, d) and per-dimension covariance (..., 3, 3) of x_t given x_0."""
    mu: np.ndarray
    sigma: np.ndarray
    t: ArrayLike


# =============================================================================
# DRIFT AND MATRIX EXPONENTIAL
# =============================================================================
def drift_matrix(params: HoldParams, direction: str = "forward") -> np.ndarray:
    """
    Scalar drift kernel (the full drift is this matrix Kronecker I_d).

    Args:
        params: Kernel hyperparameters
        direction: "forward" for F, "reverse" for -F, "split" for the drift of
                   the exactly solvable part of the generative dynamics
                   [[0,-1,0],[1,0,-gamma],[0,gamma,-xi]]

    Returns:
        3x3 drift matrix
    """
    g, xi = params.gamma, params.xi
    forward = np.array([
        [0.0, 1.0, 0.0],
        [-1.0, 0.0, g],
        [0.0, -g, -xi],
    ])
    if direction == "forward":
        return forward
    if direction == "reverse":
        return -forward
    if direction == "split":
        return _SIGN_FLIP @ forward @ _SIGN_FLIP
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _spectrum_of(mat: np.ndarray) -> np.ndarray:
    """Return {-1,-2,-3} or {1,2,3} if the characteristic polynomial matches."""
    coeffs = np.poly(np.asarray(mat, dtype=np.float64))
    for sign in (1.0, -1.0):
        lams = sign * SPECTRUM
        if np.allclose(coeffs, np.poly(lams), atol=SPECTRUM_TOLERANCE, rtol=0.0):
            return lams
    raise ValueError(
        "closed-form exponential needs spectrum {-1,-2,-3} (or {1,2,3}); "
        f"characteristic polynomial is {coeffs}"
    )


def putzer_coefficients(mat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Spectral projectors of a 3x3 matrix with three distinct known eigenvalues.

    exp(tM) = sum_k exp(lambda_k t) C_k with
    C_k = prod_{j != k} (M - lambda_j I) / (lambda_k - lambda_j).

    Returns:
        Tuple of (eigenvalues (3,), projectors (3, 3, 3))
    """
    mat = np.asarray(mat, dtype=np.float64)
    lams = _spectrum_of(mat)
    eye = np.eye(3)
    projectors = np.empty((3, 3, 3))
    for k in range(3):
        c = eye.copy()
        for j in range(3):
            if j != k:
                c = c @ (mat - lams[j] * eye) / (lams[k] - lams[j])
        projectors[k] = c
    return lams, projectors


def _as_time(t: ArrayLike, name: str = "t") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise TimeOutOfRange(f"{name} must be finite")
    return t


def expm_scalar_kernel(mat: np.ndarray, t: ArrayLike) -> np.ndarray:
    """
    Closed-form exp(t * mat) as three-term exponential sums per entry.

    For the forward drift the (1,1) entry is 2.5 e^-t - 2 e^-2t + 0.5 e^-3t.

    Args:
        mat: 3x3 matrix with spectrum {-1,-2,-3} (or {1,2,3})
        t: time, scalar or array (..., )

    Returns:
        Array (..., 3, 3)

    Raises:
        TimeOutOfRange: if any t < 0
    """
    t = _as_time(t)
    if np.any(t < 0):
        raise TimeOutOfRange(f"matrix exponential needs t >= 0, got min t = {t.min():.6g}")
    lams, projectors = putzer_coefficients(mat)
    weights = np.exp(np.multiply.outer(t, lams))
    return np.einsum("...k,kij->...ij", weights, projectors)


def diffusion_covariance(mat: np.ndarray, params: HoldParams, t: ArrayLike) -> np.ndarray:
    """
    Accumulated noise covariance int_0^t exp(uM) G G^T exp(uM)^T du.

    Only the last column of exp(uM) meets the noise, so the integrand is
    (2 xi / L) sum_{k,m} c_k c_m^T exp((lambda_k + lambda_m) u) with
    c_k the last column of projector k. Each exponential integrates exactly
    to expm1(b t) / b.

    Returns:
        Array (..., 3, 3), symmetric
    """
    t = _as_time(t)
    lams, projectors = putzer_coefficients(mat)
    cols = projectors[:, :, 2]                      # (3 terms, 3 rows)
    rates = lams[:, None] + lams[None, :]           # never zero for these spectra
    weights = np.expm1(np.multiply.outer(t, rates)) / rates
    cov = params.noise_rate * np.einsum("...km,ki,mj->...ij", weights, cols, cols)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def bcsm_initial_covariance(params: HoldParams, q_var: float = 0.0) -> np.ndarray:
    """Sigma0 = diag(q_var, alpha/L, alpha/L); q_var=0 is the BCSM conditioning."""
    return np.diag([q_var, params.init_var, params.init_var])


# =============================================================================
# TRANSITION MOMENTS
# =============================================================================
def _check_horizon(params: HoldParams, t: np.ndarray, lower: float = 0.0) -> None:
    if np.any(t < lower) or np.any(t > params.T):
        raise TimeOutOfRange(
            f"t must lie in [{lower:.6g}, T={params.T:.6g}], got range "
            f"[{float(np.min(t)):.6g}, {float(np.max(t)):.6g}]"
        )


def transition_moments(
    params: HoldParams,
    x0_mean: np.ndarray,
    sigma0: np.ndarray,
    t: ArrayLike,
    direction: str = "forward",
) -> KernelMoments:
    """
    Mean and covariance of the Gaussian transition p(x_t | x_0).

    mu_t = exp(tF) mu_0
    Sigma_t = exp(tF) Sigma_0 exp(tF)^T + int_0^t exp(uF) G G^T exp(uF)^T du

    Args:
        params: Kernel hyperparameters
        x0_mean: initial mean, shape (3,) or (..., 3, d)
        sigma0: initial per-dimension covariance, 3x3 or its diagonal (3,)
        t: time(s) in [0, T]
        direction: drift used ("forward" or "split")

    Returns:
        KernelMoments with mu shaped like x0_mean (broadcast against t) and
        sigma (..., 3, 3)

    Raises:
        TimeOutOfRange: t outside [0, T]
    """
    t = _as_time(t)
    _check_horizon(params, t)
    sigma0 = np.asarray(sigma0, dtype=np.float64)
    if sigma0.shape == (3,):
        sigma0 = np.diag(sigma0)
    if np.any(np.diag(sigma0) < 0):
        raise ValueError("sigma0 diagonal must be nonnegative")

    mat = drift_matrix(params, direction)
    expm = expm_scalar_kernel(mat, t)
    mu = np.matmul(expm, np.asarray(x0_mean, dtype=np.float64))
    sigma = expm @ sigma0 @ np.swapaxes(expm, -1, -2) + diffusion_covariance(mat, params, t)
    sigma = 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
    return KernelMoments(mu=mu, sigma=sigma, t=t)


def stationary_covariance(params: HoldParams) -> np.ndarray:
    """Limit of Sigma_t as t -> infinity: L^-1 I_3 (xi L^-1 / 6 at xi=6)."""
    return params.prior_var * np.eye(3)


# =============================================================================
# CHOLESKY FACTOR AND ELL_T
# =============================================================================
def chol3(sigma: np.ndarray, t: Optional[float] = None) -> np.ndarray:
    """
    Closed-form lower Cholesky factor of (batched) 3x3 SPD matrices.

        l11 = sqrt(s11)           l21 = s21 / l11        l31 = s31 / l11
        l22 = sqrt(s22 - l21^2)   l32 = (s32 - l31 l21) / l22
        l33 = sqrt(s33 - l31^2 - l32^2)

    Args:
        sigma: Array (..., 3, 3), symmetric
        t: Optional time, only used in the error message

    Returns:
        Lower-triangular array (..., 3, 3) with positive diagonal

    Raises:
        NotPositiveDefinite: any pivot <= 1e-14
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    s11, s21, s31 = sigma[..., 0, 0], sigma[..., 1, 0], sigma[..., 2, 0]
    s22, s32, s33 = sigma[..., 1, 1], sigma[..., 2, 1], sigma[..., 2, 2]

    _require_pivot(s11, 0, t)
    l11 = np.sqrt(s11)
    l21 = s21 / l11
    l31 = s31 / l11
    piv2 = s22 - l21 ** 2
    _require_pivot(piv2, 1, t)
    l22 = np.sqrt(piv2)
    l32 = (s32 - l31 * l21) / l22
    piv3 = s33 - l31 ** 2 - l32 ** 2
    _require_pivot(piv3, 2, t)
    l33 = np.sqrt(piv3)

    factor = np.zeros(sigma.shape)
    factor[..., 0, 0] = l11
    factor[..., 1, 0] = l21
    factor[..., 1, 1] = l22
    factor[..., 2, 0] = l31
    factor[..., 2, 1] = l32
    factor[..., 2, 2] = l33
    return factor


def _require_pivot(pivot: np.ndarray, index: int, t: Optional[float]) -> None:
    bad = ~(np.asarray(pivot) > PIVOT_THRESHOLD)
    if np.any(bad):
        worst = float(np.min(np.where(np.isnan(pivot), -np.inf, pivot)))
        raise NotPositiveDefinite(index, worst, t)


def ell_t(sigma: np.ndarray) -> np.ndarray:
    """
    Scale linking the conditional s-score to the s-block noise: 1 / L_t^{ss}.

    Equals [Sigma^ss - (Sigma^sq)^2/Sigma^qq - (Sigma^pp - (Sigma^pq)^2/Sigma^qq)^-1
    (Sigma^sp - Sigma^sq Sigma^pq / Sigma^qq)^2]^(-1/2), the inverse square
    root of the conditional variance of s given (q, p).
    """
    return 1.0 / chol3(sigma)[..., 2, 2]


def psd_factor(sigma: np.ndarray) -> np.ndarray:
    """
    A square root R with R R^T = sigma for PSD matrices that may be singular.

    Tries chol3 first; numerically singular matrices fall back to the
    symmetric eigen square root with negative eigenvalues clipped to zero.
    """
    try:
        return chol3(sigma)
    except NotPositiveDefinite:
        logger.debug("chol3 failed, using eigen square root for PSD factor")
        w, v = np.linalg.eigh(np.asarray(sigma, dtype=np.float64))
        return v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


# =============================================================================
# EXACT PERTURBATION AND PRIOR
# =============================================================================
def perturb(
    params: HoldParams,
    x0: PhaseState,
    t: ArrayLike,
    noise: np.ndarray,
    sigma0: Optional[np.ndarray] = None,
) -> Tuple[PhaseState, np.ndarray, np.ndarray]:
    """
    Draw x_t = mu_t + (L_t (x) I_d) eps from the transition kernel.

    Blockwise: q gets L^qq e1; p gets L^pq e1 + L^pp e2; s gets
    L^sq e1 + L^sp e2 + L^ss e3.

    Args:
        params: Kernel hyperparameters
        x0: initial mean state (BCSM: q0 with zero p, s), blocks (n, d) or (d,)
        t: time(s) in [t_min, T], scalar or (n,)
        noise: standard normal array (..., 3, d)
        sigma0: initial covariance; defaults to diag(0, alpha/L, alpha/L)

    Returns:
        Tuple of (x_t, eps_s of shape (..., d), ell_t of shape t.shape)
    """
    t = _as_time(t)
    _check_horizon(params, t, lower=params.t_min)
    if sigma0 is None:
        sigma0 = bcsm_initial_covariance(params)
    moments = transition_moments(params, x0.as_array(), sigma0, t)
    factor = chol3(moments.sigma, t=float(np.min(t)))
    noise = np.asarray(noise, dtype=np.float64)
    xt = moments.mu + np.matmul(factor, noise)
    ell = 1.0 / factor[..., 2, 2]
    return PhaseState.from_array(xt), noise[..., 2, :], ell


def prior_sample(params: HoldParams, d: int, noise: np.ndarray) -> PhaseState:
    """Equilibrium draw N(0, L^-1 I) per block from standard normal noise (..., 3, d)."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-2:] != (3, d):
        raise ValueError(f"noise must end with shape (3, {d}), got {noise.shape}")
    return PhaseState.from_array(noise * math.sqrt(params.prior_var))


def prior_logpdf(params: HoldParams, x: PhaseState) -> np.ndarray:
    """Log-density of the equilibrium law, summed over the three blocks and d dims."""
    arr = x.as_array()
    n_coords = arr.shape[-1] * 3
    sq = np.sum(arr ** 2, axis=(-2, -1))
    return -0.5 * n_coords * math.log(2.0 * math.pi * params.prior_var) - 0.5 * params.L * sq


# =============================================================================
# ANALYTIC SCORE FOR GAUSSIAN DATA
# =============================================================================
def marginal_moments(
    params: HoldParams,
    data_mean: np.ndarray,
    data_var: float,
    t: ArrayLike,
) -> KernelMoments:
    """
    Marginal law of x_t when q0 ~ N(m, v I) and (p0, s0) ~ N(0, alpha/L I).

    Args:
        data_mean: m, shape (d,)
        data_var: v, scalar per-coordinate variance
        t: time(s) in [0, T]
    """
    data_mean = np.asarray(data_mean, dtype=np.float64)
    mean0 = np.zeros((3,) + data_mean.shape)
    mean0[0] = data_mean
    return transition_moments(params, mean0, bcsm_initial_covariance(params, q_var=data_var), t)


def _collapse_times(t: np.ndarray) -> np.ndarray:
    """One time when the whole batch shares it (every sampler step), else t."""
    return t[:1] if t.size > 1 and np.all(t == t[0]) else t


class GaussianDataScore:
    """
    Exact s-block score of the diffused law for Gaussian data N(m, v I).

    Serves as an oracle score model: same interface as the score network
    (``score`` and ``score_vjp``), no training involved.
    """

    def __init__(self, params: HoldParams, mean: Union[float, np.ndarray], var: float, d: int = 1):
        self.params = params
        self.mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (d,)).copy()
        self.var = float(var)
        self.d = d

    def _precision_and_mean(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        moments = marginal_moments(self.params, self.mean, self.var, _collapse_times(t))
        precision = np.linalg.inv(moments.sigma)
        return np.broadcast_to(precision, t.shape + (3, 3)), np.broadcast_to(moments.mu, t.shape + moments.mu.shape[-2:])

    def score(self, x: np.ndarray, t: ArrayLike) -> np.ndarray:
        """-[Sigma_t^-1 (x - mu_t)]_s for x of shape (n, 3, d); returns (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(_as_time(t), x.shape[:1])
        precision, mu = self._precision_and_mean(t)
        return -np.einsum("nj,njd->nd", precision[:, 2, :], x - mu)

    def score_vjp(self, x: np.ndarray, t: ArrayLike, v: np.ndarray) -> np.ndarray:
        """v^T d(score)/dx, shape (n, 3, d)."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(_as_time(t), x.shape[:1])
        precision, _ = self._precision_and_mean(t)
        return -precision[:, 2, :, None] * np.asarray(v, dtype=np.float64)[:, None, :]


class GaussianMixtureScore:
    """
    Exact s-block score for isotropic Gaussian mixture data sum_k w_k N(m_k, v_k I).

    Each component diffuses like ``GaussianDataScore``; the mixture score
    is the responsibility-weighted average of the component scores.
    """

    def __init__(self, params: HoldParams, weights: np.ndarray, means: np.ndarray, variances: np.ndarray):
        self.params = params
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.ndim != 1 or np.any(self.weights <= 0):
            raise ValueError(f"weights must be a positive vector, got {self.weights}")
        self.means = np.asarray(means, dtype=np.float64).reshape(self.weights.shape[0], -1)  # (K, d)
        self.variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), self.weights.shape).copy()
        self.d = self.means.shape[1]

    def _components(self, x: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Responsibilities (K, n), component gradients (K, n, 3, d), s-rows of the precisions (K, n, 3)."""
        grads, rows, logits = [], [], []
        for w, m, v in zip(self.weights, self.means, self.variances):
            moments = marginal_moments(self.params, m, v, _collapse_times(t))
            precision = np.broadcast_to(np.linalg.inv(moments.sigma), t.shape + (3, 3))
            resid = x - moments.mu
            grad = -np.matmul(precision, resid)
            _, logdet = np.linalg.slogdet(moments.sigma)
            quad = np.einsum("nid,nid->n", resid, -grad)
            logits.append(math.log(w) - 0.5 * quad - 0.5 * self.d * (logdet + 3.0 * math.log(2.0 * math.pi)))
            grads.append(grad)
            rows.append(precision[:, 2, :])
        resp = softmax(np.stack(logits), axis=0)
        return resp, np.stack(grads), np.stack(rows)

    def score(self, x: np.ndarray, t: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(_as_time(t), x.shape[:1])
        resp, grads, _ = self._components(x, t)
        return np.einsum("kn,knd->nd", resp, grads[:, :, 2, :])

    def score_vjp(self, x: np.ndarray, t: ArrayLike, v: np.ndarray) -> np.ndarray:
        """v^T d(score)/dx, shape (n, 3, d)."""
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        t = np.broadcast_to(_as_time(t), x.shape[:1])
        resp, grads, rows = self._components(x, t)
        mean_grad = np.einsum("kn,knid->nid", resp, grads)
        direct = -np.einsum("kn,kni,nd->nid", resp, rows, v)
        weight = resp * np.einsum("knd,nd->kn", grads[:, :, 2, :], v)
        return direct + np.einsum("kn,knid->nid", weight, grads - mean_grad[None])
