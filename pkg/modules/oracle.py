"""
HOLD Oracle Module
==================
Independent brute-force verifiers for every closed form in ``modules.kernel``:

    - Euler-Maruyama simulation of the forward SDE (Monte Carlo moments)
    - fixed-step RK4 integration of the moment ODEs
        d mu / dt = M mu,   d Sigma / dt = M Sigma + (M Sigma)^T + G G^T
    - dense numeric matrix exponential (scipy's Pade scaling-and-squaring)

``verification_report`` runs the whole suite and is what ``app.py verify``
prints and writes.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from modules import kernel
from modules.errors import ConfigError, TimeOutOfRange
from modules.hold_config import EvalConfig, HoldParams
from modules.parallel import map_chunks, stream

logger = logging.getLogger(__name__)

# =============================================================================
# CONSTANTS
# =============================================================================
RK4_DT = 1e-5
RK4_T_MAX = 10.0
MC_BAND = 4.0  # standard errors
MAX_DENSE_N = 12


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo forward-simulation settings."""
    n_paths: int = 100_000
    dt: float = 1e-4
    t_checkpoints: Tuple[float, ...] = (0.1, 0.5, 1.0, 2.0)
    seed: int = 0

    def validate(self, params: HoldParams) -> "McConfig":
        if not 0 < self.dt <= 1e-3:
            raise ConfigError("mc.dt", f"must lie in (0, 1e-3], got {self.dt}")
        if self.n_paths < 10_000:
            raise ConfigError("mc.n_paths", f"must be >= 1e4, got {self.n_paths}")
        cps = list(self.t_checkpoints)
        if not cps or cps != sorted(cps) or cps[0] <= 0 or cps[-1] > params.T:
            raise ConfigError("mc.t_checkpoints", f"must be sorted within (0, T={params.T}], got {cps}")
        return self


@dataclass(frozen=True)
class EmpiricalMoments:
    """Monte Carlo moments at one checkpoint, pooled over the d iid coordinates."""
    t: float
    mean: np.ndarray        # (3, d)
    mean_se: np.ndarray     # (3, d)
    cov: np.ndarray         # (3, 3)
    cov_se: np.ndarray      # (3, 3)
    n_samples: int


# =============================================================================
# MONTE CARLO FORWARD SIMULATION
# =============================================================================
def em_forward_simulate(
    params: HoldParams,
    x0: np.ndarray,
    cfg: McConfig,
    sigma0: Optional[np.ndarray] = None,
    noise_scale: float = 1.0,
    threads: int = 1,
) -> List[EmpiricalMoments]:
    """
    Simulate dx = F x dt + G dw with Euler-Maruyama and report moments.

    Args:
        params: Kernel hyperparameters
        x0: initial mean, shape (3, d); d should stay small (<= 4)
        cfg: path count, step and checkpoints
        sigma0: initial per-dimension covariance (default: point mass)
        noise_scale: multiplies the diffusion; 0 gives the noiseless ODE
        threads: worker threads (results do not depend on it)

    Returns:
        One EmpiricalMoments per checkpoint; checkpoint times are rounded to
        the nearest multiple of dt
    """
    cfg.validate(params)
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[-1]
    drift = kernel.drift_matrix(params, "forward")
    init_factor = kernel.psd_factor(np.zeros((3, 3)) if sigma0 is None else np.asarray(sigma0, dtype=np.float64))
    step_std = noise_scale * math.sqrt(params.noise_rate * cfg.dt)
    checkpoint_steps = [int(round(t / cfg.dt)) for t in cfg.t_checkpoints]

    def run_chunk(sl: slice, rng: np.random.Generator) -> List[np.ndarray]:
        m = sl.stop - sl.start
        x = x0 + init_factor @ rng.standard_normal((m, 3, d))
        snapshots = []
        step = 0
        for target in checkpoint_steps:
            while step < target:
                x = x + cfg.dt * (drift @ x)
                x[:, 2, :] += step_std * rng.standard_normal((m, d))
                step += 1
            snapshots.append(x.copy())
        return snapshots

    chunks = map_chunks(run_chunk, cfg.n_paths, cfg.seed, threads=threads)
    results = []
    for i, steps in enumerate(checkpoint_steps):
        xs = np.concatenate([c[i] for c in chunks], axis=0)   # (n, 3, d)
        results.append(_empirical_moments(steps * cfg.dt, xs))
    logger.debug("simulated %d paths to t=%.4g", cfg.n_paths, checkpoint_steps[-1] * cfg.dt)
    return results


def _empirical_moments(t: float, xs: np.ndarray) -> EmpiricalMoments:
    n = xs.shape[0]
    mean = xs.mean(axis=0)
    mean_se = xs.std(axis=0, ddof=1) / math.sqrt(n)
    # pool the iid coordinates: (n*d, 3)
    centered = np.moveaxis(xs - mean, -1, 1).reshape(-1, 3)
    products = centered[:, :, None] * centered[:, None, :]
    m = products.shape[0]
    cov = products.mean(axis=0)
    cov_se = products.std(axis=0, ddof=1) / math.sqrt(m)
    return EmpiricalMoments(t=t, mean=mean, mean_se=mean_se, cov=cov, cov_se=cov_se, n_samples=m)


# =============================================================================
# MOMENT ODE INTEGRATION (RK4)
# =============================================================================
def _rk4_affine_map(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """
    One classical RK4 step of y' = A y + b as an augmented (m+1)x(m+1) matrix.

    For an affine field the four stages collapse to
    y_next = P(hA) y + h Q(hA) b with P = sum_{k<=4} (hA)^k / k! and
    Q = sum_{k<=3} (hA)^k / (k+1)!.
    """
    m = a.shape[0]
    ha = h * a
    eye = np.eye(m)
    ha2 = ha @ ha
    ha3 = ha2 @ ha
    ha4 = ha3 @ ha
    p = eye + ha + ha2 / 2.0 + ha3 / 6.0 + ha4 / 24.0
    q = eye + ha / 2.0 + ha2 / 6.0 + ha3 / 24.0
    step = np.eye(m + 1)
    step[:m, :m] = p
    step[:m, m] = h * (q @ b)
    return step


def _rk4_affine_solve(a: np.ndarray, b: np.ndarray, y0: np.ndarray, t: float, dt: float) -> np.ndarray:
    """n = ceil(t/dt) equal RK4 steps; the step map is powered by repeated squaring."""
    if t == 0:
        return y0.copy()
    n_steps = max(1, int(math.ceil(t / dt - 1e-9)))
    step = _rk4_affine_map(a, b, t / n_steps)
    total = np.linalg.matrix_power(step, n_steps)
    return total[:-1, :-1] @ y0 + total[:-1, -1]


def integrate_moment_odes(
    params: HoldParams,
    mu0: np.ndarray,
    sigma0: np.ndarray,
    t: float,
    dt: float = RK4_DT,
    direction: str = "forward",
) -> kernel.KernelMoments:
    """
    Fixed-step RK4 solution of the mean and covariance ODEs.

    Args:
        params: Kernel hyperparameters
        mu0: initial mean, shape (3,) or (3, d)
        sigma0: initial 3x3 covariance (or its diagonal)
        t: end time in [0, 10]
        dt: RK4 step (default 1e-5)
        direction: "forward" or "split"

    Returns:
        KernelMoments at time t
    """
    if not 0 <= t <= RK4_T_MAX:
        raise TimeOutOfRange(f"moment ODE oracle needs t in [0, {RK4_T_MAX}], got {t}")
    mat = kernel.drift_matrix(params, direction)
    mu0 = np.asarray(mu0, dtype=np.float64)
    sigma0 = np.asarray(sigma0, dtype=np.float64)
    if sigma0.shape == (3,):
        sigma0 = np.diag(sigma0)

    flat_mu = mu0.reshape(3, -1)
    mu_t = np.column_stack([
        _rk4_affine_solve(mat, np.zeros(3), flat_mu[:, j], t, dt) for j in range(flat_mu.shape[1])
    ]).reshape(mu0.shape)

    # vec(M S + S M^T) = (I (x) M + M (x) I) vec(S) for row-major vec
    eye = np.eye(3)
    lyap = np.kron(mat, eye) + np.kron(eye, mat)
    noise = np.zeros((3, 3))
    noise[2, 2] = params.noise_rate
    sigma_t = _rk4_affine_solve(lyap, noise.ravel(), sigma0.ravel(), t, dt).reshape(3, 3)
    sigma_t = 0.5 * (sigma_t + sigma_t.T)
    return kernel.KernelMoments(mu=mu_t, sigma=sigma_t, t=t)


# =============================================================================
# DENSE MATRIX EXPONENTIAL
# =============================================================================
def expm_dense(mat: np.ndarray, t: float = 1.0) -> np.ndarray:
    """exp(t * mat) for small dense matrices (n <= 12)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] > MAX_DENSE_N:
        raise ValueError(f"expm_dense expects a square matrix with n <= {MAX_DENSE_N}, got {mat.shape}")
    return scipy.linalg.expm(t * mat)


# =============================================================================
# VERIFICATION SUITE
# =============================================================================
@dataclass
class CheckResult:
    name: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_deviation) and self.max_deviation <= self.tolerance)

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "max_deviation": float(self.max_deviation),
            "tolerance": float(self.tolerance),
            "passed": self.passed,
        }


def _rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) / scale


def check_expm_against_dense(params: HoldParams, times: Sequence[float] = (0.1, 0.5, 1.0, 2.0, 5.0)) -> float:
    worst = 0.0
    for direction in ("forward", "split"):
        mat = kernel.drift_matrix(params, direction)
        for t in times:
            closed = kernel.expm_scalar_kernel(mat, t)
            worst = max(worst, float(np.max(np.abs(closed - expm_dense(mat, t)))))
    return worst


def check_semigroup(params: HoldParams, rng: np.random.Generator, n_pairs: int = 100) -> float:
    mat = kernel.drift_matrix(params, "forward")
    t1, t2 = rng.uniform(0.0, 5.0, size=(2, n_pairs))
    joint = kernel.expm_scalar_kernel(mat, t1 + t2)
    product = kernel.expm_scalar_kernel(mat, t1) @ kernel.expm_scalar_kernel(mat, t2)
    return float(np.max(np.abs(joint - product)))


def check_kronecker(params: HoldParams, d: int = 3, times: Sequence[float] = (0.1, 1.0)) -> float:
    mat = kernel.drift_matrix(params, "forward")
    worst = 0.0
    for t in times:
        blockwise = np.kron(kernel.expm_scalar_kernel(mat, t), np.eye(d))
        dense = expm_dense(np.kron(mat, np.eye(d)), t)
        worst = max(worst, float(np.max(np.abs(blockwise - dense))))
    return worst


def check_moments_against_rk4(
    params: HoldParams,
    rng: np.random.Generator,
    n_configs: int = 5,
    n_times: int = 20,
    t_max: float = 5.0,
) -> float:
    """Max relative deviation of closed-form moments from RK4 over random (L, alpha, t)."""
    worst = 0.0
    for _ in range(n_configs):
        cfg = replace(params, L=float(rng.uniform(0.5, 4.0)), alpha=float(rng.uniform(0.01, 0.2)), T=t_max)
        mu0 = np.array([rng.normal(), 0.0, 0.0])
        sigma0 = kernel.bcsm_initial_covariance(cfg)
        for t in rng.uniform(cfg.t_min, t_max, size=n_times):
            closed = kernel.transition_moments(cfg, mu0, sigma0, t)
            ref = integrate_moment_odes(cfg, mu0, sigma0, float(t))
            worst = max(worst, _rel_dev(closed.sigma, ref.sigma))
            worst = max(worst, float(np.max(np.abs(closed.mu - ref.mu))) / max(float(np.max(np.abs(mu0))), 1e-12))
    return worst


def check_stationarity(params: HoldParams, t: float = 50.0) -> float:
    cfg = replace(params, T=max(params.T, t))
    moments = kernel.transition_moments(cfg, np.array([1.0, 0.5, -0.5]), kernel.bcsm_initial_covariance(cfg), t)
    return max(
        float(np.max(np.abs(moments.sigma - kernel.stationary_covariance(cfg)))),
        float(np.max(np.abs(moments.mu))),
    )


def check_cholesky_and_ell(params: HoldParams, t: float = 0.5) -> float:
    moments = kernel.transition_moments(params, np.array([1.0, 0.0, 0.0]), kernel.bcsm_initial_covariance(params), t)
    sigma = moments.sigma
    factor = kernel.chol3(sigma)
    recon = _rel_dev(factor @ factor.T, sigma)
    s = sigma
    schur_pp = s[1, 1] - s[1, 0] ** 2 / s[0, 0]
    cross = s[2, 1] - s[2, 0] * s[1, 0] / s[0, 0]
    ell_formula = (s[2, 2] - s[2, 0] ** 2 / s[0, 0] - cross ** 2 / schur_pp) ** -0.5
    ell_dev = abs(float(kernel.ell_t(sigma)) - ell_formula) / ell_formula
    return max(recon, ell_dev)


def _refined_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched solve a x = b with one step of iterative refinement (Sigma_t is ill-conditioned at small t)."""
    x = np.linalg.solve(a, b[..., None])
    x = x + np.linalg.solve(a, b[..., None] - a @ x)
    return x[..., 0]


def check_score_identity(params: HoldParams, rng: np.random.Generator, n_draws: int = 1000) -> float:
    """Direct-solve Gaussian score vs -L_t^{-T} eps under reparameterization."""
    t = rng.uniform(0.1, params.T, size=n_draws)
    q0 = rng.normal(size=(n_draws, 1))
    noise = rng.standard_normal((n_draws, 3, 1))
    x0 = kernel.PhaseState.from_position(q0)
    xt, eps_s, ell = kernel.perturb(params, x0, t, noise)
    moments = kernel.transition_moments(params, x0.as_array(), kernel.bcsm_initial_covariance(params), t)
    resid = (xt.as_array() - moments.mu)[..., 0]                # (n, 3)
    direct = -_refined_solve(moments.sigma, resid)
    factor = kernel.chol3(moments.sigma)
    reparam = -np.linalg.solve(np.swapaxes(factor, -1, -2), noise)[..., 0]
    worst = float(np.max(np.abs(direct - reparam)))
    worst = max(worst, float(np.max(np.abs(direct[:, 2] + ell * eps_s[:, 0]))))
    return worst


def check_astep_covariance(params: HoldParams, half_dt: float = 0.05) -> float:
    mat = kernel.drift_matrix(params, "split")
    closed = kernel.diffusion_covariance(mat, params, half_dt)
    ref = integrate_moment_odes(params, np.zeros(3), np.zeros((3, 3)), half_dt, direction="split")
    return _rel_dev(closed, ref.sigma)


def check_monte_carlo(params: HoldParams, eval_cfg: EvalConfig, seed: int, threads: int) -> float:
    """Largest |empirical - closed form| measured in standard errors."""
    checkpoints = tuple(t for t in (0.1, 0.5, 1.0, 2.0) if t <= max(params.T, 2.0))
    cfg_params = replace(params, T=max(params.T, 2.0))
    mc = McConfig(n_paths=eval_cfg.mc_paths, dt=eval_cfg.mc_dt, t_checkpoints=checkpoints, seed=seed)
    x0 = np.array([[1.0], [0.0], [0.0]])
    sigma0 = kernel.bcsm_initial_covariance(cfg_params)
    worst = 0.0
    for emp in em_forward_simulate(cfg_params, x0, mc, sigma0=sigma0, threads=threads):
        closed = kernel.transition_moments(cfg_params, x0, sigma0, emp.t)
        worst = max(worst, float(np.max(np.abs(emp.mean - closed.mu) / emp.mean_se)))
        worst = max(worst, float(np.max(np.abs(emp.cov - closed.sigma) / emp.cov_se)))
    return worst


def verification_report(
    params: HoldParams,
    eval_cfg: EvalConfig,
    seed: int = 0,
    threads: int = 1,
    include_monte_carlo: bool = True,
) -> List[CheckResult]:
    """
    Run every kernel-vs-oracle check.

    Tolerances are multiplied by ``eval_cfg.tolerance_scale`` (0 forces failure).
    """
    scale = eval_cfg.tolerance_scale
    rng = stream(seed, 0)
    identity_dev = float(np.max(np.abs(kernel.expm_scalar_kernel(kernel.drift_matrix(params), 0.0) - np.eye(3))))
    results = [
        CheckResult("expm_identity_at_zero", identity_dev, 1e-14 * scale),
        CheckResult("expm_vs_dense", check_expm_against_dense(params), 1e-10 * scale),
        CheckResult("expm_semigroup", check_semigroup(params, rng), 1e-12 * scale),
        CheckResult("kronecker_lemma", check_kronecker(params), 1e-12 * scale),
        CheckResult("moments_vs_rk4", check_moments_against_rk4(params, rng), 1e-6 * scale),
        CheckResult("stationarity_t50", check_stationarity(params), 1e-10 * scale),
        CheckResult("cholesky_and_ell", check_cholesky_and_ell(params), 1e-12 * scale),
        CheckResult("score_identity", check_score_identity(params, rng), 1e-10 * scale),
        CheckResult("astep_covariance_vs_rk4", check_astep_covariance(params), 1e-6 * scale),
    ]
    if include_monte_carlo:
        results.append(CheckResult("monte_carlo_moments_se", check_monte_carlo(params, eval_cfg, seed, threads), MC_BAND * scale))
    for r in results:
        level = logging.INFO if r.passed else logging.WARNING
        logger.log(level, "%-26s max dev %.3e (tol %.1e) %s", r.name, r.max_deviation, r.tolerance, "ok" if r.passed else "FAILED")
    return results
