"""
HOLD Objective Module
=====================
Score-matching losses in noise-prediction form.

Each batch element draws t, perturbs its initial state through the exact
transition kernel and contributes

    lambda(t) * || -ell_t eps_s - S(x_t, t) ||^2  =  || eps_s + S(x_t, t) / ell_t ||^2

with lambda(t) = ell_t^-2. BCSM conditions on q0 only (p0, s0 are
marginalized exactly through Sigma0); DSM conditions on the full state.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import integrate

from modules.hold_config import HoldParams, NetSpec
from modules.kernel import (
    PhaseState,
    bcsm_initial_covariance,
    chol3,
    marginal_moments,
    perturb,
    transition_moments,
)
from modules.scorenet import ScoreModel, backward, forward

logger = logging.getLogger(__name__)

# With Sigma0 = 0 the q-variance grows like t^5; below this the factor is unusable
DSM_T_FLOOR = 1e-2


@dataclass(frozen=True)
class LossSample:
    """A perturbed batch: one row per element."""
    t: np.ndarray          # (n,)
    x_t: PhaseState        # blocks (n, d)
    eps_s: np.ndarray      # (n, d)
    ell: np.ndarray        # (n,)

    @property
    def weight(self) -> np.ndarray:
        return self.ell ** -2

    @property
    def n(self) -> int:
        return int(self.t.shape[0])


@dataclass(frozen=True)
class MinibatchResult:
    loss: float
    grad: np.ndarray
    per_element: np.ndarray
    batch: LossSample


def time_lower_bound(params: HoldParams, loss_kind: str) -> float:
    if loss_kind == "dsm":
        return max(params.t_min, DSM_T_FLOOR)
    return params.t_min


def draw_bcsm_batch(params: HoldParams, q0: np.ndarray, rng: np.random.Generator) -> LossSample:
    """t ~ U[t_min, T], x_t ~ p(x_t | q0) with Sigma0 = diag(0, alpha/L, alpha/L)."""
    q0 = np.asarray(q0, dtype=np.float64)
    n, d = q0.shape
    t = rng.uniform(params.t_min, params.T, size=n)
    noise = rng.standard_normal((n, 3, d))
    x_t, eps_s, ell = perturb(params, PhaseState.from_position(q0), t, noise, bcsm_initial_covariance(params))
    return LossSample(t=t, x_t=x_t, eps_s=eps_s, ell=ell)


def draw_dsm_batch(params: HoldParams, x0: np.ndarray, rng: np.random.Generator) -> LossSample:
    """t ~ U[max(t_min, 1e-2), T], x_t ~ p(x_t | x0) with Sigma0 = 0."""
    x0 = np.asarray(x0, dtype=np.float64)
    n, _, d = x0.shape
    t = rng.uniform(time_lower_bound(params, "dsm"), params.T, size=n)
    noise = rng.standard_normal((n, 3, d))
    x_t, eps_s, ell = perturb(params, PhaseState.from_array(x0), t, noise, np.zeros((3, 3)))
    return LossSample(t=t, x_t=x_t, eps_s=eps_s, ell=ell)


def per_element_losses(predicted: np.ndarray, batch: LossSample) -> np.ndarray:
    residual = batch.eps_s + predicted / batch.ell[:, None]
    return np.sum(residual ** 2, axis=1)


def network_loss(
    spec: NetSpec,
    theta: np.ndarray,
    batch: LossSample,
    horizon: float = 1.0,
) -> MinibatchResult:
    """
    Mean weighted loss over the batch and its exact gradient in theta.

    d/dS of ||eps + S/ell||^2 is 2 (eps + S/ell) / ell, averaged over n.
    """
    x = batch.x_t.as_array()
    predicted = forward(spec, theta, x, batch.t, horizon)
    residual = batch.eps_s + predicted / batch.ell[:, None]
    per_element = np.sum(residual ** 2, axis=1)
    upstream = 2.0 * residual / (batch.ell[:, None] * batch.n)
    grad, _ = backward(spec, theta, x, batch.t, upstream, horizon)
    return MinibatchResult(loss=float(per_element.mean()), grad=grad, per_element=per_element, batch=batch)


def model_loss(model: ScoreModel, batch: LossSample) -> np.ndarray:
    """Per-element losses for any score model (no gradient)."""
    return per_element_losses(model.score(batch.x_t.as_array(), batch.t), batch)


def bcsm_minibatch(
    params: HoldParams,
    spec: NetSpec,
    theta: np.ndarray,
    q0_batch: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[float, np.ndarray]:
    """
    Block coordinate score matching loss and gradient on a batch of q0 (n, d).

    Returns:
        Tuple of (mean loss, flat gradient)
    """
    if len(q0_batch) == 0:
        raise ValueError("q0_batch must be nonempty")
    result = network_loss(spec, theta, draw_bcsm_batch(params, q0_batch, rng), params.T)
    return result.loss, result.grad


def dsm_minibatch(
    params: HoldParams,
    spec: NetSpec,
    theta: np.ndarray,
    x0_batch: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[float, np.ndarray]:
    """Denoising score matching on full initial states x0 (n, 3, d)."""
    if len(x0_batch) == 0:
        raise ValueError("x0_batch must be nonempty")
    result = network_loss(spec, theta, draw_dsm_batch(params, x0_batch, rng), params.T)
    return result.loss, result.grad


def sample_initial_phase(params: HoldParams, q0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Full initial states (q0, p0, s0) with p0, s0 ~ N(0, alpha/L)."""
    q0 = np.asarray(q0, dtype=np.float64)
    ps = rng.standard_normal((q0.shape[0], 2, q0.shape[1])) * math.sqrt(params.init_var)
    return np.concatenate([q0[:, None, :], ps], axis=1)


# =============================================================================
# GAUSSIAN-DATA FLOOR
# =============================================================================
def gaussian_loss_floor(params: HoldParams, data_var: float, t: float, d: int = 1) -> float:
    """
    Irreducible BCSM loss at time t for data N(m, v I).

    The optimal prediction of eps_s given x_t is L33 [P (x_t - mu)]_s with P
    the marginal precision, whose variance per coordinate is L33^2 P_ss.
    Hence the floor d (1 - L33^2 P_ss). Independent of m.
    """
    cond = transition_moments(params, np.zeros(3), bcsm_initial_covariance(params), t)
    l33 = chol3(cond.sigma, t=t)[2, 2]
    marg = marginal_moments(params, np.zeros(d), data_var, t)
    p_ss = np.linalg.inv(marg.sigma)[2, 2]
    return float(d * (1.0 - l33 ** 2 * p_ss))


def expected_gaussian_loss_floor(params: HoldParams, data_var: float, d: int = 1) -> float:
    """Floor averaged over t ~ U[t_min, T] (adaptive quadrature)."""
    value, _ = integrate.quad(
        lambda t: gaussian_loss_floor(params, data_var, t, d), params.t_min, params.T, limit=200,
    )
    logger.debug("expected Gaussian loss floor %.6f (data variance %.4g)", value / (params.T - params.t_min), data_var)
    return value / (params.T - params.t_min)


# =============================================================================
# DIAGNOSTICS
# =============================================================================
def time_stratified_losses(
    t: np.ndarray,
    losses: np.ndarray,
    t_min: float,
    T: float,
    n_bins: int = 10,
) -> pd.DataFrame:
    """Mean loss per time bin: columns t_lo, t_hi, mean_loss, count."""
    edges = np.linspace(t_min, T, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, n_bins - 1)
    frame = pd.DataFrame({"bin": idx, "loss": losses})
    stats = frame.groupby("bin")["loss"].agg(["mean", "count"]).reindex(range(n_bins))
    return pd.DataFrame({
        "t_lo": edges[:-1],
        "t_hi": edges[1:],
        "mean_loss": stats["mean"].to_numpy(),
        "count": stats["count"].fillna(0).astype(int).to_numpy(),
    })


def loss_profile(
    params: HoldParams,
    model: ScoreModel,
    q0: np.ndarray,
    rng: np.random.Generator,
    n_bins: int = 10,
    reference: Optional[ScoreModel] = None,
) -> pd.DataFrame:
    """
    BCSM loss of a model per time bin on one perturbed batch of q0 (n, d).

    With a ``reference`` (an exact score) the same batch is scored again and
    its per-bin mean goes into ``floor_loss``.
    """
    batch = draw_bcsm_batch(params, q0, rng)
    frame = time_stratified_losses(batch.t, model_loss(model, batch), params.t_min, params.T, n_bins)
    if reference is not None:
        floor = time_stratified_losses(batch.t, model_loss(reference, batch), params.t_min, params.T, n_bins)
        frame["floor_loss"] = floor["mean_loss"].to_numpy()
    return frame
