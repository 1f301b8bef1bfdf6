"""
HOLD Samplers Module
====================
Reverse-time generation from the equilibrium prior back to data.

Time convention: samplers advance a forward clock tau from 0 to T - t_min
and query the score model at model time t = T - tau. In that clock the
generative dynamics are

    dx = [-F x + (0, 0, 2 xi L^-1 S(x, t))] dtau + sqrt(2 xi / L) dw  (s-block)

Three integrators:
    - em_reverse:    Euler-Maruyama on the dynamics above
    - lt_sample:     symmetric split A(h/2) B(h) A(h/2); A is the exactly
                     solvable Gaussian part with drift [[0,-1,0],[1,0,-g],[0,g,-xi]]
                     plus all of the noise, B is ds = 2 xi (L^-1 S + s) dtau
    - prob_flow_ode: adaptive Dormand-Prince 5(4) on dx/dt = F x - xi L^-1 (0, 0, S)

Chains run in fixed chunks with counter-based streams (see modules.parallel),
so results do not depend on the thread count. ``stochastic=False`` zeroes
every noise draw (deterministic skeleton, used by the order checks).
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from modules.errors import SamplerDivergence, StepSizeUnderflow
from modules.hold_config import B_STEPS, GridSpec, HoldParams
from modules.kernel import diffusion_covariance, drift_matrix, expm_scalar_kernel, psd_factor
from modules.parallel import map_chunks
from modules.scorenet import ScoreModel

logger = logging.getLogger(__name__)

MEAN_ONLY_THRESHOLD = 1e-16  # A-step covariance norm below this: no noise
MIN_ODE_TOL = 1e-8
ODE_DIRECTIONS = ("generate", "encode")

# Fractions of the generation path at which evolve snapshots are taken
LT_EVOLVE_FRACTIONS = (0.0, 0.5, 0.7, 0.8, 0.9, 0.93, 0.97, 0.99)
ODE_EVOLVE_FRACTIONS = (0.0, 0.5, 0.7, 0.8, 0.9, 0.99, 0.999, 0.99999)


# =============================================================================
# TIME GRID
# =============================================================================
@dataclass(frozen=True)
class TimeGrid:
    """
    Decreasing model times t_0 = T > t_1 > ... > t_N = t_min.

    quadratic: t_i = t_min + (T - t_min) (1 - i/N)^2 (fine steps near the data)
    uniform:   t_i = T - (T - t_min) i/N
    """
    n_steps: int
    schedule: str = "quadratic"
    t_min: float = 1e-5
    T: float = 1.0

    @classmethod
    def from_spec(cls, params: HoldParams, grid: GridSpec, n_steps: Optional[int] = None) -> "TimeGrid":
        return cls(
            n_steps=grid.n_steps if n_steps is None else n_steps,
            schedule=grid.schedule,
            t_min=params.t_min,
            T=params.T,
        )

    def times(self) -> np.ndarray:
        if self.n_steps == 0:
            return np.array([self.T])
        frac = np.arange(self.n_steps + 1) / self.n_steps
        if self.schedule == "quadratic":
            times = self.t_min + (self.T - self.t_min) * (1.0 - frac) ** 2
        elif self.schedule == "uniform":
            times = self.T - (self.T - self.t_min) * frac
        else:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        times[0], times[-1] = self.T, self.t_min
        return times

    def nearest_indices(self, model_times: Sequence[float]) -> List[int]:
        times = self.times()
        return [int(np.argmin(np.abs(times - t))) for t in model_times]


def fraction_times(params: HoldParams, fractions: Sequence[float]) -> List[float]:
    """Model times reached after the given fractions of the generation path."""
    span = params.T - params.t_min
    return [params.T - f * span for f in fractions]


def evolve_fractions(sampler: str, n_snapshots: int) -> Tuple[float, ...]:
    table = ODE_EVOLVE_FRACTIONS if sampler == "ode" else LT_EVOLVE_FRACTIONS
    if n_snapshots == len(table):
        return table
    return tuple(np.linspace(0.0, 1.0, n_snapshots))


# =============================================================================
# RESULTS
# =============================================================================
@dataclass
class Snapshot:
    t: float
    state: np.ndarray  # (n, 3, d)


@dataclass
class SampleResult:
    state: np.ndarray                      # final phase state (n, 3, d)
    nfe: int
    wall_s: float
    sampler: str
    snapshots: List[Snapshot] = field(default_factory=list)

    @property
    def samples(self) -> np.ndarray:
        """Final q-block (n, d)."""
        return self.state[:, 0, :]


# =============================================================================
# STEP KERNELS
# =============================================================================
@dataclass(frozen=True)
class AStep:
    mean: np.ndarray     # exp(h M), 3x3
    cov: np.ndarray      # accumulated noise covariance, 3x3
    factor: np.ndarray   # R with R R^T = cov (zeros when mean-only)


class AStepTable:
    """Per-step-size cache of the exact Gaussian A-step (point-mass start)."""

    def __init__(self, params: HoldParams):
        self.params = params
        self.matrix = drift_matrix(params, "split")
        self._cache: Dict[float, AStep] = {}

    def get(self, h: float) -> AStep:
        h = float(h)
        step = self._cache.get(h)
        if step is None:
            mean = expm_scalar_kernel(self.matrix, h)
            cov = diffusion_covariance(self.matrix, self.params, h)
            if np.linalg.norm(cov) < MEAN_ONLY_THRESHOLD:
                logger.debug("A-step covariance negligible at h=%.3e, mean-only step", h)
                factor = np.zeros((3, 3))
            else:
                factor = psd_factor(cov)
            step = AStep(mean=mean, cov=cov, factor=factor)
            self._cache[h] = step
        return step

    def __len__(self) -> int:
        return len(self._cache)


def _noise(rng: Optional[np.random.Generator], shape: Tuple[int, ...]) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    return rng.standard_normal(shape)


def a_step(step: AStep, x: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
    return np.matmul(step.mean, x) + np.matmul(step.factor, _noise(rng, x.shape))


def b_field(params: HoldParams, model: ScoreModel, x: np.ndarray, t: float) -> np.ndarray:
    """2 xi (L^-1 S(x, t) + s), shape (n, d)."""
    score = model.score(x, np.full(x.shape[0], t))
    return params.noise_rate * score + 2.0 * params.xi * x[:, 2, :]


def b_step(
    params: HoldParams,
    model: ScoreModel,
    x: np.ndarray,
    t_mid: float,
    dt: float,
    rule: str = "euler",
) -> Tuple[np.ndarray, int]:
    """Advance s under the B field with time frozen at t_mid. Returns (x', nfe)."""
    k1 = b_field(params, model, x, t_mid)
    out = x.copy()
    if rule == "euler":
        out[:, 2, :] += dt * k1
        return out, 1
    if rule == "heun":
        trial = x.copy()
        trial[:, 2, :] += dt * k1
        k2 = b_field(params, model, trial, t_mid)
        out[:, 2, :] += 0.5 * dt * (k1 + k2)
        return out, 2
    raise ValueError(f"b_step must be one of {B_STEPS}, got {rule!r}")


def lt_step(
    params: HoldParams,
    model: ScoreModel,
    x: np.ndarray,
    t: float,
    dt: float,
    rng: Optional[np.random.Generator] = None,
    table: Optional[AStepTable] = None,
    rule: str = "euler",
) -> Tuple[np.ndarray, int]:
    """
    One split step from model time t to t - dt: A(dt/2), B(dt) at t - dt/2, A(dt/2).

    Args:
        x: phase batch (n, 3, d)
        rng: noise source; None runs noise-free
        table: A-step cache (built on the fly when None)
        rule: B-step rule, "euler" or "heun"

    Returns:
        Tuple of (new state, score evaluations used)
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if t - dt < params.t_min - 1e-12:
        raise ValueError(f"step lands below t_min: t={t}, dt={dt}")
    table = table or AStepTable(params)
    half = table.get(0.5 * dt)
    x = a_step(half, x, rng)
    x, nfe = b_step(params, model, x, t - 0.5 * dt, dt, rule)
    x = a_step(half, x, rng)
    return x, nfe


def em_step(
    params: HoldParams,
    model: ScoreModel,
    x: np.ndarray,
    t: float,
    dt: float,
    rng: Optional[np.random.Generator] = None,
    forward: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Euler-Maruyama step of the generative dynamics from model time t to t - dt."""
    forward = drift_matrix(params) if forward is None else forward
    drift = -np.matmul(forward, x)
    drift[:, 2, :] += params.noise_rate * model.score(x, np.full(x.shape[0], t))
    out = x + dt * drift
    out[:, 2, :] += math.sqrt(params.noise_rate * dt) * _noise(rng, out[:, 2, :].shape)
    return out


# =============================================================================
# CHAIN DRIVERS
# =============================================================================
def _initial_state(
    params: HoldParams,
    d: int,
    sl: slice,
    rng: np.random.Generator,
    x_init: Optional[np.ndarray],
) -> np.ndarray:
    if x_init is not None:
        return np.array(x_init[sl], dtype=np.float64)
    n = sl.stop - sl.start
    return rng.standard_normal((n, 3, d)) * math.sqrt(params.prior_var)


def _gather(parts: list, sampler: str, started: float, snapshot_times: Sequence[float]) -> SampleResult:
    state = np.concatenate([p[0] for p in parts], axis=0)
    nfe = max(p[1] for p in parts)
    snaps = []
    for j, t in enumerate(snapshot_times):
        snaps.append(Snapshot(t=float(t), state=np.concatenate([p[2][j] for p in parts], axis=0)))
    wall = time.perf_counter() - started
    logger.info("%s sampler: %d chains, NFE %d, %.2fs", sampler, state.shape[0], nfe, wall)
    return SampleResult(state=state, nfe=nfe, wall_s=wall, sampler=sampler, snapshots=snaps)


def _run_grid(
    params: HoldParams,
    model: ScoreModel,
    grid: TimeGrid,
    n_samples: int,
    seed: int,
    threads: int,
    x_init: Optional[np.ndarray],
    snapshot_times: Sequence[float],
    stochastic: bool,
    sampler: str,
    step_fn: Callable,
) -> SampleResult:
    times = grid.times()
    snap_idx = grid.nearest_indices(snapshot_times)
    actual = [float(times[i]) for i in snap_idx]
    if x_init is not None:
        n_samples = x_init.shape[0]

    def run_chunk(sl: slice, rng: np.random.Generator):
        x = _initial_state(params, model.d, sl, rng, x_init)
        noise_rng = rng if stochastic else None
        snaps = {0: x.copy()} if 0 in snap_idx else {}
        nfe = 0
        for i in range(grid.n_steps):
            t, dt = times[i], times[i] - times[i + 1]
            x, used = step_fn(x, t, dt, noise_rng)
            nfe += used
            if not np.all(np.isfinite(x)):
                raise SamplerDivergence(i, float(times[i + 1]))
            if i + 1 in snap_idx:
                snaps[i + 1] = x.copy()
        return x, nfe, [snaps[k] for k in snap_idx]

    started = time.perf_counter()
    parts = map_chunks(run_chunk, n_samples, seed, threads)
    return _gather(parts, sampler, started, actual)


def em_reverse(
    params: HoldParams,
    model: ScoreModel,
    grid: TimeGrid,
    n_samples: int,
    seed: int = 0,
    threads: int = 1,
    x_init: Optional[np.ndarray] = None,
    snapshot_times: Sequence[float] = (),
    stochastic: bool = True,
) -> SampleResult:
    """
    Euler-Maruyama generation over ``grid``; zero steps return the prior draw.

    Raises:
        SamplerDivergence: non-finite state (carries the step index)
    """
    forward = drift_matrix(params)

    def step(x, t, dt, rng):
        return em_step(params, model, x, t, dt, rng, forward), 1

    return _run_grid(params, model, grid, n_samples, seed, threads, x_init, snapshot_times, stochastic, "em", step)


def lt_sample(
    params: HoldParams,
    model: ScoreModel,
    grid: TimeGrid,
    n_samples: int,
    seed: int = 0,
    threads: int = 1,
    rule: str = "euler",
    x_init: Optional[np.ndarray] = None,
    snapshot_times: Sequence[float] = (),
    stochastic: bool = True,
) -> SampleResult:
    """Composition of lt_step over ``grid`` (ABABA...)."""
    table = AStepTable(params)

    def step(x, t, dt, rng):
        return lt_step(params, model, x, t, dt, rng, table, rule)

    return _run_grid(params, model, grid, n_samples, seed, threads, x_init, snapshot_times, stochastic, "lt", step)


# =============================================================================
# PROBABILITY-FLOW ODE
# =============================================================================
@dataclass
class OdeResult:
    state: np.ndarray            # endpoint (n, 3, d)
    nfe: int
    t_eval: np.ndarray           # trajectory times (may be empty)
    trajectory: List[np.ndarray] # states at t_eval


def flow_field(params: HoldParams, model: ScoreModel, x: np.ndarray, t: float, forward: np.ndarray) -> np.ndarray:
    """K(x, t) = F x + (0, 0, -xi L^-1 S(x, t))."""
    k = np.matmul(forward, x)
    k[:, 2, :] -= params.xi / params.L * model.score(x, np.full(x.shape[0], t))
    return k


def prob_flow_ode(
    params: HoldParams,
    model: ScoreModel,
    x: np.ndarray,
    direction: str = "generate",
    atol: float = 1e-5,
    rtol: float = 1e-5,
    t_eval: Optional[Sequence[float]] = None,
) -> OdeResult:
    """
    Integrate the probability-flow ODE with RK45 (Dormand-Prince 5(4)).

    Args:
        x: start state (n, 3, d): prior draw at T for "generate", data-side
           state at t_min for "encode"
        direction: "generate" (T -> t_min) or "encode" (t_min -> T)
        t_eval: optional model times to record along the way

    Raises:
        StepSizeUnderflow: the integrator could not make progress
    """
    if direction not in ODE_DIRECTIONS:
        raise ValueError(f"direction must be one of {ODE_DIRECTIONS}, got {direction!r}")
    if atol < MIN_ODE_TOL or rtol < MIN_ODE_TOL:
        raise ValueError(f"ODE tolerances must be >= {MIN_ODE_TOL}")
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    forward = drift_matrix(params)
    span = (params.T, params.t_min) if direction == "generate" else (params.t_min, params.T)

    def rhs(t, y):
        return flow_field(params, model, y.reshape(shape), t, forward).ravel()

    recorded = None
    if t_eval is not None:
        # the span end is always recorded so the last column is the endpoint
        clipped = {float(np.clip(t, params.t_min, params.T)) for t in t_eval} | {span[1]}
        recorded = np.array(sorted(clipped, reverse=direction == "generate"))
    sol = solve_ivp(rhs, span, x.ravel(), method="RK45", atol=atol, rtol=rtol, t_eval=recorded)
    if not sol.success:
        raise StepSizeUnderflow(float(sol.t[-1]), sol.message)
    trajectory = [sol.y[:, j].reshape(shape) for j in range(sol.y.shape[1])] if recorded is not None else []
    return OdeResult(
        state=sol.y[:, -1].reshape(shape),
        nfe=int(sol.nfev),
        t_eval=np.asarray(sol.t) if recorded is not None else np.empty(0),
        trajectory=trajectory,
    )


def ode_sample(
    params: HoldParams,
    model: ScoreModel,
    n_samples: int,
    seed: int = 0,
    threads: int = 1,
    atol: float = 1e-5,
    rtol: float = 1e-5,
    x_init: Optional[np.ndarray] = None,
    snapshot_times: Sequence[float] = (),
) -> SampleResult:
    """Generation by the probability-flow ODE from prior draws."""
    snapshot_times = list(snapshot_times)
    if x_init is not None:
        n_samples = x_init.shape[0]

    def run_chunk(sl: slice, rng: np.random.Generator):
        x = _initial_state(params, model.d, sl, rng, x_init)
        res = prob_flow_ode(params, model, x, "generate", atol, rtol, t_eval=snapshot_times or None)
        if not np.all(np.isfinite(res.state)):
            raise SamplerDivergence(0, params.t_min)
        if not snapshot_times:
            return res.state, res.nfe, []
        lookup = {float(t): s for t, s in zip(res.t_eval, res.trajectory)}
        return res.state, res.nfe, [lookup[float(np.clip(t, params.t_min, params.T))] for t in snapshot_times]

    started = time.perf_counter()
    parts = map_chunks(run_chunk, n_samples, seed, threads)
    return _gather(parts, "ode", started, snapshot_times)


# =============================================================================
# DISPATCH
# =============================================================================
def generate(
    params: HoldParams,
    model: ScoreModel,
    grid: GridSpec,
    n_samples: int,
    seed: int = 0,
    threads: int = 1,
    n_steps: Optional[int] = None,
    sampler: Optional[str] = None,
    snapshot_times: Sequence[float] = (),
) -> SampleResult:
    """Run the sampler named in ``grid`` (or ``sampler``)."""
    sampler = sampler or grid.sampler
    if sampler == "ode":
        return ode_sample(params, model, n_samples, seed, threads, grid.atol, grid.rtol, snapshot_times=snapshot_times)
    time_grid = TimeGrid.from_spec(params, grid, n_steps)
    if sampler == "em":
        return em_reverse(params, model, time_grid, n_samples, seed, threads, snapshot_times=snapshot_times)
    if sampler == "lt":
        return lt_sample(params, model, time_grid, n_samples, seed, threads, grid.b_step, snapshot_times=snapshot_times)
    raise ValueError(f"unknown sampler {sampler!r}")
