"""
HOLD Data Loader Module
=======================
Toy dataset generators, their log-densities and CSV import/export.

Datasets:
    - gmm1d:    three-component 1D Gaussian mixture
    - swiss2d:  five small Swiss rolls around fixed centers
    - gaussian: single Gaussian N(m, v) (analytic-score experiments)

All generators take an explicit numpy Generator and are deterministic
under a fixed seed.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.special import logsumexp
from scipy.stats import norm

from modules.hold_config import DatasetSpec, HoldParams
from modules.kernel import GaussianDataScore, GaussianMixtureScore

logger = logging.getLogger(__name__)

# Base path for bundled files (run configs)
DATA_PATH = Path(__file__).parent.parent / "data"

WEIGHT_TOLERANCE = 1e-12


# =============================================================================
# SPECS
# =============================================================================
@dataclass(frozen=True)
class Gmm1dSpec:
    weights: Tuple[float, ...] = (0.34, 0.33, 0.33)
    means: Tuple[float, ...] = (-0.6575, 0.2474, 0.8002)
    stds: Tuple[float, ...] = (0.01, 0.02, 0.01)

    def __post_init__(self):
        if not len(self.weights) == len(self.means) == len(self.stds):
            raise ValueError("weights, means and stds must have equal length")
        if abs(sum(self.weights) - 1.0) > WEIGHT_TOLERANCE or min(self.weights) < 0:
            raise ValueError(f"weights must be nonnegative and sum to 1, got {self.weights}")
        if min(self.stds) <= 0:
            raise ValueError("stds must be positive")

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))


@dataclass(frozen=True)
class SwissRollSpec:
    """
    Five Swiss rolls. Each point is multiplier * (phi cos phi, phi sin phi)
    with phi = 1.5 pi (1 + 2u), plus isotropic noise and a uniformly chosen
    center. With multiplier 0.01 and noise 0.02 the noise dominates the roll
    shape, so each cluster looks like a small blob.
    """
    centers: Tuple[Tuple[float, float], ...] = ((0.0, 0.0), (0.8, 0.8), (0.8, -0.8), (-0.8, -0.8), (-0.8, 0.8))
    noise: float = 0.02
    multiplier: float = 0.01

    def __post_init__(self):
        if len(set(self.centers)) != len(self.centers):
            raise ValueError("centers must be distinct")

    @property
    def n_rolls(self) -> int:
        return len(self.centers)


# =============================================================================
# GENERATORS AND DENSITIES
# =============================================================================
def sample_gmm1d(spec: Gmm1dSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points, shape (n, 1)."""
    comp = rng.choice(len(spec.weights), size=n, p=np.asarray(spec.weights))
    means, stds = np.asarray(spec.means), np.asarray(spec.stds)
    x = means[comp] + stds[comp] * rng.standard_normal(n)
    return x[:, None]


def logpdf_gmm1d(spec: Gmm1dSpec, x: np.ndarray) -> np.ndarray:
    """Mixture log-density; accepts (n,) or (n, 1)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(spec.weights))
    comp = norm.logpdf(x[:, None], loc=np.asarray(spec.means), scale=np.asarray(spec.stds))
    return logsumexp(comp + log_w, axis=1)


def gmm1d_entropy(spec: Gmm1dSpec) -> float:
    """Differential entropy -E[log p] by adaptive quadrature (the true NLL per point)."""
    lo = min(m - 12 * s for m, s in zip(spec.means, spec.stds))
    hi = max(m + 12 * s for m, s in zip(spec.means, spec.stds))

    def integrand(x: float) -> float:
        lp = float(logpdf_gmm1d(spec, np.array([x]))[0])
        return -math.exp(lp) * lp if np.isfinite(lp) else 0.0

    value, _ = integrate.quad(integrand, lo, hi, points=sorted(spec.means), limit=500)
    logger.debug("gmm1d entropy %.6f nats", value)
    return value


def sample_swiss(spec: SwissRollSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points, shape (n, 2)."""
    phi = 1.5 * math.pi * (1.0 + 2.0 * rng.uniform(size=n))
    roll = spec.multiplier * np.stack([phi * np.cos(phi), phi * np.sin(phi)], axis=1)
    noise = spec.noise * rng.standard_normal((n, 2))
    centers = np.asarray(spec.centers)[rng.integers(spec.n_rolls, size=n)]
    return roll + noise + centers


def sample_gaussian(mean: float, var: float, n: int, rng: np.random.Generator, d: int = 1) -> np.ndarray:
    return mean + math.sqrt(var) * rng.standard_normal((n, d))


def gaussian_entropy(var: float, d: int = 1) -> float:
    """-E[log p] for N(m, v I_d)."""
    return d * (0.5 * math.log(2.0 * math.pi * var) + 0.5)


# =============================================================================
# DATASET HANDLE
# =============================================================================
@dataclass(frozen=True)
class Dataset:
    """A named sampleable dataset of dimension d, with optional log-density."""
    name: str
    d: int
    sampler: Callable[[int, np.random.Generator], np.ndarray]
    logpdf: Optional[Callable[[np.ndarray], np.ndarray]] = None
    entropy: Optional[float] = None
    centers: Optional[np.ndarray] = None
    exact_score: Optional[Callable[[HoldParams], object]] = None  # params -> analytic score model

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.sampler(n, rng)


def make_dataset(spec: DatasetSpec) -> Dataset:
    """Build the dataset handle named by the run configuration."""
    if spec.name == "gmm1d":
        gmm = Gmm1dSpec()
        return Dataset(
            name="gmm1d",
            d=1,
            sampler=lambda n, rng: sample_gmm1d(gmm, n, rng),
            logpdf=lambda x: logpdf_gmm1d(gmm, x),
            entropy=gmm1d_entropy(gmm),
            centers=np.asarray(gmm.means)[:, None],
            exact_score=lambda params: GaussianMixtureScore(
                params, np.asarray(gmm.weights), np.asarray(gmm.means), np.asarray(gmm.stds) ** 2
            ),
        )
    if spec.name == "swiss2d":
        swiss = SwissRollSpec()
        return Dataset(
            name="swiss2d",
            d=2,
            sampler=lambda n, rng: sample_swiss(swiss, n, rng),
            centers=np.asarray(swiss.centers),
        )
    if spec.name == "gaussian":
        mean, var = spec.mean, spec.var
        return Dataset(
            name="gaussian",
            d=1,
            sampler=lambda n, rng: sample_gaussian(mean, var, n, rng),
            logpdf=lambda x: norm.logpdf(np.asarray(x).reshape(-1), loc=mean, scale=math.sqrt(var)),
            entropy=gaussian_entropy(var),
            exact_score=lambda params: GaussianDataScore(params, mean, var),
        )
    raise ValueError(f"unknown dataset {spec.name!r}")


# =============================================================================
# CSV I/O
# =============================================================================
def samples_frame(samples: np.ndarray) -> pd.DataFrame:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    return pd.DataFrame(samples, columns=[f"x{j}" for j in range(samples.shape[1])])


def export_dataset_csv(
    dataset: Dataset,
    n: int,
    path: Union[str, Path],
    seed: int = 0,
    preamble: Optional[str] = None,
) -> Path:
    """Draw n points with a fresh seeded generator and write them (d columns)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = samples_frame(dataset.sample(n, np.random.default_rng(seed)))
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble)
        frame.to_csv(fh, index=False, float_format="%.17g")
    return path


def load_samples_csv(path: Union[str, Path]) -> np.ndarray:
    """Read a samples CSV (comment lines starting with '#' are skipped)."""
    frame = pd.read_csv(path, comment="#")
    return frame.to_numpy(dtype=np.float64)
