"""
HOLD Metrics Module
===================
Distribution distances between sample sets and per-cluster mass.
"""

import numpy as np
from scipy.stats import wasserstein_distance


def w1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """First Wasserstein distance between two 1D empirical laws (sorted coupling)."""
    return float(wasserstein_distance(np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()))


def random_directions(n_dirs: int, rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    v = rng.standard_normal((n_dirs, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_w1_2d(a: np.ndarray, b: np.ndarray, n_dirs: int, rng: np.random.Generator) -> float:
    """Average of w1_1d over random unit projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dirs = random_directions(n_dirs, rng, a.shape[1])
    return float(np.mean([w1_1d(a @ u, b @ u) for u in dirs]))


def sample_distance(a: np.ndarray, b: np.ndarray, n_dirs: int, rng: np.random.Generator) -> float:
    """w1_1d for d=1, sliced W1 otherwise."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1 or a.shape[1] == 1:
        return w1_1d(a, b)
    return sliced_w1_2d(a, b, n_dirs, rng)


def cluster_masses(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Fraction of samples whose nearest center is each center."""
    samples = np.asarray(samples, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if centers.ndim == 1:
        centers = centers[:, None]
    dist = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    labels = np.argmin(dist, axis=1)
    return np.bincount(labels, minlength=len(centers)) / len(samples)
