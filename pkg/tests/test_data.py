"""Tests for the toy datasets and sample CSV files."""

import math

import numpy as np
import pytest
from scipy import integrate

from modules.data_loader import (
    Gmm1dSpec,
    SwissRollSpec,
    export_dataset_csv,
    gaussian_entropy,
    gmm1d_entropy,
    load_samples_csv,
    logpdf_gmm1d,
    make_dataset,
    sample_gmm1d,
    sample_swiss,
)
from modules.hold_config import DatasetSpec
from modules.metrics import cluster_masses


class TestGmm1d:
    def test_mixture_mean(self, rng):
        spec = Gmm1dSpec()
        assert spec.mean == pytest.approx(0.122158, abs=1e-9)
        assert sample_gmm1d(spec, 100_000, rng).mean() == pytest.approx(spec.mean, abs=0.01)

    def test_logpdf_integrates_to_one(self):
        spec = Gmm1dSpec()
        total, _ = integrate.quad(lambda x: math.exp(logpdf_gmm1d(spec, np.array([x]))[0]), -2, 2,
                                  points=sorted(spec.means), limit=500)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_entropy_matches_sample_average(self, rng):
        spec = Gmm1dSpec()
        x = sample_gmm1d(spec, 200_000, rng)
        assert gmm1d_entropy(spec) == pytest.approx(-logpdf_gmm1d(spec, x).mean(), abs=0.02)

    def test_degenerate_weights(self, rng):
        spec = Gmm1dSpec(weights=(1.0, 0.0, 0.0))
        x = sample_gmm1d(spec, 1000, rng)
        assert np.all(np.abs(x - spec.means[0]) < 0.1)
        assert np.all(np.isfinite(logpdf_gmm1d(spec, x)))

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            Gmm1dSpec(weights=(0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            Gmm1dSpec(stds=(0.01, 0.0, 0.01))


class TestSwissRoll:
    def test_clusters_are_balanced_and_tight(self, rng):
        spec = SwissRollSpec()
        x = sample_swiss(spec, 50_000, rng)
        masses = cluster_masses(x, np.asarray(spec.centers))
        np.testing.assert_allclose(masses, 0.2, atol=0.01)
        nearest = np.min(np.linalg.norm(x[:, None, :] - np.asarray(spec.centers)[None], axis=2), axis=1)
        assert nearest.max() < spec.multiplier * 4.5 * math.pi + 8 * spec.noise

    def test_duplicate_centers_rejected(self):
        with pytest.raises(ValueError):
            SwissRollSpec(centers=((0.0, 0.0), (0.0, 0.0)))


class TestDatasetHandle:
    @pytest.mark.parametrize("name, d", [("gmm1d", 1), ("swiss2d", 2), ("gaussian", 1)])
    def test_dimensions(self, name, d, rng):
        dataset = make_dataset(DatasetSpec(name=name))
        assert dataset.d == d
        assert dataset.sample(10, rng).shape == (10, d)

    def test_exact_score_where_known(self, params):
        assert make_dataset(DatasetSpec(name="swiss2d")).exact_score is None
        for name in ("gmm1d", "gaussian"):
            model = make_dataset(DatasetSpec(name=name)).exact_score(params)
            assert model.d == 1
            assert model.score(np.zeros((3, 3, 1)), 0.5).shape == (3, 1)

    def test_gaussian_entropy(self):
        dataset = make_dataset(DatasetSpec(name="gaussian", var=0.04))
        assert dataset.entropy == pytest.approx(gaussian_entropy(0.04))
        assert gaussian_entropy(0.04, d=2) == pytest.approx(2 * (0.5 * math.log(2 * math.pi * 0.04) + 0.5))

    def test_fixed_seed_is_deterministic(self):
        dataset = make_dataset(DatasetSpec(name="swiss2d"))
        a = dataset.sample(100, np.random.default_rng(9))
        b = dataset.sample(100, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestCsv:
    def test_export_and_load(self, tmp_path):
        dataset = make_dataset(DatasetSpec(name="swiss2d"))
        path = export_dataset_csv(dataset, 50, tmp_path / "swiss.csv", seed=3, preamble="# seed=3\n")
        text = path.read_text().splitlines()
        assert text[0] == "# seed=3"
        assert text[1] == "x0,x1"
        loaded = load_samples_csv(path)
        np.testing.assert_array_equal(loaded, dataset.sample(50, np.random.default_rng(3)))
