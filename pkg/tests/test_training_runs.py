"""End-to-end runs on the shipped configs: train, then sample and score the trained network."""

import math

import numpy as np
import pytest

from components.commands import REFERENCE_STREAM, distance_to_data, reference_samples
from modules.data_loader import DATA_PATH, make_dataset
from modules.hold_config import load_config
from modules.likelihood import nll_bound
from modules.metrics import cluster_masses
from modules.objective import draw_bcsm_batch, expected_gaussian_loss_floor, model_loss
from modules.parallel import stream
from modules.samplers import generate
from modules.scorenet import load_checkpoint
from modules.trainer import train

pytestmark = pytest.mark.slow

CONFIGS = DATA_PATH / "configs"
FLOOR_POINTS = 20_000


def _trained(tmp_path_factory, name):
    run = load_config(CONFIGS / f"{name}.yaml", **{"run.out_dir": str(tmp_path_factory.mktemp(name))})
    dataset = make_dataset(run.data)
    result = train(run, dataset, progress=False)
    return run, dataset, load_checkpoint(result.checkpoint).model(use_ema=True)


def _paired_losses(run, dataset, model):
    """Trained and exact-score losses on one shared BCSM batch."""
    q0 = dataset.sample(FLOOR_POINTS, stream(run.seed, 7))
    batch = draw_bcsm_batch(run.kernel, q0, stream(run.seed, 8))
    return model_loss(model, batch), model_loss(dataset.exact_score(run.kernel), batch)


@pytest.fixture(scope="module")
def gmm(tmp_path_factory):
    return _trained(tmp_path_factory, "gmm1d")


@pytest.fixture(scope="module")
def gaussian(tmp_path_factory):
    return _trained(tmp_path_factory, "gaussian")


@pytest.fixture(scope="module")
def swiss(tmp_path_factory):
    return _trained(tmp_path_factory, "swiss2d")


class TestGaussianMixtureRun:
    def test_samples_match_data_and_keep_every_mode(self, gmm):
        run, dataset, model = gmm
        result = generate(run.kernel, model, run.grid, run.grid.n_samples, run.seed, run.threads)
        assert distance_to_data(run, result.samples, reference_samples(run, dataset)) <= 0.05
        assert cluster_masses(result.samples, dataset.centers).min() >= 0.05

    @pytest.mark.parametrize("n_steps", [50, 150, 500])
    def test_split_sampler_not_worse_than_euler_maruyama(self, gmm, n_steps):
        run, dataset, model = gmm
        reference = reference_samples(run, dataset)
        dist = {}
        for sampler in ("lt", "em"):
            dist[sampler] = [
                distance_to_data(run, generate(run.kernel, model, run.grid, run.grid.n_samples, run.seed + rep,
                                               run.threads, n_steps=n_steps, sampler=sampler).samples, reference)
                for rep in range(3)
            ]
        se = math.hypot(np.std(dist["lt"], ddof=1), np.std(dist["em"], ddof=1)) / math.sqrt(3)
        assert np.mean(dist["lt"]) <= np.mean(dist["em"]) + 2 * se

    def test_nll_bound_close_to_entropy(self, gmm):
        run, dataset, model = gmm
        q0 = dataset.sample(run.eval.n_points, stream(run.seed, REFERENCE_STREAM))
        est = nll_bound(run.kernel, model, q0, run.eval.n_aux, run.eval.n_hutch, run.seed,
                        run.grid.atol, run.grid.rtol, run.threads)
        gap = est.bound_nats - dataset.entropy
        assert -3 * est.std_error <= gap <= 0.15

    def test_loss_near_mixture_floor(self, gmm):
        trained, exact = _paired_losses(*gmm)
        assert trained.mean() <= 1.10 * exact.mean()


class TestGaussianRun:
    def test_loss_near_analytic_floor(self, gaussian):
        run, dataset, model = gaussian
        trained, exact = _paired_losses(run, dataset, model)
        floor = expected_gaussian_loss_floor(run.kernel, run.data.var)
        assert abs(exact.mean() - floor) <= 5 * exact.std() / math.sqrt(exact.size)
        assert trained.mean() <= 1.05 * exact.mean()


class TestSwissRollRun:
    def test_clusters_equally_weighted(self, swiss):
        run, dataset, model = swiss
        result = generate(run.kernel, model, run.grid, run.grid.n_samples, run.seed, run.threads)
        np.testing.assert_allclose(cluster_masses(result.samples, dataset.centers), 0.2, atol=0.05)
