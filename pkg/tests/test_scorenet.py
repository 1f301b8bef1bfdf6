"""Tests for the score network, its hand-written gradients and checkpoints."""

import numpy as np
import pytest

from modules.errors import CheckpointError
from modules.hold_config import NetSpec
from modules.scorenet import (
    CHECKPOINT_MAGIC,
    Checkpoint,
    ScoreNet,
    ZeroScore,
    backward,
    encode_time,
    forward,
    init_params,
    load_checkpoint,
    n_params,
    offset_table,
    save_checkpoint,
    unpack,
)


def _inputs(spec, rng, n=5):
    x = rng.normal(size=(n, 3, spec.d))
    t = rng.uniform(0.01, 1.0, size=n)
    return x, t


def _random_theta(spec, rng):
    return rng.normal(size=n_params(spec)) * 0.5


class TestLayout:
    def test_param_count(self):
        spec = NetSpec(d=2, hidden_width=4, n_hidden=2)
        # (6+1)*4+4 + 4*4+4 + 4*2+2
        assert n_params(spec) == 32 + 20 + 10

    def test_offsets_are_contiguous(self, small_spec):
        table = offset_table(small_spec)
        assert table[0].w_start == 0
        for prev, nxt in zip(table[:-1], table[1:]):
            assert nxt.w_start == prev.end

    def test_unpack_rejects_wrong_length(self, small_spec):
        with pytest.raises(ValueError):
            unpack(small_spec, np.zeros(3))

    def test_sinusoidal_input_width(self):
        spec = NetSpec(d=1, time_encoding="sinusoidal", n_frequencies=4)
        assert spec.input_width == 3 + 8
        assert encode_time(spec, np.array([0.2, 0.5])).shape == (2, 8)


class TestForward:
    def test_initial_network_outputs_zero(self, small_spec, rng):
        params = init_params(small_spec, rng)
        x, t = _inputs(small_spec, rng)
        np.testing.assert_array_equal(forward(small_spec, params, x, t), np.zeros((5, 1)))

    def test_zero_params_output_zero(self, small_spec, rng):
        x, t = _inputs(small_spec, rng)
        out = forward(small_spec, np.zeros(n_params(small_spec)), x, t)
        np.testing.assert_array_equal(out, 0.0)

    def test_fixed_seed_is_bit_identical(self, small_spec):
        a = init_params(small_spec, np.random.default_rng(7)).values
        b = init_params(small_spec, np.random.default_rng(7)).values
        np.testing.assert_array_equal(a, b)
        x, t = _inputs(small_spec, np.random.default_rng(1))
        theta = _random_theta(small_spec, np.random.default_rng(2))
        np.testing.assert_array_equal(forward(small_spec, theta, x, t), forward(small_spec, theta, x, t))

    def test_output_shape(self, rng):
        spec = NetSpec(d=2, hidden_width=6, n_hidden=3)
        x, t = _inputs(spec, rng, n=4)
        assert forward(spec, _random_theta(spec, rng), x, t).shape == (4, 2)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self, small_spec, rng):
        x, t = _inputs(small_spec, rng)
        grad, grad_x = backward(small_spec, _random_theta(small_spec, rng), x, t, np.zeros((5, 1)))
        assert not grad.any()
        assert not grad_x.any()

    def test_param_gradient_matches_finite_differences(self, small_spec, rng):
        x, t = _inputs(small_spec, rng)
        theta = _random_theta(small_spec, rng)
        upstream = rng.normal(size=(5, 1))
        grad, _ = backward(small_spec, theta, x, t, upstream)
        h = 1e-6
        for i in rng.choice(theta.size, size=40, replace=False):
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            fd = (np.sum(upstream * forward(small_spec, up, x, t)) - np.sum(upstream * forward(small_spec, down, x, t))) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_input_gradient_matches_finite_differences(self, rng):
        spec = NetSpec(d=2, hidden_width=8, n_hidden=2)
        x, t = _inputs(spec, rng, n=3)
        theta = _random_theta(spec, rng)
        upstream = rng.normal(size=(3, 2))
        _, grad_x = backward(spec, theta, x, t, upstream)
        h = 1e-6
        for block in range(3):
            for j in range(2):
                up, down = x.copy(), x.copy()
                up[:, block, j] += h
                down[:, block, j] -= h
                fd = np.sum(upstream * (forward(spec, theta, up, t) - forward(spec, theta, down, t)), axis=1) / (2 * h)
                np.testing.assert_allclose(grad_x[:, block, j], fd, rtol=1e-5, atol=1e-8)

    def test_gradients_over_random_configs(self):
        rng = np.random.default_rng(99)
        h = 1e-6
        for _ in range(50):
            spec = NetSpec(
                d=int(rng.integers(1, 3)),
                hidden_width=int(rng.integers(2, 9)),
                n_hidden=int(rng.integers(1, 4)),
                time_encoding=str(rng.choice(["concat_scalar", "sinusoidal"])),
                n_frequencies=int(rng.integers(1, 4)),
            )
            x, t = _inputs(spec, rng, n=3)
            theta = _random_theta(spec, rng)
            upstream = rng.normal(size=(3, spec.d))
            grad, _ = backward(spec, theta, x, t, upstream)
            for i in rng.choice(theta.size, size=min(5, theta.size), replace=False):
                up, down = theta.copy(), theta.copy()
                up[i] += h
                down[i] -= h
                fd = (np.sum(upstream * forward(spec, up, x, t)) - np.sum(upstream * forward(spec, down, x, t))) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestScoreModels:
    def test_scorenet_vjp_matches_backward(self, small_spec, rng):
        theta = _random_theta(small_spec, rng)
        model = ScoreNet(small_spec, theta)
        x, t = _inputs(small_spec, rng)
        v = rng.normal(size=(5, 1))
        np.testing.assert_array_equal(model.score_vjp(x, t, v), backward(small_spec, theta, x, t, v)[1])

    def test_zero_score(self, rng):
        model = ZeroScore(2)
        x = rng.normal(size=(4, 3, 2))
        assert model.score(x, 0.5).shape == (4, 2)
        assert not model.score_vjp(x, 0.5, np.ones((4, 2))).any()


class TestCheckpoint:
    def _checkpoint(self, spec, rng):
        params = init_params(spec, rng).values
        return Checkpoint(
            spec=spec, params=params, ema=params * 0.5, step=12, config_hash="0123456789abcdef",
            rng_state=np.random.default_rng(3).bit_generator.state,
        )

    def test_round_trip(self, small_spec, rng, tmp_path):
        ckpt = self._checkpoint(small_spec, rng)
        path = save_checkpoint(tmp_path / "a.ckpt", ckpt)
        loaded = load_checkpoint(path)
        assert loaded.spec == small_spec
        assert loaded.step == 12
        assert loaded.config_hash == "0123456789abcdef"
        np.testing.assert_array_equal(loaded.params, ckpt.params)
        np.testing.assert_array_equal(loaded.ema, ckpt.ema)
        restored = np.random.default_rng()
        restored.bit_generator.state = loaded.rng_state
        assert restored.random() == np.random.default_rng(3).random()

    def test_identical_bytes(self, small_spec, tmp_path):
        a = save_checkpoint(tmp_path / "a.ckpt", self._checkpoint(small_spec, np.random.default_rng(0)))
        b = save_checkpoint(tmp_path / "b.ckpt", self._checkpoint(small_spec, np.random.default_rng(0)))
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes().startswith(CHECKPOINT_MAGIC)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
