import math

import numpy as np
import pytest

from conftest import assert_grad_close, fd_gradient, tiny_model
from polydpo.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from polydpo.denoiser import Adam, Denoiser, DenoiserSpec
from polydpo.diffusion import dm_loss, forward_corrupt, loss_weights, sample
from polydpo.schedule import NoiseSchedule, ScheduleDomainError

COS = NoiseSchedule("cosine")


class TestForwardCorrupt:
    def test_no_corruption_at_zero(self):
        x = np.array([0.7, -1.2])
        out = forward_corrupt(x, 0.0, np.array([3.0, 3.0]), COS)
        np.testing.assert_allclose(out, x, atol=5e-3)

    def test_full_corruption_at_one(self):
        rng = np.random.default_rng(0)
        eps = rng.standard_normal((10_000, 2))
        x = np.full_like(eps, 5.0)
        out = forward_corrupt(x, np.ones(len(x)), eps, COS)
        np.testing.assert_allclose(out, eps, atol=1e-2)

    def test_cosine_midpoint(self):
        out = forward_corrupt(np.array([1.0, 0.0]), 0.5, np.array([0.0, 1.0]), COS)
        np.testing.assert_allclose(out, [math.cos(math.pi / 4), math.sin(math.pi / 4)], rtol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward_corrupt(np.zeros(2), 0.5, np.zeros(3), COS)

    def test_time_domain(self):
        with pytest.raises(ScheduleDomainError):
            forward_corrupt(np.zeros(2), 1.5, np.zeros(2), COS)


class TestDenoiser:
    def test_zero_output_init(self):
        spec = DenoiserSpec(n_conditions=3)
        model = Denoiser.init(spec, np.random.default_rng(0))
        out = model.predict(np.random.default_rng(1).standard_normal((5, 2)), [0, 1, 2, 0, 1], 0.3)
        assert out.shape == (5, 2)
        assert np.all(out == 0.0)

    def test_deterministic(self, backend):
        model = tiny_model()
        x = np.array([[0.3, -0.2]])
        assert np.array_equal(model.predict(x, 1, 0.4), model.predict(x, 1, 0.4))

    def test_default_size(self):
        spec = DenoiserSpec()
        assert spec.layer_sizes == (26, 64, 64, 2)
        model = Denoiser.init(spec, np.random.default_rng(0))
        assert model.n_params == 2 * 8 + 26 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2

    def test_invalid_condition(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.predict(np.zeros((1, 2)), 2, 0.5)
        with pytest.raises(ValueError):
            model.predict(np.zeros((1, 2)), -1, 0.5)

    def test_output_gradient_matches_fd(self, backend):
        model = tiny_model(hidden=(2,))
        assert model.n_params <= 50
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 2))
        c = np.array([0, 1, 1, 0])
        t = rng.random(4)

        def loss(m):
            return float(np.mean(m.predict(x, c, t) ** 2))

        out, cache = model.forward(x, c, t)
        grads = model.backward(cache, 2.0 * out / out.size)
        assert_grad_close(np.concatenate([g.ravel() for g in grads]), fd_gradient(loss, model))


class TestDmLoss:
    def test_perfect_model_has_zero_loss(self):
        # stub that recovers eps exactly from x_t for a single known data point
        x0 = np.array([[0.5, -1.0]])

        class Oracle:
            def predict(self, x_t, c, t):
                return (x_t - COS.alpha(t)[:, None] * x0) / COS.sigma(t)[:, None]

        loss, grads = dm_loss(Oracle(), np.repeat(x0, 16, axis=0), np.zeros(16, int), 0, COS, with_grad=False)
        assert loss == pytest.approx(0.0, abs=1e-20)
        assert grads is None

    def test_zero_model_loss_is_dimension(self):
        spec = DenoiserSpec(dim=2, n_conditions=1)
        model = Denoiser.init(spec, np.random.default_rng(0))
        x = np.zeros((20_000, 2))
        loss, _ = dm_loss(model, x, np.zeros(len(x), int), 7, COS, with_grad=False)
        # chi-square with 2 dof: mean 2, variance 4 -> standard error 2 / sqrt(n)
        assert abs(loss - 2.0) < 4 * 2.0 / math.sqrt(len(x))

    @pytest.mark.parametrize("weight_mode", ["constant", "schedule"])
    def test_gradients_match_fd(self, backend, weight_mode):
        model = tiny_model(hidden=(3,))
        assert model.n_params <= 50
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 2))
        c = rng.integers(2, size=6)

        def loss(m):
            return dm_loss(m, x, c, 11, COS, weight_mode, 1.0, with_grad=False)[0]

        value, grads = dm_loss(model, x, c, 11, COS, weight_mode, 1.0)
        assert value == loss(model)
        assert_grad_close(np.concatenate([g.ravel() for g in grads]), fd_gradient(loss, model))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            dm_loss(tiny_model(), np.zeros((0, 2)), np.zeros(0, int), 0, COS)

    def test_seed_determinism_over_training(self):
        def run():
            model = tiny_model(seed=2, hidden=(8, 8))
            opt = Adam(model.params, 1e-2)
            rng = np.random.default_rng(9)
            x = rng.standard_normal((32, 2))
            c = rng.integers(2, size=32)
            losses = []
            for step in range(100):
                loss, g = dm_loss(model, x, c, step, COS)
                opt.step(model.params, g)
                losses.append(loss)
            return np.array(losses), model.checksum()

        (a, ca), (b, cb) = run(), run()
        assert np.array_equal(a, b) and ca == cb

    def test_loss_weights_modes(self):
        t = np.array([0.2, 0.7])
        np.testing.assert_array_equal(loss_weights(COS, t, "constant", 2.5), [2.5, 2.5])
        np.testing.assert_allclose(loss_weights(COS, t, "schedule"), COS.loss_weight(t))
        with pytest.raises(ValueError):
            loss_weights(COS, t, "learned")


class TestSampler:
    def test_single_step_zero_model_is_affine_in_noise(self):
        spec = DenoiserSpec(n_conditions=2)
        model = Denoiser.init(spec, np.random.default_rng(0))
        out = sample(model, 1, 1, 42, COS, n_samples=3)
        z = np.random.default_rng(42).standard_normal((3, 2))
        np.testing.assert_allclose(out, z / COS.alpha(1.0), rtol=1e-12)

    def test_same_seed_same_output(self):
        model = tiny_model()
        assert np.array_equal(sample(model, 0, 20, 5, COS, 4), sample(model, 0, 20, 5, COS, 4))
        assert not np.array_equal(sample(model, 0, 20, 5, COS, 4), sample(model, 0, 20, 6, COS, 4))

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            sample(tiny_model(), 0, 0, 0, COS)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = tiny_model(hidden=(5, 4))
        sched = NoiseSchedule("linear-logsnr", 8.0, -9.0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, sched)
        back, sched2 = load_checkpoint(path)
        assert sched2 == sched
        assert back.spec == model.spec
        assert all(np.array_equal(a, b) for a, b in zip(model.params, back.params))
        assert checkpoint_bytes(back, sched2) == path.read_bytes()

    def test_header(self):
        blob = checkpoint_bytes(tiny_model(), COS)
        assert blob[:8] == b"PDPOCKPT"
        assert int.from_bytes(blob[8:12], "little") == 1

    def test_rejects_bad_magic_version_and_truncation(self):
        blob = checkpoint_bytes(tiny_model(), COS)
        with pytest.raises(CheckpointError):
            parse_checkpoint(b"NOTACKPT" + blob[8:])
        with pytest.raises(CheckpointError):
            parse_checkpoint(blob[:8] + (2).to_bytes(4, "little") + blob[12:])
        with pytest.raises(CheckpointError):
            parse_checkpoint(blob[:-8])


def test_backends_agree():
    from polydpo import kernels

    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        pytest.skip("compiled kernel not built")
    py = kernels.get_backend("python")
    model = Denoiser.init(DenoiserSpec(n_conditions=3), np.random.default_rng(0), zero_output=False)
    rng = np.random.default_rng(1)
    h0 = rng.standard_normal((128, model.spec.input_dim))
    g = rng.standard_normal((128, 2))
    o1, c1 = py.mlp_forward(h0, model.weights, model.biases)
    o2, c2 = cy.mlp_forward(h0, model.weights, model.biases)
    np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-14)
    for a, b in zip(py.mlp_backward(c1, model.weights, g)[0], cy.mlp_backward(c2, model.weights, g)[0]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
