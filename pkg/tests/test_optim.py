import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfine import finetune, nn, optim
from dpfine.errors import NumericFailure


def tiny_model(seed=0):
    return nn.build_small_cnn(seed=seed, width=4, hidden=8, classes=4)


def make_step_inputs(model, rng, batch=5, k=2):
    x_aug = rng.random((batch, k, *model.input_shape))
    labels = rng.integers(0, 4, batch)
    return x_aug, labels


class TestPoissonSample:
    def test_q_zero_always_empty(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert len(optim.poisson_sample(100, 0.0, rng)) == 0

    def test_q_one_always_full(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            np.testing.assert_array_equal(optim.poisson_sample(50, 1.0, rng), np.arange(50))

    def test_binomial_mean_within_three_standard_errors(self):
        rng = np.random.default_rng(7)
        n, q, draws = 10_000, 0.5, 1000
        sizes = [len(optim.poisson_sample(n, q, rng)) for _ in range(draws)]
        se = math.sqrt(n * q * (1 - q) / draws)
        assert abs(np.mean(sizes) - n * q) < 3 * se

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            optim.poisson_sample(10, 1.5, np.random.default_rng(0))


class TestAugmentationAverage:
    def test_k1_identity(self, rng):
        g = rng.standard_normal((1, 16))
        np.testing.assert_array_equal(optim.augmentation_average(g), g[0])

    def test_opposite_rows_cancel(self, rng):
        g = rng.standard_normal(16)
        np.testing.assert_allclose(optim.augmentation_average([g, -g]), 0.0, atol=1e-16)

    def test_identical_rows_unchanged(self, rng):
        g = rng.standard_normal(16)
        np.testing.assert_allclose(optim.augmentation_average([g, g, g]), g, rtol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            optim.augmentation_average(np.empty((0, 4)))


class TestClip:
    def test_three_four_five(self):
        np.testing.assert_allclose(optim.clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], rtol=1e-15)

    def test_under_bound_unchanged(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(optim.clip(g, 1.0), g)

    def test_zero_vector_safe(self):
        np.testing.assert_array_equal(optim.clip(np.zeros(5), 1.0), np.zeros(5))

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericFailure):
            optim.clip(np.array([np.inf, 0.0]), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 20.0))
    def test_norm_bound_and_identity(self, seed, c):
        g = np.random.default_rng(seed).standard_normal(12) * 3
        clipped = optim.clip(g, c)
        assert np.linalg.norm(clipped) <= c * (1 + 1e-12)
        if np.linalg.norm(g) <= c:
            assert np.array_equal(clipped, g)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
    def test_direction_preserved_under_scaling(self, seed, lam):
        g = np.random.default_rng(seed).standard_normal(8)
        clipped = optim.clip(lam * g, 1.0)
        cos = np.dot(clipped, g) / (np.linalg.norm(clipped) * np.linalg.norm(g))
        assert cos == pytest.approx(1.0, abs=1e-9)

    def test_clip_rows_bound_many(self, rng):
        rows = rng.standard_normal((10_000, 8)) * rng.gamma(1.0, 2.0, size=(10_000, 1))
        pe = optim.clip_rows(optim.PerExampleGrads(rows), 1.0)
        norms = np.linalg.norm(pe.rows, axis=1)
        assert (norms <= 1.0 + 1e-12).all()
        under = np.linalg.norm(rows, axis=1) <= 1.0
        assert np.array_equal(pe.rows[under], rows[under])


class TestNoisyAggregate:
    def test_sigma_zero_exact_mean(self, rng):
        rows = rng.standard_normal((4, 6)) * 0.1
        pe = optim.clip_rows(optim.PerExampleGrads(rows), 10.0)
        out = optim.noisy_aggregate(pe, 10.0, 0.0, 2.0, np.zeros(6))
        np.testing.assert_allclose(out, rows.sum(axis=0) / 2.0, rtol=1e-15)

    def test_requires_clipped(self, rng):
        pe = optim.PerExampleGrads(rng.standard_normal((2, 3)))
        with pytest.raises(ValueError, match="clipped"):
            optim.noisy_aggregate(pe, 1.0, 1.0, 1.0, np.zeros(3))

    def test_noise_std_statistics(self):
        # zero gradients, sigma=1, C=2, B=1: per-coordinate std ~ 2.0
        rng = np.random.default_rng(42)
        d, draws = 8, 100_000
        pe = optim.clip_rows(optim.PerExampleGrads(np.zeros((1, d))), 2.0)
        samples = np.stack(
            [
                optim.noisy_aggregate(pe, 2.0, 1.0, 1.0, rng.standard_normal(d))
                for _ in range(draws)
            ]
        )
        stds = samples.std(axis=0)
        np.testing.assert_allclose(stds, 2.0, rtol=0.02)

    def test_norm_c_gradient_survives_exactly(self, rng):
        g = rng.standard_normal(9)
        g *= 3.0 / np.linalg.norm(g)
        pe = optim.clip_rows(optim.PerExampleGrads(g[None]), 3.0)
        out = optim.noisy_aggregate(pe, 3.0, 0.0, 1.0, np.zeros(9))
        np.testing.assert_allclose(out, g, rtol=1e-12)


class TestDpSgdStep:
    def test_all_false_mask_leaves_model_bitwise(self, rng):
        model = tiny_model()
        mask = finetune.TrainableMask(np.zeros(model.num_params, dtype=bool), {})
        x_aug, labels = make_step_inputs(model, rng)
        before = {l.name: {p: a.copy() for p, a in l.params.items()} for l in model.layers}
        out, _ = optim.dp_sgd_step(
            model, x_aug, labels, mask,
            optim.ClipConfig(1.0), optim.NoiseConfig(1.0, 0),
            optim.StepConfig(0.5, 4.0, 2), np.random.default_rng(0),
        )
        for layer in out.layers:
            for p, arr in layer.params.items():
                assert np.array_equal(arr, before[layer.name][p])

    def test_degenerates_to_plain_sgd(self, rng):
        # sigma=0 and C above every gradient norm: ordinary SGD on the mean.
        model = tiny_model(seed=3)
        mask = finetune.select_trainable(model, finetune.FineTuneStrategy("whole_model"))
        x = rng.random((6, *model.input_shape))
        labels = rng.integers(0, 4, 6)
        lr, batch = 0.25, 6.0
        rows = nn.backward_per_example(model, x, labels)
        assert np.linalg.norm(rows, axis=1).max() < 1e3
        expected = nn.flatten_params(model) - lr * rows.mean(axis=0)

        out, _ = optim.dp_sgd_step(
            model, x[:, None], labels, mask,
            optim.ClipConfig(1e3), optim.NoiseConfig(0.0, 0),
            optim.StepConfig(lr, batch, 1), np.random.default_rng(0),
        )
        np.testing.assert_allclose(nn.flatten_params(out), expected, rtol=1e-12, atol=1e-15)

    def test_seeded_determinism_bitwise(self, rng):
        model = tiny_model(seed=5)
        mask = finetune.select_trainable(model, finetune.FineTuneStrategy("first_last_layers"))
        x_aug, labels = make_step_inputs(model, rng)
        args = (
            model, x_aug, labels, mask,
            optim.ClipConfig(1.0), optim.NoiseConfig(1.3, 17),
            optim.StepConfig(0.5, 4.0, 2),
        )
        out1, _ = optim.dp_sgd_step(*args, np.random.default_rng(17))
        out2, _ = optim.dp_sgd_step(*args, np.random.default_rng(17))
        assert np.array_equal(nn.flatten_params(out1), nn.flatten_params(out2))

    def test_empty_batch_noise_only_step(self):
        model = tiny_model(seed=6)
        mask = finetune.select_trainable(model, finetune.FineTuneStrategy("last_layer"))
        x_aug = np.empty((0, 2, *model.input_shape))
        out, diag = optim.dp_sgd_step(
            model, x_aug, np.empty(0, dtype=int), mask,
            optim.ClipConfig(1.0), optim.NoiseConfig(1.0, 0),
            optim.StepConfig(0.5, 4.0, 2), np.random.default_rng(3),
        )
        assert diag["batch_size"] == 0
        # trainable params moved (noise applied), frozen ones did not
        assert not np.array_equal(
            out.layer("head").params["weight"], model.layer("head").params["weight"]
        )
        assert np.array_equal(
            out.layer("conv1").params["weight"], model.layer("conv1").params["weight"]
        )

    def test_noise_stream_advances_d_draws_per_step(self, rng):
        # Identical noise regardless of batch content: stream position
        # depends only on the step index.
        model = tiny_model(seed=7)
        mask = finetune.select_trainable(model, finetune.FineTuneStrategy("last_layer"))
        x1, l1 = make_step_inputs(model, rng, batch=3)
        x2, l2 = make_step_inputs(model, rng, batch=5)
        cfg = (optim.ClipConfig(1.0), optim.NoiseConfig(1.0, 0), optim.StepConfig(0.5, 4.0, 2))

        rng_a = np.random.default_rng(11)
        optim.dp_sgd_step(model, x1, l1, mask, *cfg, rng_a)
        after_a = rng_a.standard_normal(4)
        rng_b = np.random.default_rng(11)
        optim.dp_sgd_step(model, x2, l2, mask, *cfg, rng_b)
        after_b = rng_b.standard_normal(4)
        np.testing.assert_array_equal(after_a, after_b)

    def test_sensitivity_bound_brute_force(self, rng):
        # Replacing one example changes the pre-noise clipped sum by <= 2C.
        c = 0.7
        for _ in range(25):
            rows = rng.standard_normal((3, 12)) * rng.gamma(1.0, 2.0)
            alt = rng.standard_normal(12) * rng.gamma(1.0, 3.0)
            base = optim.clip_rows(optim.PerExampleGrads(rows), c).rows.sum(axis=0)
            for j in range(3):
                mod = rows.copy()
                mod[j] = alt
                s2 = optim.clip_rows(optim.PerExampleGrads(mod), c).rows.sum(axis=0)
                assert np.linalg.norm(base - s2) <= 2 * c * (1 + 1e-12)


class TestEma:
    def test_single_update(self):
        ema = optim.EmaState(0.9, np.zeros(3))
        out = optim.ema_update(ema, np.ones(3))
        np.testing.assert_allclose(out.shadow, 0.1, rtol=1e-15)

    def test_geometric_convergence(self):
        mu, c, t = 0.8, 2.5, 12
        ema = optim.EmaState(mu, np.zeros(2))
        for _ in range(t):
            ema = optim.ema_update(ema, np.full(2, c))
        np.testing.assert_allclose(np.abs(ema.shadow - c), mu**t * c, rtol=1e-12)

    def test_mu_zero_copies(self, rng):
        theta = rng.standard_normal(5)
        out = optim.ema_update(optim.EmaState(0.0, np.zeros(5)), theta)
        np.testing.assert_array_equal(out.shadow, theta)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            optim.ema_update(optim.EmaState(0.5, np.zeros(3)), np.zeros(4))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 0.99), st.integers(0, 2**31 - 1))
    def test_closed_form_constant_target(self, mu, seed):
        r = np.random.default_rng(seed)
        start, target = r.standard_normal(3), r.standard_normal(3)
        ema = optim.EmaState(mu, start.copy())
        for t in range(1, 6):
            ema = optim.ema_update(ema, target)
            np.testing.assert_allclose(
                ema.shadow - target, (mu**t) * (start - target), atol=1e-12
            )

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            optim.EmaState(1.0, np.zeros(2))
