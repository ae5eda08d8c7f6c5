import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saft.model import build_model, linear, relu, save_checkpoint
from saft.noise import NoiseSpec, perturb_weights, sample_noise, wrap_noisy


def small_model(seed=7):
    return build_model(
        [linear("f1", 6, 8), relu("a1"), linear("f2", 8, 4)], (6,), seed
    )


class TestNoiseSpec:
    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError, match="scale"):
            NoiseSpec("gaussian", "multiplicative", -0.1, 0)

    def test_unknown_distribution_rejected(self):
        with pytest.raises(ValueError, match="distribution"):
            NoiseSpec("poisson", "multiplicative", 0.1, 0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            NoiseSpec("gaussian", "squared", 0.1, 0)


class TestSampleNoise:
    def test_zero_sigma_all_zero(self):
        spec = NoiseSpec("gaussian", "multiplicative", 0.0, 3)
        draws = sample_noise((100,), spec, ("layer", 0, 0))
        assert np.array_equal(draws, np.zeros(100))

    def test_gaussian_sample_statistics(self):
        # 5% relative weight noise, a typical hardware-noise magnitude
        spec = NoiseSpec("gaussian", "multiplicative", 0.05, 99)
        draws = sample_noise((100_000,), spec, ("w", 0, 0))
        assert abs(draws.mean()) < 1e-3
        assert abs(draws.std() - 0.05) < 0.02 * 0.05

    def test_uniform_bounds(self):
        spec = NoiseSpec("uniform", "additive", 0.01, 5)
        draws = sample_noise((100_000,), spec, ("w", 0, 0))
        assert draws.min() >= -0.01 and draws.max() <= 0.01
        # spread should actually reach toward the bounds
        assert draws.max() > 0.009 and draws.min() < -0.009

    def test_deterministic_given_seed_and_key(self):
        spec = NoiseSpec("gaussian", "additive", 0.2, 8)
        a = sample_noise((32,), spec, ("conv1", 0, 4))
        b = sample_noise((32,), spec, ("conv1", 0, 4))
        assert np.array_equal(a, b)

    def test_streams_independent_across_layers_and_steps(self):
        spec = NoiseSpec("gaussian", "additive", 0.2, 8)
        base = sample_noise((32,), spec, ("conv1", 0, 4))
        assert not np.array_equal(base, sample_noise((32,), spec, ("conv2", 0, 4)))
        assert not np.array_equal(base, sample_noise((32,), spec, ("conv1", 0, 5)))
        assert not np.array_equal(base, sample_noise((32,), spec, ("conv1", 1, 4)))


class TestPerturbWeights:
    def test_multiplicative_zero_sigma_bitwise(self):
        w = np.random.default_rng(0).normal(size=(8, 8))
        spec = NoiseSpec("gaussian", "multiplicative", 0.0, 1)
        assert np.array_equal(perturb_weights(w, spec, ("l", 0, 0)), w)

    def test_additive_zero_r1_bitwise(self):
        w = np.random.default_rng(0).normal(size=(8, 8))
        spec = NoiseSpec("uniform", "additive", 0.0, 1)
        assert np.array_equal(perturb_weights(w, spec, ("l", 0, 0)), w)

    def test_input_array_unmodified(self):
        w = np.random.default_rng(1).normal(size=(16, 16))
        before = w.copy()
        perturb_weights(w, NoiseSpec("gaussian", "multiplicative", 0.5, 2), ("l", 0, 0))
        assert np.array_equal(w, before)

    def test_multiplicative_relative_std(self):
        w = np.ones(100_000)
        spec = NoiseSpec("gaussian", "multiplicative", 0.05, 11)
        out = perturb_weights(w, spec, ("l", 0, 0))
        assert abs((out - w).std() - 0.05) < 0.02 * 0.05

    def test_additive_matches_sampled_noise(self):
        w = np.random.default_rng(3).normal(size=(50,))
        spec = NoiseSpec("gaussian", "additive", 0.1, 7)
        eps = sample_noise(w.shape, spec, ("l", 0, 2))
        assert np.array_equal(perturb_weights(w, spec, ("l", 0, 2)), w + eps)

    def test_multiplicative_matches_formula(self):
        w = np.random.default_rng(3).normal(size=(50,))
        spec = NoiseSpec("uniform", "multiplicative", 0.1, 7)
        eps = sample_noise(w.shape, spec, ("l", 0, 2))
        assert np.array_equal(perturb_weights(w, spec, ("l", 0, 2)), w * (1.0 + eps))


class TestNoisyModel:
    def test_zero_noise_bitwise_equal_forward(self):
        model = small_model()
        for spec in (
            NoiseSpec("gaussian", "multiplicative", 0.0, 4),
            NoiseSpec("uniform", "additive", 0.0, 4),
        ):
            noisy = wrap_noisy(model, spec)
            rng = np.random.default_rng(0)
            for _ in range(10):
                x = rng.normal(size=(3, 6))
                assert np.array_equal(noisy.forward(x), model.forward(x).data)

    def test_relu_only_model_unaffected(self):
        model = build_model([relu("a1"), relu("a2")], (5,), 0)
        noisy = wrap_noisy(model, NoiseSpec("gaussian", "multiplicative", 2.0, 1))
        x = np.random.default_rng(2).normal(size=(4, 5))
        assert np.array_equal(noisy.forward(x), model.forward(x).data)

    def test_fresh_noise_per_forward_but_pinnable(self):
        model = small_model()
        noisy = wrap_noisy(model, NoiseSpec("gaussian", "multiplicative", 0.2, 6))
        x = np.random.default_rng(1).normal(size=(2, 6))
        first = noisy.forward(x)
        second = noisy.forward(x)
        assert not np.array_equal(first, second)  # step counter advanced
        assert np.array_equal(noisy.forward(x, step=0), first)
        assert np.array_equal(noisy.forward(x, step=1), second)

    def test_clean_weights_never_mutated(self):
        model = small_model()
        before = save_checkpoint(model)
        noisy = wrap_noisy(model, NoiseSpec("uniform", "multiplicative", 0.7, 9))
        x = np.random.default_rng(5).normal(size=(4, 6))
        for _ in range(25):
            noisy.forward(x)
        assert save_checkpoint(model) == before

    def test_noise_confined_to_eligible_layers(self):
        # relu output must be exactly relu of the perturbed linear output
        model = build_model([linear("f1", 4, 4), relu("a1")], (4,), 3)
        spec = NoiseSpec("gaussian", "additive", 0.3, 12)
        noisy = wrap_noisy(model, spec)
        x = np.random.default_rng(0).normal(size=(2, 4))
        out = noisy.forward(x, step=0)
        w, b = (p.data for p in model.params["f1"])
        wn = perturb_weights(w, spec, ("f1", 0, 0))
        assert np.array_equal(out, np.maximum(x @ wn + b, 0.0))

    def test_bias_left_clean_by_default(self):
        model = build_model([linear("f1", 3, 3)], (3,), 0)
        model.params["f1"][0].data[...] = 0.0  # kill the weight contribution
        model.params["f1"][1].data[...] = 5.0
        spec = NoiseSpec("gaussian", "additive", 0.5, 2)
        noisy = wrap_noisy(model, spec)
        out = noisy.forward(np.zeros((1, 3)), step=0)
        assert np.array_equal(out, np.full((1, 3), 5.0))

    def test_bias_perturbed_when_enabled(self):
        model = build_model([linear("f1", 3, 3)], (3,), 0)
        model.params["f1"][0].data[...] = 0.0
        model.params["f1"][1].data[...] = 5.0
        spec = NoiseSpec("gaussian", "additive", 0.5, 2, perturb_bias=True)
        noisy = wrap_noisy(model, spec)
        out = noisy.forward(np.zeros((1, 3)), step=0)
        assert not np.array_equal(out, np.full((1, 3), 5.0))


class TestAnalyticStd:
    def test_linear_layer_output_difference_std(self):
        # y = x @ w; multiplicative gaussian noise on w gives an output
        # difference with std sigma * sqrt(sum_j w_j^2 x_j^2)
        sigma = 0.05
        w = np.array([[1.0], [2.0]])
        x = np.array([[1.0, 1.0]])
        spec = NoiseSpec("gaussian", "multiplicative", sigma, 31)
        draws = 100_000
        eps = sample_noise((draws, 2), spec, ("mc", 0, 0))
        diffs = (eps * w[:, 0] * x[0]).sum(axis=1)  # x @ (w*(1+eps)) - x @ w, per draw
        expected = sigma * np.sqrt(float((w[:, 0] ** 2 * x[0] ** 2).sum()))
        assert abs(diffs.std() - expected) / expected < 0.03

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_zero_noise_identity_any_seed(self, seed):
        model = small_model()
        noisy = wrap_noisy(model, NoiseSpec("gaussian", "multiplicative", 0.0, seed))
        x = np.random.default_rng(seed).normal(size=(2, 6))
        assert np.array_equal(noisy.forward(x), model.forward(x).data)
