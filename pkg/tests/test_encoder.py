"""Tests for the attention encoder: equivariance, readout locality, dropout."""

import math

import numpy as np
import pytest

from tabpact.errors import ConfigError
from tabpact.tensor import Tape, Tensor, grad_check, layer_norm, relu
from tabpact.encoder import (
    EncoderConfig,
    encoder_forward,
    init_encoder_params,
    init_prediction_head,
    mhsa,
    predict,
)


def make(config=None, seed=0):
    config = config or EncoderConfig(d=8, n_layers=2, n_heads=2, ffn_mult=2, dropout_p=0.0)
    rng = np.random.default_rng(seed)
    return config, init_encoder_params(config, rng), init_prediction_head(config.d, rng)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError, match="divide"):
            EncoderConfig(d=10, n_heads=3)

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            EncoderConfig(dropout_p=1.0)


class TestMhsa:
    def test_single_token_attends_to_itself(self):
        config, params, head = make()
        layer = params.layers[0]
        x = np.random.default_rng(1).normal(size=(1, 8))
        out, weights = mhsa(Tensor(x), layer, config.n_heads, return_weights=True)
        np.testing.assert_allclose(weights.data, 1.0)
        expected = (x @ layer.wv.data + layer.bv.data) @ layer.wo.data + layer.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        config, params, head = make(seed=2)
        x = Tensor(np.random.default_rng(3).normal(size=(4, 6, 8)))
        _, weights = mhsa(x, params.layers[0], config.n_heads, return_weights=True)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_permutation_equivariance(self):
        config, params, head = make(seed=4)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(7, 8))
        perm = rng.permutation(7)
        out = mhsa(Tensor(x), params.layers[0], config.n_heads).data
        out_perm = mhsa(Tensor(x[perm]), params.layers[0], config.n_heads).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


class TestEncoderForward:
    def test_zero_layers_is_identity(self):
        config = EncoderConfig(d=8, n_layers=0, n_heads=2, dropout_p=0.0)
        params = init_encoder_params(config, np.random.default_rng(6))
        x = Tensor(np.random.default_rng(7).normal(size=(5, 8)))
        out = encoder_forward(x, params, config)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("prenorm", [True, False])
    @pytest.mark.parametrize("shape", [(5, 8), (3, 5, 8)])
    def test_output_shape_matches_input(self, prenorm, shape):
        config = EncoderConfig(d=8, n_layers=2, n_heads=4, dropout_p=0.0, prenorm=prenorm)
        params = init_encoder_params(config, np.random.default_rng(8))
        out = encoder_forward(Tensor(np.random.default_rng(9).normal(size=shape)), params, config)
        assert out.shape == shape

    def test_no_dropout_forward_is_bit_deterministic(self):
        config, params, head = make(seed=10)
        x = np.random.default_rng(11).normal(size=(4, 8))
        a = encoder_forward(Tensor(x), params, config).data
        b = encoder_forward(Tensor(x), params, config).data
        assert np.array_equal(a, b)

    def test_training_dropout_requires_rng(self):
        config = EncoderConfig(d=8, n_layers=1, n_heads=2, dropout_p=0.5)
        params = init_encoder_params(config, np.random.default_rng(12))
        x = Tensor(np.zeros((2, 8)))
        with pytest.raises(ConfigError):
            encoder_forward(x, params, config, training=True)


class TestPredict:
    def test_zero_readout_gives_bias(self):
        config, params, head = make(seed=13)
        head.weight.data[:] = 0.0
        head.bias.data[:] = 1.25
        out = predict(Tensor(np.random.default_rng(14).normal(size=(6, 8))), head)
        assert out.item() == 1.25

    def test_prediction_reads_only_cls_row(self):
        config, params, head = make(seed=15)
        rng = np.random.default_rng(16)
        x = rng.normal(size=(6, 8))
        base = predict(Tensor(x), head).item()
        x2 = x.copy()
        x2[1:] += rng.normal(size=(5, 8))
        assert predict(Tensor(x2), head).item() == base

    def test_hand_computed_readout(self):
        config = EncoderConfig(d=2, n_layers=0, n_heads=1, dropout_p=0.0, ln_eps=1e-5)
        head = init_prediction_head(2, np.random.default_rng(17))
        head.weight.data[:] = [[1.0], [1.0]]
        head.bias.data[:] = 0.0
        cls_row = np.array([0.5, -0.2])
        # layer_norm: mean 0.15, var 0.1225 -> [0.35, -0.35]/sqrt(0.1225 + eps)
        norm = (cls_row - 0.15) / math.sqrt(0.1225 + 1e-5)
        expected = max(norm[0], 0.0) + max(norm[1], 0.0)
        seq = np.vstack([cls_row, np.random.default_rng(18).normal(size=(3, 2))])
        got = predict(Tensor(seq), head, ln_eps=config.ln_eps).item()
        assert abs(got - expected) < 1e-12

    def test_batched_matches_single(self):
        config, params, head = make(seed=19)
        xs = np.random.default_rng(20).normal(size=(3, 5, 8))
        batched = predict(Tensor(xs), head).data
        for i in range(3):
            single = predict(Tensor(xs[i]), head).item()
            assert abs(batched[i] - single) < 1e-12


class TestClsPermutationInvariance:
    def test_prediction_invariant_to_non_cls_permutations(self):
        config = EncoderConfig(d=8, n_layers=2, n_heads=2, dropout_p=0.0)
        init_rng = np.random.default_rng(21)
        params = init_encoder_params(config, init_rng)
        head = init_prediction_head(config.d, init_rng)
        rng = np.random.default_rng(22)
        x = rng.normal(size=(9, 8))
        base = predict(encoder_forward(Tensor(x), params, config), head).item()
        for _ in range(100):
            perm = np.concatenate([[0], 1 + rng.permutation(8)])
            shuffled = predict(
                encoder_forward(Tensor(x[perm]), params, config), head
            ).item()
            assert abs(shuffled - base) < 1e-10


class TestGradients:
    def test_full_encoder_gradcheck_on_parameters(self):
        config = EncoderConfig(d=4, n_layers=1, n_heads=2, ffn_mult=2, dropout_p=0.0)
        params = init_encoder_params(config, np.random.default_rng(23))
        x = np.random.default_rng(24).normal(size=(2, 3, 4))

        named = params.named_parameters()
        for name in ["layers.0.wq", "layers.0.ffn_w1", "layers.0.ln1_gamma", "head.weight"]:
            tensor = named[name]

            def f(t):
                out = encoder_forward(Tensor(x), params, config)
                return predict(out, head).sum()

            assert grad_check(f, tensor) < 1e-5, name

    def test_gradient_flows_to_input_tokens(self):
        config, params, head = make(seed=25)
        x = Tensor(np.random.default_rng(26).normal(size=(4, 8)), requires_grad=True)
        with Tape():
            predict(encoder_forward(x, params, config), head).backward()
        assert np.abs(x.grad).max() > 0


class TestDropoutExpectation:
    def test_mean_over_masks_matches_dropout_free_output(self):
        """Inverted scaling: averaging the training-mode output over many
        dropout masks recovers the dropout-free output within 3 SE."""
        config = EncoderConfig(d=4, n_layers=1, n_heads=1, ffn_mult=1, dropout_p=0.1)
        params = init_encoder_params(config, np.random.default_rng(27))
        # keep the post-dropout path near-linear so the mask average is unbiased
        for name, t in params.named_parameters().items():
            if name.startswith("layers.0.ffn") or name.startswith("layers.0.w"):
                t.data *= 0.05
        x = np.random.default_rng(28).normal(size=(3, 4)) * 0.1
        ref = encoder_forward(Tensor(x), params, config, training=False).data.mean()
        rng = np.random.default_rng(29)
        n = 10_000
        samples = np.empty(n)
        for i in range(n):
            samples[i] = encoder_forward(
                Tensor(x), params, config, training=True, rng=rng
            ).data.mean()
        se = samples.std(ddof=1) / math.sqrt(n)
        assert abs(samples.mean() - ref) <= 3 * se
