"""Tests for feature tokenization: hand oracles, schema contracts, invariants."""

import numpy as np
import pytest

from tabpact.errors import EmbeddingIndexError, SchemaError
from tabpact.tensor import Tape, Tensor, grad_check
from tabpact.tokenizer import (
    CLS_NAME,
    Feature,
    FeatureSchema,
    assemble_sequence,
    init_tokenizer_params,
    tokenize,
    tokenize_categorical,
    tokenize_context,
    tokenize_numerical,
)


def small_schema(window=2):
    return FeatureSchema(
        features=(
            Feature("age", "numerical", group="user", subtag="U_d"),
            Feature("balance", "numerical", group="user", subtag="U_b"),
            Feature("game_type", "categorical", cardinality=3, group="round", subtag="R_g"),
            Feature("entry@o-1", "numerical", offset=-1, group="context", subtag="C_t"),
            Feature("entry@o1", "numerical", offset=1, group="context", subtag="C_t"),
            Feature("mode@o1", "categorical", cardinality=4, offset=1, group="context"),
        ),
        window=window,
    )


def make_params(schema=None, d=4, seed=0, offsets=True):
    schema = schema or small_schema()
    return init_tokenizer_params(schema, d, np.random.default_rng(seed), offsets)


class TestSchema:
    def test_counts(self):
        s = small_schema()
        assert (s.n_numerical, s.n_categorical, s.n_contextual) == (2, 1, 3)
        assert s.n_tokens == 7

    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError, match="duplicate"):
            FeatureSchema((Feature("a", "numerical"), Feature("a", "numerical")))

    def test_offset_must_fit_window(self):
        with pytest.raises(SchemaError, match="offset"):
            FeatureSchema((Feature("a", "numerical", offset=3),), window=2)

    def test_cardinality_required(self):
        with pytest.raises(SchemaError, match="cardinality"):
            Feature("a", "categorical")

    def test_hash_is_stable_and_value_free(self):
        assert small_schema().hash() == small_schema().hash()
        assert small_schema().hash() != small_schema(window=3).hash()


class TestTokenizeNumerical:
    def test_zero_gives_bias(self):
        p = make_params()
        out = tokenize_numerical(np.zeros(2), p)
        np.testing.assert_array_equal(out.data, p.num_bias.data)

    def test_one_gives_bias_plus_weight(self):
        p = make_params()
        out = tokenize_numerical(np.ones(2), p)
        np.testing.assert_allclose(out.data, p.num_bias.data + p.num_weight.data)

    def test_hand_value(self):
        schema = FeatureSchema((Feature("x", "numerical"),))
        p = make_params(schema, d=2)
        p.num_weight.data[:] = [[0.5, -1.0]]
        p.num_bias.data[:] = [[1.0, 0.0]]
        out = tokenize_numerical(np.array([3.0]), p)
        np.testing.assert_allclose(out.data, [[2.5, -3.0]])

    def test_length_mismatch(self):
        with pytest.raises(SchemaError):
            tokenize_numerical(np.zeros(5), make_params())

    def test_linearity(self):
        p = make_params(seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=2)
        alpha = 2.7
        base = tokenize_numerical(np.zeros(2), p).data
        lhs = tokenize_numerical(alpha * x, p).data - base
        rhs = alpha * (tokenize_numerical(x, p).data - base)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_batched_matches_single(self):
        p = make_params(seed=5)
        rng = np.random.default_rng(6)
        xs = rng.normal(size=(3, 2))
        batched = tokenize_numerical(xs, p).data
        for i in range(3):
            np.testing.assert_array_equal(batched[i], tokenize_numerical(xs[i], p).data)


class TestTokenizeCategorical:
    def test_lookup_definition(self):
        p = make_params()
        out = tokenize_categorical(np.array([1]), p)
        np.testing.assert_allclose(
            out.data[0], p.cat_biases[0].data + p.cat_tables[0].data[1]
        )

    def test_zero_bias_returns_row(self):
        p = make_params()
        p.cat_biases[0].data[:] = 0.0
        out = tokenize_categorical(np.array([2]), p)
        np.testing.assert_array_equal(out.data[0], p.cat_tables[0].data[2])

    def test_out_of_range_names_feature(self):
        with pytest.raises(EmbeddingIndexError, match="game_type"):
            tokenize_categorical(np.array([3]), make_params())

    def test_gradient_reaches_selected_row_only(self):
        p = make_params()
        table = p.cat_tables[0]

        def f(t):
            p.cat_tables[0] = t
            return tokenize_categorical(np.array([1]), p).sum()

        assert grad_check(f, table) < 1e-6
        p.cat_tables[0] = table
        table.zero_grad()
        with Tape():
            tokenize_categorical(np.array([1]), p).sum().backward()
        assert np.all(table.grad[1] != 0.0)
        assert np.all(table.grad[[0, 2]] == 0.0)


class TestTokenizeContext:
    def test_zero_offset_embeddings_match_base_tokenization(self):
        p = make_params(seed=7)
        p.offset_embeddings.data[:] = 0.0
        rng = np.random.default_rng(8)
        xn = rng.normal(size=2)
        xc = np.array([2])
        with_offsets = tokenize_context(xn, xc, p).data

        p_plain = make_params(seed=7, offsets=False)
        plain = tokenize_context(xn, xc, p_plain).data
        np.testing.assert_array_equal(with_offsets, plain)

    def test_token_count_for_full_window(self):
        # 10 offsets x 6 round features -> 60 context tokens
        w, q = 5, 6
        feats = [
            Feature(f"r{j}@o{o}", "numerical", offset=o, group="context")
            for o in range(-w, w + 1)
            if o != 0
            for j in range(q)
        ]
        schema = FeatureSchema(tuple(feats), window=w)
        assert schema.n_contextual == 60
        p = make_params(schema, d=3, seed=9)
        out = tokenize_context(np.zeros(60), np.zeros((0,), dtype=int), p)
        assert out.shape == (60, 3)

    def test_offset_swap_symmetry(self):
        """Swapping values+weights of offsets -1/+1 along with their
        embeddings permutes token rows without changing their content."""
        schema = FeatureSchema(
            (
                Feature("a@o-1", "numerical", offset=-1),
                Feature("b@o1", "numerical", offset=1),
            ),
            window=1,
        )
        p = make_params(schema, d=4, seed=10)
        x = np.array([0.3, -1.7])
        before = tokenize_context(x, np.zeros((0,), dtype=int), p).data

        p.ctx_num_weight.data[:] = p.ctx_num_weight.data[[1, 0]]
        p.ctx_num_bias.data[:] = p.ctx_num_bias.data[[1, 0]]
        p.offset_embeddings.data[:] = p.offset_embeddings.data[[1, 0]]
        after = tokenize_context(x[[1, 0]], np.zeros((0,), dtype=int), p).data
        np.testing.assert_allclose(after, before[[1, 0]], atol=1e-15)

    def test_absent_offset_contributes_bias_plus_embedding(self):
        p = make_params(seed=11)
        xn = np.array([np.nan, 2.0])  # offset -1 absent, its value may be junk
        xc = np.array([1])
        out = tokenize_context(xn, xc, p, absent_offsets=[-1]).data
        expected_row0 = p.ctx_num_bias.data[0] + p.offset_embeddings.data[p.offset_row(-1)]
        np.testing.assert_allclose(out[0], expected_row0)

    def test_absent_offset_must_be_in_window(self):
        with pytest.raises(SchemaError):
            tokenize_context(np.zeros(2), np.array([0]), make_params(), absent_offsets=[9])

    def test_missing_values_rejected(self):
        with pytest.raises(SchemaError):
            tokenize_context(np.zeros(1), np.array([0]), make_params())


class TestAssemble:
    def test_table1_shape(self):
        feats = [Feature(f"n{i}", "numerical") for i in range(120)]
        feats += [Feature(f"c{i}", "categorical", cardinality=5) for i in range(21)]
        feats += [
            Feature(f"r{j}@o{o}", "numerical", offset=o)
            for o in range(-5, 6)
            if o != 0
            for j in range(6)
        ]
        schema = FeatureSchema(tuple(feats), window=5)
        p = make_params(schema, d=2, seed=12)
        seq = tokenize(p, np.zeros(120), np.zeros(21, dtype=int), np.zeros(60), np.zeros(0, dtype=int))
        assert seq.tokens.shape == (202, 2)

    def test_cls_alone_for_empty_schema(self):
        schema = FeatureSchema((), window=0)
        p = make_params(schema, d=3, seed=13)
        seq = tokenize(p, np.zeros(0), np.zeros(0, dtype=int), np.zeros(0), np.zeros(0, dtype=int))
        assert seq.tokens.shape == (1, 3)
        np.testing.assert_array_equal(seq.tokens.data[0], p.cls.data)
        assert seq.feature_for_row(0) == CLS_NAME

    def test_provenance_ordering(self):
        p = make_params(seed=14)
        seq = tokenize(p, np.zeros(2), np.zeros(1, dtype=int), np.zeros(2), np.zeros(1, dtype=int))
        assert seq.feature_for_row(1) == "age"
        assert seq.feature_for_row(3) == "game_type"
        assert seq.feature_for_row(4) == "entry@o-1"
        assert len(seq.feature_names) == 6

    def test_mixed_context_order_preserved(self):
        schema = FeatureSchema(
            (
                Feature("n@o-1", "numerical", offset=-1),
                Feature("k@o-1", "categorical", cardinality=2, offset=-1),
                Feature("m@o1", "numerical", offset=1),
            ),
            window=1,
        )
        p = make_params(schema, d=4, seed=15, offsets=False)
        out = tokenize_context(np.array([0.5, -0.25]), np.array([1]), p).data
        np.testing.assert_allclose(
            out[0], p.ctx_num_bias.data[0] + 0.5 * p.ctx_num_weight.data[0]
        )
        np.testing.assert_allclose(out[1], p.ctx_cat_biases[0].data + p.ctx_cat_tables[0].data[1])
        np.testing.assert_allclose(
            out[2], p.ctx_num_bias.data[1] - 0.25 * p.ctx_num_weight.data[1]
        )

    def test_token_count_is_value_free(self):
        p = make_params(seed=16)
        rng = np.random.default_rng(17)
        for _ in range(3):
            seq = tokenize(
                p,
                rng.normal(size=2),
                rng.integers(0, 3, size=1),
                rng.normal(size=2),
                rng.integers(0, 4, size=1),
            )
            assert seq.tokens.shape == (7, 4)


class TestNoDeadParameters:
    def test_every_parameter_receives_gradient(self):
        """A loss touching all tokens propagates nonzero gradient into every
        tokenizer parameter tensor on a random batch."""
        p = make_params(seed=18)
        rng = np.random.default_rng(19)
        batch = 8
        xn = rng.normal(size=(batch, 2))
        xc = rng.integers(0, 3, size=(batch, 1))
        cn = rng.normal(size=(batch, 2))
        cc = rng.integers(0, 4, size=(batch, 1))
        params = p.named_parameters()
        for t in params.values():
            t.zero_grad()
        with Tape():
            seq = tokenize(p, xn, xc, cn, cc)
            (seq.tokens * seq.tokens).sum().backward()
        for name, t in params.items():
            assert np.abs(t.grad).max() > 0.0, f"dead parameter: {name}"
