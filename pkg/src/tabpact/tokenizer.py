"""Feature tokenization: every declared feature becomes one d-dimensional token.

A numerical feature x contributes ``bias + x * weight``; a categorical
feature contributes ``bias + table[x]``. Context features — features of
neighboring rounds at a nonzero offset from the current round — are
tokenized by their base-kind rule with their own weights, after which a
learned embedding shared by all features at the same round offset is
added. A learned CLS vector is prepended; row 0 of every assembled
sequence is the CLS position.

Single rows tokenize to ``(k+1, d)``; batches of B rows to ``(B, k+1, d)``.
Token count depends only on the schema, never on the values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import EmbeddingIndexError, SchemaError, ShapeError
from .tensor import Tensor

NUMERICAL = "numerical"
CATEGORICAL = "categorical"

CLS_NAME = "[CLS]"


@dataclass(frozen=True)
class Feature:
    """One column declaration.

    ``offset`` is the round offset relative to the current round; zero
    means the feature belongs to the current observation, any nonzero
    value marks a context feature of a neighboring round. ``group`` and
    ``subtag`` are free-form semantic tags (user / round / context and
    finer labels) carried for bookkeeping only.
    """

    name: str
    kind: str
    cardinality: int | None = None
    offset: int = 0
    group: str = ""
    subtag: str = ""

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.cardinality is None or self.cardinality < 1:
                raise SchemaError(
                    f"feature {self.name!r}: categorical cardinality must be >= 1, "
                    f"got {self.cardinality}"
                )
        elif self.cardinality is not None:
            raise SchemaError(f"feature {self.name!r}: numerical features carry no cardinality")

    @property
    def is_context(self) -> bool:
        return self.offset != 0

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.cardinality is not None:
            out["cardinality"] = self.cardinality
        if self.offset:
            out["offset"] = self.offset
        if self.group:
            out["group"] = self.group
        if self.subtag:
            out["subtag"] = self.subtag
        return out


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature declarations plus the context window half-width."""

    features: tuple[Feature, ...]
    window: int = 0
    target: str = "target"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dup}")
        if self.target in names:
            raise SchemaError(f"target column {self.target!r} clashes with a feature name")
        if self.window < 0:
            raise SchemaError(f"window must be >= 0, got {self.window}")
        for f in self.features:
            if f.is_context and not (-self.window <= f.offset <= self.window):
                raise SchemaError(
                    f"feature {f.name!r}: offset {f.offset} outside window "
                    f"[-{self.window}, {self.window}]"
                )

    # feature views, in declared order -----------------------------------

    @property
    def numerical(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.kind == NUMERICAL and not f.is_context)

    @property
    def categorical(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.kind == CATEGORICAL and not f.is_context)

    @property
    def contextual(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.is_context)

    @property
    def context_numerical(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.contextual if f.kind == NUMERICAL)

    @property
    def context_categorical(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.contextual if f.kind == CATEGORICAL)

    @property
    def n_numerical(self) -> int:
        return len(self.numerical)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical)

    @property
    def n_contextual(self) -> int:
        return len(self.contextual)

    @property
    def n_tokens(self) -> int:
        """Sequence length including the CLS row; a pure function of the schema."""
        return 1 + self.n_numerical + self.n_categorical + self.n_contextual

    @property
    def offsets(self) -> tuple[int, ...]:
        """All representable nonzero offsets, ascending: -w..-1, 1..w."""
        w = self.window
        return tuple(o for o in range(-w, w + 1) if o != 0)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "window": self.window,
            "features": [f.to_dict() for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        feats = tuple(
            Feature(
                name=fd["name"],
                kind=fd["kind"],
                cardinality=fd.get("cardinality"),
                offset=fd.get("offset", 0),
                group=fd.get("group", ""),
                subtag=fd.get("subtag", ""),
            )
            for fd in d["features"]
        )
        return cls(features=feats, window=d.get("window", 0), target=d.get("target", "target"))

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class TokenizerParams:
    """Embedding weights for one schema.

    ``offset_embeddings`` holds one learned d-vector per nonzero offset in
    the window (2w rows, ordered like ``schema.offsets``); it is ``None``
    when the tokenizer treats context features as plain columns.
    """

    schema: FeatureSchema
    d: int
    num_weight: Tensor  # (c, d)
    num_bias: Tensor  # (c, d)
    cat_tables: list[Tensor]  # per categorical feature, (S_j, d)
    cat_biases: list[Tensor]  # per categorical feature, (d,)
    ctx_num_weight: Tensor  # (s_num, d)
    ctx_num_bias: Tensor  # (s_num, d)
    ctx_cat_tables: list[Tensor]
    ctx_cat_biases: list[Tensor]
    offset_embeddings: Tensor | None  # (2w, d) or None
    cls: Tensor  # (d,)

    def offset_row(self, offset: int) -> int:
        return self.schema.offsets.index(offset)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"num.weight": self.num_weight, "num.bias": self.num_bias}
        for f, table, bias in zip(self.schema.categorical, self.cat_tables, self.cat_biases):
            out[f"cat.{f.name}.table"] = table
            out[f"cat.{f.name}.bias"] = bias
        out["ctx_num.weight"] = self.ctx_num_weight
        out["ctx_num.bias"] = self.ctx_num_bias
        for f, table, bias in zip(
            self.schema.context_categorical, self.ctx_cat_tables, self.ctx_cat_biases
        ):
            out[f"ctx_cat.{f.name}.table"] = table
            out[f"ctx_cat.{f.name}.bias"] = bias
        if self.offset_embeddings is not None:
            out["offset.embeddings"] = self.offset_embeddings
        out["cls"] = self.cls
        return out


@dataclass
class TokenSequence:
    """Token matrix with CLS at row 0 and per-row feature provenance."""

    tokens: Tensor  # (k+1, d) or (B, k+1, d)
    feature_names: tuple[str, ...]  # names for rows 1..k

    def __post_init__(self):
        if self.tokens.shape[-2] != len(self.feature_names) + 1:
            raise ShapeError(
                f"token sequence has {self.tokens.shape[-2]} rows but provenance "
                f"covers {len(self.feature_names)} features plus CLS"
            )

    def feature_for_row(self, row: int) -> str:
        return CLS_NAME if row == 0 else self.feature_names[row - 1]


def init_tokenizer_params(
    schema: FeatureSchema,
    d: int,
    rng: np.random.Generator,
    include_offset_embeddings: bool = True,
) -> TokenizerParams:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) initialization of all weights."""
    bound = 1.0 / np.sqrt(d)

    def draw(*shape):
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    c = schema.n_numerical
    s_num = len(schema.context_numerical)
    params = TokenizerParams(
        schema=schema,
        d=d,
        num_weight=draw(c, d),
        num_bias=draw(c, d),
        cat_tables=[draw(f.cardinality, d) for f in schema.categorical],
        cat_biases=[draw(d) for f in schema.categorical],
        ctx_num_weight=draw(s_num, d),
        ctx_num_bias=draw(s_num, d),
        ctx_cat_tables=[draw(f.cardinality, d) for f in schema.context_categorical],
        ctx_cat_biases=[draw(d) for f in schema.context_categorical],
        offset_embeddings=draw(2 * schema.window, d) if include_offset_embeddings else None,
        cls=draw(d),
    )
    return params


def _check_batchable(x: np.ndarray, n: int, what: str) -> np.ndarray:
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise SchemaError(f"{what}: expected {n} values per row, got shape {x.shape}")
    return x


def _empty_block(like_batched: bool, batch: int, d: int) -> Tensor:
    shape = (batch, 0, d) if like_batched else (0, d)
    return Tensor(np.zeros(shape))


def tokenize_numerical(x, params: TokenizerParams) -> Tensor:
    """Tokens for the plain numerical features: row j = bias_j + x_j * weight_j."""
    xd = _check_batchable(np.asarray(x, dtype=np.float64), params.schema.n_numerical, "numerical values")
    if not np.isfinite(xd).all():
        raise SchemaError("numerical values must be finite")
    if xd.shape[-1] == 0:
        return _empty_block(xd.ndim == 2, xd.shape[0] if xd.ndim == 2 else 0, params.d)
    return T.add(T.mul(params.num_weight, xd[..., None]), params.num_bias)


def _tokenize_lookup(idx_col: np.ndarray, feature: Feature, table: Tensor, bias: Tensor) -> Tensor:
    try:
        looked = T.gather(table, idx_col)
    except EmbeddingIndexError as exc:
        raise EmbeddingIndexError(f"categorical feature {feature.name!r}: {exc}") from None
    return T.add(looked, bias)


def tokenize_categorical(idx, params: TokenizerParams) -> Tensor:
    """Tokens for the plain categorical features: row j = bias_j + table_j[idx_j]."""
    schema = params.schema
    idx = np.asarray(idx)
    idx = _check_batchable(idx, schema.n_categorical, "categorical indices")
    batched = idx.ndim == 2
    if idx.shape[-1] == 0:
        return _empty_block(batched, idx.shape[0] if batched else 0, params.d)
    rows = []
    for j, f in enumerate(schema.categorical):
        tok = _tokenize_lookup(idx[..., j], f, params.cat_tables[j], params.cat_biases[j])
        rows.append(T.reshape(tok, tok.shape[:-1] + (1, params.d)))
    return T.concat(rows, axis=-2)


def tokenize_context(ctx_num, ctx_cat, params: TokenizerParams, absent_offsets=()) -> Tensor:
    """Tokens for the context features, in declared order.

    ``ctx_num`` / ``ctx_cat`` carry the values of the numerical and
    categorical context features respectively, each ordered as declared in
    the schema. Each feature is tokenized by its base-kind rule with its
    own weights; when the tokenizer carries offset embeddings, the
    embedding of the feature's round offset is added on top.

    Offsets listed in ``absent_offsets`` mark rounds that do not exist for
    this batch (e.g. the first round of a tour): their values are ignored
    and the tokens reduce to bias plus offset embedding.
    """
    schema = params.schema
    ctx_all = schema.contextual
    num_feats = schema.context_numerical
    cat_feats = schema.context_categorical
    absent = frozenset(absent_offsets)
    for o in absent:
        if o not in schema.offsets:
            raise SchemaError(f"absent offset {o} outside window [-{schema.window}, {schema.window}]")

    xn = _check_batchable(np.asarray(ctx_num, dtype=np.float64), len(num_feats), "context numerical values")
    xc = np.asarray(ctx_cat)
    if xc.size == 0:
        xc = xc.reshape(xn.shape[:-1] + (0,))
    xc = _check_batchable(xc, len(cat_feats), "context categorical values")
    if xn.ndim != xc.ndim:
        raise SchemaError("context numerical and categorical blocks disagree on batching")
    batched = xn.ndim == 2
    if not ctx_all:
        return _empty_block(batched, xn.shape[0] if batched else 0, params.d)

    # base-kind tokens for each sub-block
    num_block = None
    if num_feats:
        if absent:
            keep = np.array([f.offset not in absent for f in num_feats])
            xn = np.where(keep, xn, 0.0)
        if not np.isfinite(xn).all():
            raise SchemaError("context numerical values must be finite at present offsets")
        num_block = T.add(T.mul(params.ctx_num_weight, xn[..., None]), params.ctx_num_bias)
    cat_toks: list[Tensor] = []
    for j, f in enumerate(cat_feats):
        if f.offset in absent:
            bias = params.ctx_cat_biases[j]
            shape = (xn.shape[0], 1, params.d) if batched else (1, params.d)
            tok = T.broadcast_to(T.reshape(bias, (1,) * (len(shape) - 1) + (params.d,)), shape)
        else:
            tok = _tokenize_lookup(xc[..., j], f, params.ctx_cat_tables[j], params.ctx_cat_biases[j])
            tok = T.reshape(tok, tok.shape[:-1] + (1, params.d))
        cat_toks.append(tok)

    # stitch sub-blocks back into declared order
    if not cat_feats:
        block = num_block
    elif not num_feats:
        block = T.concat(cat_toks, axis=-2)
    else:
        pieces = []
        num_pos = cat_pos = 0
        for f in ctx_all:
            if f.kind == NUMERICAL:
                row = T.select(num_block, num_pos, axis=-2)
                pieces.append(T.reshape(row, row.shape[:-1] + (1, params.d)))
                num_pos += 1
            else:
                pieces.append(cat_toks[cat_pos])
                cat_pos += 1
        block = T.concat(pieces, axis=-2)

    if params.offset_embeddings is not None:
        rows = np.array([params.offset_row(f.offset) for f in ctx_all])
        block = T.add(block, T.gather(params.offset_embeddings, rows))
    return block


def assemble_sequence(num: Tensor, cat: Tensor, ctx: Tensor, params: TokenizerParams) -> TokenSequence:
    """Stack [CLS; numerical; categorical; context] into one token matrix."""
    schema = params.schema
    d = params.d
    blocks = {"numerical": num, "categorical": cat, "context": ctx}
    ndims = {b.ndim for b in blocks.values()}
    if len(ndims) != 1:
        raise ShapeError(f"token blocks disagree on batching: ndims {sorted(ndims)}")
    for label, block in blocks.items():
        if block.shape[-1] != d:
            raise ShapeError(f"{label} tokens have width {block.shape[-1]}, expected d={d}")
    counts = (schema.n_numerical, schema.n_categorical, schema.n_contextual)
    got = (num.shape[-2], cat.shape[-2], ctx.shape[-2])
    if got != counts:
        raise SchemaError(f"token block sizes {got} do not match schema counts {counts}")

    if num.ndim == 3:
        batch = num.shape[0]
        cls = T.broadcast_to(T.reshape(params.cls, (1, 1, d)), (batch, 1, d))
    else:
        cls = T.reshape(params.cls, (1, d))
    tokens = T.concat([cls, num, cat, ctx], axis=-2)
    names = tuple(
        f.name for f in (*schema.numerical, *schema.categorical, *schema.contextual)
    )
    return TokenSequence(tokens=tokens, feature_names=names)


def tokenize(
    params: TokenizerParams,
    x_num,
    x_cat,
    x_ctx_num,
    x_ctx_cat,
    absent_offsets=(),
) -> TokenSequence:
    """Full pipeline: the three blocks tokenized and assembled behind CLS."""
    num = tokenize_numerical(x_num, params)
    cat = tokenize_categorical(x_cat, params)
    ctx = tokenize_context(x_ctx_num, x_ctx_cat, params, absent_offsets=absent_offsets)
    return assemble_sequence(num, cat, ctx, params)
