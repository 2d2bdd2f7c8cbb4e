"""Multi-head self-attention encoder over token sequences, with CLS readout.

Each layer is attention + feed-forward, both wrapped in residual
connections. Normalization sits before each sublayer by default
(``prenorm=True``) or after the residual add when disabled. Attention
logits are scaled by 1/sqrt(head width); no masking is applied, so the
layer is permutation-equivariant over token rows. Dropout uses inverted
scaling and is applied to each sublayer output before the residual add,
only when ``training`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor
from .tokenizer import TokenSequence


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    n_layers: int = 3
    n_heads: int = 4
    ffn_mult: int = 2
    dropout_p: float = 0.1
    prenorm: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.ffn_mult < 1:
            raise ConfigError(f"encoder sizes must be positive: {self}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} must divide d={self.d}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_mult": self.ffn_mult,
            "dropout_p": self.dropout_p,
            "prenorm": self.prenorm,
            "ln_eps": self.ln_eps,
        }


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class EncoderParams:
    layers: list[LayerParams]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_parameters().items():
                out[f"layers.{i}.{name}"] = t
        return out


@dataclass
class PredictionHead:
    """CLS readout: linear(relu(layer_norm(cls_row)))."""

    gamma: Tensor
    beta: Tensor
    weight: Tensor  # (d, 1)
    bias: Tensor  # (1,)

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"head.{n}": getattr(self, n) for n in self.__dataclass_fields__}


def _linear_init(rng: np.random.Generator, fan_in: int, *shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Seeded init: uniform(-1/sqrt(fan_in), ...) linear layers, identity norms."""
    d, f = config.d, config.ffn_mult * config.d

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                wq=_linear_init(rng, d, d, d),
                bq=_linear_init(rng, d, d),
                wk=_linear_init(rng, d, d, d),
                bk=_linear_init(rng, d, d),
                wv=_linear_init(rng, d, d, d),
                bv=_linear_init(rng, d, d),
                wo=_linear_init(rng, d, d, d),
                bo=_linear_init(rng, d, d),
                ln1_gamma=ones(d),
                ln1_beta=zeros(d),
                ffn_w1=_linear_init(rng, d, d, f),
                ffn_b1=_linear_init(rng, d, f),
                ffn_w2=_linear_init(rng, f, f, d),
                ffn_b2=_linear_init(rng, f, d),
                ln2_gamma=ones(d),
                ln2_beta=zeros(d),
            )
        )
    return EncoderParams(layers=layers)


def init_prediction_head(d: int, rng: np.random.Generator) -> PredictionHead:
    return PredictionHead(
        gamma=Tensor(np.ones(d), requires_grad=True),
        beta=Tensor(np.zeros(d), requires_grad=True),
        weight=_linear_init(rng, d, d, 1),
        bias=_linear_init(rng, d, 1),
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    return T.swapaxes(T.reshape(x, (*lead, t, n_heads, d // n_heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    return T.reshape(T.swapaxes(x, -3, -2), (*lead, t, h * dh))


def mhsa(
    tokens: Tensor,
    layer: LayerParams,
    n_heads: int,
    return_weights: bool = False,
):
    """Multi-head self-attention over token rows; no masking.

    ``tokens`` is (T, d) or (B, T, d). Per head of width d_h = d/n_heads the
    attention is softmax(Q Kᵀ / sqrt(d_h)) V; head outputs are concatenated
    and projected. With ``return_weights`` the (…, heads, T, T) attention
    matrix is returned alongside the output.
    """
    d_head = tokens.shape[-1] // n_heads
    q = _split_heads(T.add(T.matmul(tokens, layer.wq), layer.bq), n_heads)
    k = _split_heads(T.add(T.matmul(tokens, layer.wk), layer.bk), n_heads)
    v = _split_heads(T.add(T.matmul(tokens, layer.wv), layer.bv), n_heads)
    scores = T.matmul(T.mul(q, 1.0 / math.sqrt(d_head)), T.swapaxes(k, -1, -2))
    weights = T.softmax(scores, axis=-1)
    out = T.add(T.matmul(_merge_heads(T.matmul(weights, v)), layer.wo), layer.bo)
    if return_weights:
        return out, weights
    return out


def _ffn(x: Tensor, layer: LayerParams) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, layer.ffn_w1), layer.ffn_b1))
    return T.add(T.matmul(hidden, layer.ffn_w2), layer.ffn_b2)


def encoder_forward(
    seq,
    params: EncoderParams,
    config: EncoderConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the layer stack; output shape equals input shape.

    ``seq`` may be a TokenSequence or a raw token Tensor. Dropout fires
    only when ``training`` is set and ``config.dropout_p > 0``, in which
    case ``rng`` must be provided.
    """
    x = seq.tokens if isinstance(seq, TokenSequence) else seq
    use_dropout = training and config.dropout_p > 0.0
    if use_dropout and rng is None:
        raise ConfigError("training with dropout_p > 0 requires an rng")

    def drop(t: Tensor) -> Tensor:
        return T.dropout(t, config.dropout_p, rng) if use_dropout else t

    for layer in params.layers:
        if config.prenorm:
            a = mhsa(T.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, config.ln_eps), layer, config.n_heads)
            x = T.add(x, drop(a))
            f = _ffn(T.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, config.ln_eps), layer)
            x = T.add(x, drop(f))
        else:
            a = mhsa(x, layer, config.n_heads)
            x = T.layer_norm(T.add(x, drop(a)), layer.ln1_gamma, layer.ln1_beta, config.ln_eps)
            f = _ffn(x, layer)
            x = T.layer_norm(T.add(x, drop(f)), layer.ln2_gamma, layer.ln2_beta, config.ln_eps)
    return x


def predict(seq_out: Tensor, head: PredictionHead, ln_eps: float = 1e-5) -> Tensor:
    """Regression readout from the CLS row: linear(relu(layer_norm(cls))).

    Returns a scalar tensor for a single sequence, shape (B,) for a batch.
    The target is predicted directly, without any output transform; rows
    other than the CLS row never influence the result.
    """
    cls = T.select(seq_out, 0, axis=-2)
    single = cls.ndim == 1
    if single:
        cls = T.reshape(cls, (1, cls.shape[0]))
    h = T.relu(T.layer_norm(cls, head.gamma, head.beta, ln_eps))
    y = T.add(T.matmul(h, head.weight), head.bias)
    return T.reshape(y, () if single else (y.shape[0],))
