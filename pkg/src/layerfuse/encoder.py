"""Pre-norm transformer encoder that exposes every layer's output."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .nn import LayerNorm, Linear, Module
from .tensor import Parameter, Tensor

MASK_NEG = -1e9
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    dropout_rate: float = 0.1

    def validate(self) -> "EncoderConfig":
        for name in ("n_layers", "d_model", "n_heads", "ffn_mult", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", f"encoder.{name}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}", "encoder.n_heads"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.dropout_rate}", "encoder.dropout_rate")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerIntermediates:
    """Outputs of the L transformer layers, shallowest first."""

    z: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.z[-1]

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, i: int) -> Tensor:
        return self.z[i]

    def __iter__(self):
        return iter(self.z)


def transformer_layer_param_count(d: int, ffn_mult: int = 4) -> int:
    """Learned parameters of one encoder layer: attention, FFN, two LayerNorms."""
    hidden = ffn_mult * d
    attention = 4 * (d * d + d)
    ffn = d * hidden + hidden + hidden * d + d
    norms = 4 * d
    return attention + ffn + norms


def encoder_param_count(cfg: EncoderConfig) -> int:
    embeddings = (cfg.vocab_size + cfg.max_seq_len) * cfg.d_model
    return embeddings + cfg.n_layers * transformer_layer_param_count(cfg.d_model, cfg.ffn_mult)


class SelfAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, std: float | None = None):
        self.n_heads = n_heads
        self.query = Linear(d, d, rng, std)
        self.key = Linear(d, d, rng, std)
        self.value = Linear(d, d, rng, std)
        self.out = Linear(d, d, rng, std)

    def forward(self, x: Tensor, key_bias: np.ndarray | None = None, drop=None) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(y):
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (dh ** -0.5)
        if key_bias is not None:
            scores = scores + key_bias
        weights = T.softmax(scores, axis=-1)
        if drop is not None:
            weights = drop(weights)
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, std: float | None = None):
        self.up = Linear(d, mult * d, rng, std)
        self.down = Linear(mult * d, d, rng, std)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class TransformerLayer(Module):
    """``x + Attn(LN(x))`` followed by ``x + FFN(LN(x))``."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng: np.random.Generator,
                 std: float | None = INIT_STD):
        self.attn_norm = LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, rng, std)
        self.ffn_norm = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult, rng, std)

    def forward(self, x: Tensor, key_bias: np.ndarray | None = None, drop=None) -> Tensor:
        a = self.attn(self.attn_norm(x), key_bias, drop)
        if drop is not None:
            a = drop(a)
        x = x + a
        f = self.ffn(self.ffn_norm(x))
        if drop is not None:
            f = drop(f)
        return x + f


def attention_key_bias(attention_mask: np.ndarray | None) -> np.ndarray | None:
    """``[B, T]`` boolean mask of real tokens -> additive ``[B, 1, 1, T]`` score bias."""
    if attention_mask is None:
        return None
    mask = np.asarray(attention_mask, dtype=bool)
    return np.where(mask, 0.0, MASK_NEG)[:, None, None, :]


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.token_embedding = Parameter(rng.normal(0.0, INIT_STD, (cfg.vocab_size, cfg.d_model)))
        self.position_embedding = Parameter(
            rng.normal(0.0, INIT_STD, (cfg.max_seq_len, cfg.d_model))
        )
        self.layers = [
            TransformerLayer(cfg.d_model, cfg.n_heads, cfg.ffn_mult, rng)
            for _ in range(cfg.n_layers)
        ]
        self.dropout_rng = np.random.default_rng(0)

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be [batch, seq], got shape {tokens.shape}")
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise InputError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        bad = np.argwhere((tokens < 0) | (tokens >= self.cfg.vocab_size))
        if bad.size:
            b, t = bad[0]
            raise InputError(
                f"token id {tokens[b, t]} out of range [0, {self.cfg.vocab_size}) "
                f"at batch {b}, position {t}"
            )
        x = T.embedding(self.token_embedding, tokens)
        return x + self.position_embedding[: tokens.shape[1]]

    def forward(self, tokens: np.ndarray, attention_mask: np.ndarray | None = None
                ) -> LayerIntermediates:
        drop = None
        if self.training and self.cfg.dropout_rate > 0:
            rate, rng = self.cfg.dropout_rate, self.dropout_rng
            drop = lambda t: T.dropout(t, rate, rng)  # noqa: E731
        x = self.embed(tokens)
        if drop is not None:
            x = drop(x)
        bias = attention_key_bias(attention_mask)
        z = []
        for layer in self.layers:
            x = layer(x, bias, drop)
            z.append(x)
        return LayerIntermediates(z)


def encode(tokens: np.ndarray, encoder: Encoder,
           attention_mask: np.ndarray | None = None) -> LayerIntermediates:
    return encoder(tokens, attention_mask)


class TaskHead(Module):
    """Token classifier or vocabulary head: an affine projection from width d."""

    def __init__(self, kind: str, d: int, n_out: int, rng: np.random.Generator):
        if kind not in ("token-classifier", "vocabulary-head"):
            raise ConfigError(f"unknown task head kind {kind!r}", "task_head.kind")
        self.kind = kind
        self.projection = Linear(d, n_out, rng)

    def forward(self, h: Tensor) -> Tensor:
        return self.projection(h)


def freeze_base(model: Module, mode: str) -> None:
    """FE freezes every ``encoder/`` parameter; FT unfreezes everything."""
    mode = mode.upper()
    if mode not in ("FE", "FT"):
        raise ConfigError(f"mode must be FE or FT, got {mode!r}", "train.mode")
    for name, p in model.named_parameters():
        p.freeze(mode == "FE" and name.startswith("encoder/"))


def trainable_names(model: Module) -> list[str]:
    return [name for name, p in model.named_parameters() if not p.frozen]


def frozen_params(model: Module) -> Iterable[tuple[str, Parameter]]:
    return [(name, p) for name, p in model.named_parameters() if p.frozen]
