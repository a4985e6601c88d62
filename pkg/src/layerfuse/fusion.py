"""Layer-fusion heads mapping per-layer encoder outputs to one representation.

Each head takes the list of layer outputs ``z_1 .. z_L`` (each ``[B, T, d]``)
and returns ``h`` of shape ``[B, T, d]`` for the task head.

* ``base``     -- ``h = z_L``.
* ``average``  -- mean over layers, no parameters.
* ``concat``   -- ``h = sum_i (z_i W_i + b_i)``.
* ``dwatt``    -- per token, a query built from ``z_L`` attends over L
  input-independent layer keys and per-layer value vectors; ``h = z_L + attend``.
* ``extra``    -- n freshly initialised transformer layers applied to ``z_L``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import INIT_STD, LayerIntermediates, TransformerLayer, attention_key_bias, \
    transformer_layer_param_count
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


class FusionKind(str, enum.Enum):
    BASE = "base"
    EXTRA = "extra"
    AVERAGE = "average"
    CONCAT = "concat"
    DWATT = "dwatt"

    @classmethod
    def parse(cls, value) -> "FusionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown fusion kind {value!r} (expected one of {names})",
                              "fusion.kind") from None


@dataclass(frozen=True)
class FusionSpec:
    """Which head to build plus the knobs only some kinds read."""

    kind: FusionKind = FusionKind.DWATT
    n_extra: int = 2
    d_pos: int = 24
    gamma_q: float = 0.5
    gamma_v: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", FusionKind.parse(self.kind))
        if self.n_extra < 1:
            raise ConfigError(f"must be >= 1, got {self.n_extra}", "fusion.n_extra")
        if self.d_pos < 1:
            raise ConfigError(f"must be >= 1, got {self.d_pos}", "fusion.d_pos")
        for name in ("gamma_q", "gamma_v"):
            if not 0.0 < getattr(self, name) <= 4.0:
                raise ConfigError(f"must lie in (0, 4], got {getattr(self, name)}",
                                  f"fusion.{name}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        return out


def bottleneck_width(d: int, gamma: float) -> int:
    return max(1, int(round(gamma * d)))


def _layers(z) -> list[Tensor]:
    return list(z.z) if isinstance(z, LayerIntermediates) else list(z)


def _check_depth(z: list[Tensor], expected: int) -> None:
    if len(z) != expected:
        raise ConfigError(f"head built for {expected} layers, got {len(z)}", "fusion.n_layers")


class BottleneckMLP(Module):
    """``f(z) = LN(gelu(z U)) W``, down to ``gamma*d`` and back up to ``d``."""

    def __init__(self, d: int, gamma: float, rng: np.random.Generator):
        inner = bottleneck_width(d, gamma)
        self.down = Linear(d, inner, rng)
        self.norm = LayerNorm(inner)
        self.up = Linear(inner, d, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.up(self.norm(T.gelu(self.down(z))))


def bottleneck_param_count(d: int, gamma: float) -> int:
    m = bottleneck_width(d, gamma)
    return d * m + m + 2 * m + m * d + d


class BaseHead(Module):
    def __init__(self, n_layers: int):
        self.n_layers = n_layers

    def forward(self, z, attention_mask=None) -> Tensor:
        return _layers(z)[-1]


class AverageHead(Module):
    def __init__(self, n_layers: int):
        self.n_layers = n_layers

    def forward(self, z, attention_mask=None) -> Tensor:
        return average_fuse(z)


class ConcatHead(Module):
    def __init__(self, n_layers: int, d: int, rng: np.random.Generator):
        self.n_layers = n_layers
        self.transforms = [Linear(d, d, rng) for _ in range(n_layers)]

    def forward(self, z, attention_mask=None) -> Tensor:
        return concat_fuse(z, self)


class DWAttHead(Module):
    _buffers = ("k_pos",)

    def __init__(self, n_layers: int, d: int, rng: np.random.Generator, d_pos: int = 24,
                 gamma_q: float = 0.5, gamma_v: float = 0.5):
        self.n_layers = n_layers
        # static layer-index codes; stored, never trained
        self.k_pos = rng.uniform(0.0, 1.0, size=(n_layers, d_pos))
        self.key_proj = Linear(d_pos, d, rng, std=INIT_STD)
        self.query_mlp = BottleneckMLP(d, gamma_q, rng)
        self.value_mlps = [BottleneckMLP(d, gamma_v, rng) for _ in range(n_layers)]
        self.value_norms = [LayerNorm(d) for _ in range(n_layers)]

    def forward(self, z, attention_mask=None) -> Tensor:
        return dwatt_fuse(z, self)


class ExtraLayersHead(Module):
    def __init__(self, n_layers: int, d: int, n_heads: int, ffn_mult: int,
                 rng: np.random.Generator, n_extra: int = 2):
        self.n_layers = n_layers
        self.layers = [TransformerLayer(d, n_heads, ffn_mult, rng) for _ in range(n_extra)]

    def forward(self, z, attention_mask=None) -> Tensor:
        return extra_layers_forward(_layers(z)[-1], self, attention_mask)


# fusion operations -----------------------------------------------------------

def average_fuse(z) -> Tensor:
    z = _layers(z)
    if not z:
        raise ConfigError("need at least one layer", "fusion.n_layers")
    total = z[0]
    for zi in z[1:]:
        total = total + zi
    return total * (1.0 / len(z))


def concat_fuse(z, head: ConcatHead) -> Tensor:
    z = _layers(z)
    _check_depth(z, head.n_layers)
    h = head.transforms[0](z[0])
    for zi, transform in zip(z[1:], head.transforms[1:]):
        h = h + transform(zi)
    return h


def dwatt_keys(head: DWAttHead) -> Tensor:
    """``[L, d]`` keys, one per layer index; independent of the input."""
    return head.key_proj(Tensor(head.k_pos))


def dwatt_values(z, head: DWAttHead) -> Tensor:
    """``[L, B, T, d]`` values, each layer through its own MLP and LayerNorm."""
    z = _layers(z)
    _check_depth(z, head.n_layers)
    return T.stack([norm(mlp(zi)) for zi, mlp, norm in
                    zip(z, head.value_mlps, head.value_norms)], axis=0)


def dwatt_query(z_last: Tensor, head: DWAttHead) -> Tensor:
    """``1 + elu(z_L + f_Q(z_L))``, strictly positive."""
    return T.elu_plus_one(z_last + head.query_mlp(z_last))


def depth_scores(q: Tensor, keys: Tensor) -> Tensor:
    """Softmax over layers of the raw dot products ``q . k_i`` (no temperature)."""
    return T.softmax(T.matmul(q, keys.swapaxes(0, 1)), axis=-1)


def depth_attend(q: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Score-weighted sum over the layer axis; ``values`` is ``[L, B, T, d]``."""
    scores = depth_scores(q, keys)                       # [B, T, L]
    v = values.transpose(1, 2, 0, 3)                     # [B, T, L, d]
    b, t, n = scores.shape
    mixed = T.matmul(scores.reshape(b, t, 1, n), v)      # [B, T, 1, d]
    return mixed.reshape(b, t, v.shape[-1])


def dwatt_fuse(z, head: DWAttHead) -> Tensor:
    z = _layers(z)
    _check_depth(z, head.n_layers)
    z_last = z[-1]
    attend = depth_attend(dwatt_query(z_last, head), dwatt_keys(head), dwatt_values(z, head))
    return z_last + attend


def extra_layers_forward(z_last: Tensor, head: ExtraLayersHead, attention_mask=None) -> Tensor:
    bias = attention_key_bias(attention_mask)
    x = z_last
    for layer in head.layers:
        x = layer(x, bias)
    return x


# construction and accounting ---------------------------------------------------

def build_head(spec: FusionSpec, n_layers: int, d: int, rng: np.random.Generator,
               n_heads: int = 4, ffn_mult: int = 4) -> Module:
    kind = spec.kind
    if kind is FusionKind.BASE:
        return BaseHead(n_layers)
    if kind is FusionKind.AVERAGE:
        return AverageHead(n_layers)
    if kind is FusionKind.CONCAT:
        return ConcatHead(n_layers, d, rng)
    if kind is FusionKind.DWATT:
        return DWAttHead(n_layers, d, rng, spec.d_pos, spec.gamma_q, spec.gamma_v)
    return ExtraLayersHead(n_layers, d, n_heads, ffn_mult, rng, spec.n_extra)


def count_added_params(spec: FusionSpec, n_layers: int, d: int, ffn_mult: int = 4) -> int:
    """Learned parameters of the add-on module alone, by formula.

    The static layer codes of DWAtt are not learned and are excluded.
    """
    kind = spec.kind
    if kind in (FusionKind.BASE, FusionKind.AVERAGE):
        return 0
    if kind is FusionKind.CONCAT:
        return n_layers * (d * d + d)
    if kind is FusionKind.EXTRA:
        return spec.n_extra * transformer_layer_param_count(d, ffn_mult)
    keys = spec.d_pos * d + d
    query = bottleneck_param_count(d, spec.gamma_q)
    values = n_layers * (bottleneck_param_count(d, spec.gamma_v) + 2 * d)
    return keys + query + values


def layer_permutation(head: DWAttHead, order: Sequence[int]) -> DWAttHead:
    """Reorder a DWAtt head's per-layer pieces (codes, value MLPs, value norms) in place."""
    order = list(order)
    head.k_pos = head.k_pos[order]
    head.value_mlps = [head.value_mlps[i] for i in order]
    head.value_norms = [head.value_norms[i] for i in order]
    return head
