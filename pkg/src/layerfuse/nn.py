"""Minimal module system: parameter registry, affine maps and LayerNorm."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Parameter, Tensor

LN_EPS = 1e-5


class Module:
    """Base class. Parameters, sub-modules and lists of sub-modules assigned as
    attributes are discovered in assignment order, which fixes their names."""

    training: bool = True
    _buffers: tuple[str, ...] = ()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{key}/{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + key, value
            else:
                yield from value.named_parameters(f"{prefix}{key}/")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}/")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def assign_names(self, prefix: str = "") -> None:
        """Stamp hierarchical names onto parameters, rejecting duplicates."""
        seen: set[str] = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ContractError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        """Zero every trainable gradient; frozen parameters keep no buffer."""
        for p in self.parameters():
            p.grad = None if p.frozen else np.zeros_like(p.data)

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if not (trainable_only and p.frozen))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(own) + list(buffers) if k not in state]
        unexpected = [k for k in state if k not in own and k not in buffers]
        if strict and (missing or unexpected):
            raise ContractError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise ContractError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = value.copy()
        for name, buf in buffers.items():
            if name in state:
                buf[...] = state[name]


def parameter_hash(named: Iterator[tuple[str, Parameter]] | dict) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    items = dict(named)
    h = hashlib.sha256()
    for name in sorted(items):
        data = np.ascontiguousarray(items[name].data, dtype="<f8")
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(data.tobytes())
    return h.hexdigest()


class Linear(Module):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 std: float | None = None, bias: bool = True):
        std = d_in ** -0.5 if std is None else std
        self.weight = Parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        out = T.matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(*lead, self.weight.shape[1])


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = LN_EPS):
        self.gain = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)
