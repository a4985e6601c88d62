"""Central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, is_grad_enabled, no_grad


def _scalar(value) -> float:
    return float(value.data) if isinstance(value, Tensor) else float(value)


def finite_diff_check(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` wrt ``p`` and
    central differences, over every coordinate of ``p``.

    ``f`` takes no arguments and reads ``p`` through its closure; it must be
    deterministic. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    p.grad = None
    loss = f()
    if isinstance(loss, Tensor) and loss.requires_grad:
        backward(loss)
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    numeric = np.zeros_like(p.data)
    base = p.data
    with no_grad():
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            up = _scalar(f())
            base[idx] = orig - h
            down = _scalar(f())
            base[idx] = orig
            numeric[idx] = (up - down) / (2.0 * h)
    p.grad = None
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


# component sweep ----------------------------------------------------------------

@dataclass
class GradRow:
    component: str
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


TOLERANCE = 1e-4


def check_components(L: int = 3, d: int = 8, d_pos: int = 4, batch: int = 2, seq: int = 4,
                     seed: int = 0, inject_fault: bool = False) -> list[GradRow]:
    """Gradient check of every fusion head and one encoder block, one row per
    named parameter (and per input for the parameter-free average head).

    ``inject_fault`` adds a term to the loss that only the tape sees, so the
    analytic gradient of the first DWAtt parameter is wrong on purpose.
    """
    from . import tensor as T
    from .encoder import TransformerLayer, attention_key_bias
    from .fusion import FusionKind, FusionSpec, build_head

    rng = np.random.default_rng(seed)
    z = [Tensor(rng.normal(size=(batch, seq, d)), requires_grad=True) for _ in range(L)]
    probe = rng.normal(size=(batch, seq, d))
    mask = np.ones((batch, seq), dtype=bool)
    mask[-1, -1] = False

    def loss_of(out: Tensor) -> Tensor:
        return (out * probe).sum()

    components: list[tuple[str, object, Callable[[], Tensor]]] = []
    for kind in (FusionKind.DWATT, FusionKind.CONCAT, FusionKind.AVERAGE):
        head = build_head(FusionSpec(kind=kind, d_pos=d_pos), L, d, rng)
        head.assign_names()
        components.append((kind.value, head, (lambda h: lambda: loss_of(h(z)))(head)))
    block = TransformerLayer(d, 2, 4, rng, std=0.3)
    block.assign_names()
    bias = attention_key_bias(mask)
    components.append(("encoder-block", block, lambda: loss_of(block(z[0], bias))))

    rows: list[GradRow] = []
    for comp, module, f in components:
        targets = list(module.named_parameters())
        if not targets:
            targets = [(f"input/z{i}", zi) for i, zi in enumerate(z)]
        elif comp == "encoder-block":
            targets.append(("input/x", z[0]))
        for k, (name, p) in enumerate(targets):
            fn = f
            if inject_fault and comp == "dwatt" and k == 0:
                fn = (lambda g, q: lambda: g() + T.tsum(q * q) * 0.01
                      if is_grad_enabled() else g())(f, p)
            rows.append(GradRow(comp, name, finite_diff_check(fn, p)))
    return rows
