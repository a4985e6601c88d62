"""Encoder + fusion head + task head, with checkpoint round-tripping."""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import Encoder, EncoderConfig, LayerIntermediates, TaskHead
from .fusion import FusionSpec, build_head
from .nn import Module
from .tensor import Tensor


class FusionModel(Module):
    """Parameters are named ``encoder/...``, ``fusion/...`` and ``task/...``."""

    def __init__(self, enc_cfg: EncoderConfig, spec: FusionSpec, n_out: int,
                 rng: np.random.Generator, head_kind: str = "token-classifier",
                 encoder: Encoder | None = None):
        self.encoder = encoder if encoder is not None else Encoder(enc_cfg, rng)
        self.fusion = build_head(spec, enc_cfg.n_layers, enc_cfg.d_model, rng,
                                 enc_cfg.n_heads, enc_cfg.ffn_mult)
        self.task = TaskHead(head_kind, enc_cfg.d_model, n_out, rng)
        self.spec = spec
        self.enc_cfg = enc_cfg
        self.assign_names()

    def head_forward(self, z: LayerIntermediates | list[Tensor],
                     attention_mask: np.ndarray | None = None) -> Tensor:
        """Fusion and task head on precomputed layer outputs."""
        return self.task(self.fusion(z, attention_mask))

    def forward(self, tokens: np.ndarray, attention_mask: np.ndarray | None = None) -> Tensor:
        return self.head_forward(self.encoder(tokens, attention_mask), attention_mask)

    def save(self, path, meta: dict | None = None) -> None:
        header = {
            "encoder_config": self.enc_cfg.to_dict(),
            "fusion": self.spec.to_dict(),
            "task_head": {"kind": self.task.kind, "n_out": self.task.projection.weight.shape[1]},
            "meta": meta or {},
        }
        save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path) -> "FusionModel":
        header, tensors = load_checkpoint(path)
        enc_cfg = EncoderConfig(**header["encoder_config"])
        task = header["task_head"]
        model = cls(enc_cfg, FusionSpec(**header["fusion"]), task["n_out"],
                    np.random.default_rng(0), task["kind"])
        model.load_state_dict(tensors)
        return model


def save_encoder(encoder: Encoder, path, meta: dict | None = None) -> None:
    state = {f"encoder/{k}": v for k, v in encoder.state_dict().items()}
    save_checkpoint(path, state, {"encoder_config": encoder.cfg.to_dict(), "meta": meta or {}})


def load_encoder(path) -> Encoder:
    header, tensors = load_checkpoint(path)
    enc = Encoder(EncoderConfig(**header["encoder_config"]), np.random.default_rng(0))
    enc.load_state_dict({k[len("encoder/"):]: v for k, v in tensors.items()
                         if k.startswith("encoder/")})
    return enc
