import numpy as np
import pytest

from layerfuse.encoder import (Encoder, EncoderConfig, TransformerLayer, encode,
                               encoder_param_count, freeze_base, trainable_names,
                               transformer_layer_param_count)
from layerfuse.errors import ConfigError, InputError
from layerfuse.fusion import FusionSpec
from layerfuse.model import FusionModel


def small_cfg(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=4, vocab_size=20, max_seq_len=12,
                dropout_rate=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def test_output_shapes(rng):
    cfg = small_cfg(n_layers=4)
    z = encode(rng.integers(0, 20, size=(3, 5)), Encoder(cfg, rng))
    assert len(z) == 4
    assert all(zi.shape == (3, 5, 16) for zi in z)
    assert z.final is z[3]


def test_zero_layers_propagate_embedding(rng):
    enc = Encoder(small_cfg(), rng)
    for layer in enc.layers:
        for p in layer.parameters():
            p.data[...] = 0.0
    tokens = rng.integers(0, 20, size=(2, 6))
    z = enc(tokens)
    embedded = enc.embed(tokens).data
    assert np.array_equal(z[0].data, embedded)
    assert np.array_equal(z[1].data, embedded)


def test_padding_equivalence(rng):
    enc = Encoder(small_cfg(), rng)
    enc.eval()
    short = np.array([[5, 6, 7]])
    batch = np.array([[5, 6, 7, 0, 0], [9, 8, 7, 6, 5]])
    mask = batch != 0
    mask[1] = True
    alone = enc(short, short != 0)
    padded = enc(batch, mask)
    for a, p in zip(alone, padded):
        assert np.allclose(a.data[0], p.data[0, :3], atol=1e-12)


def test_dropout_only_in_training(rng):
    enc = Encoder(small_cfg(dropout_rate=0.3), rng)
    tokens = rng.integers(0, 20, size=(2, 5))
    enc.eval()
    a, b = enc(tokens).final.data, enc(tokens).final.data
    assert np.array_equal(a, b)
    enc.train()
    assert not np.array_equal(enc(tokens).final.data, a)


def test_input_validation(rng):
    enc = Encoder(small_cfg(), rng)
    with pytest.raises(InputError, match="batch 1, position 2"):
        enc(np.array([[1, 2, 3], [1, 2, 20]]))
    with pytest.raises(InputError):
        enc(np.zeros((1, 13), dtype=int))
    with pytest.raises(InputError):
        enc(np.zeros(4, dtype=int))


def test_config_validation():
    with pytest.raises(ConfigError, match="n_heads"):
        EncoderConfig(d_model=10, n_heads=3).validate()


def test_layer_param_count_examples():
    assert 2 * transformer_layer_param_count(1024) == 25_192_448
    assert transformer_layer_param_count(1024) == 12_596_224
    assert transformer_layer_param_count(1) == 25


@pytest.mark.parametrize("d,mult", [(8, 4), (12, 2), (16, 4)])
def test_layer_param_count_matches_registry(d, mult, rng):
    layer = TransformerLayer(d, 4, mult, rng)
    assert layer.num_parameters() == transformer_layer_param_count(d, mult)


def test_encoder_param_count_matches_registry(rng):
    cfg = small_cfg(n_layers=3)
    assert Encoder(cfg, rng).num_parameters() == encoder_param_count(cfg)


def _model(kind, rng):
    return FusionModel(small_cfg(), FusionSpec(kind=kind), 9, rng)


def test_freeze_fe_base_trains_task_only(rng):
    model = _model("base", rng)
    freeze_base(model, "FE")
    assert trainable_names(model) == ["task/projection/weight", "task/projection/bias"]


def test_freeze_fe_extra_trains_added_layers_and_task(rng):
    model = _model("extra", rng)
    freeze_base(model, "FE")
    names = trainable_names(model)
    assert names and all(n.startswith(("fusion/layers/", "task/")) for n in names)
    assert sum(n.startswith("fusion/") for n in names) == len(list(model.fusion.parameters()))


def test_freeze_ft_trains_everything(rng):
    model = _model("dwatt", rng)
    freeze_base(model, "FE")
    freeze_base(model, "FT")
    assert len(trainable_names(model)) == len(model.parameters())


def test_freeze_bad_mode(rng):
    with pytest.raises(ConfigError, match="train.mode"):
        freeze_base(_model("base", rng), "XX")


def test_eval_forward_is_pure(rng):
    enc = Encoder(small_cfg(dropout_rate=0.2), rng).eval()
    tokens = rng.integers(0, 20, size=(2, 7))
    a = [z.data.tobytes() for z in enc(tokens)]
    b = [z.data.tobytes() for z in enc(tokens)]
    assert a == b
