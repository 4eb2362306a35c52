import numpy as np
import pytest

from deskpaws import autodiff as ad
from deskpaws.encoder import (
    CheckpointFormatError,
    ConfigError,
    EncoderConfig,
    EncoderParams,
    Layer,
    checkpoint_bytes,
    embed,
    encode,
    init_params,
    load_checkpoint,
    parse_checkpoint,
    predict_head,
    save_checkpoint,
)

SMALL = EncoderConfig(input_dim=5, hidden_dim=6, trunk_layers=1, proj_hidden=4, proj_layers=2, embed_dim=3)


def x_batch(n=4, d=5, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def test_zero_params_give_zero_output():
    params = init_params(SMALL, 0)
    for p in params.parameters():
        p.value[...] = 0.0
    np.testing.assert_array_equal(encode(params, x_batch()).value, 0.0)


def test_identity_single_layer():
    layer = Layer(ad.parameter(np.eye(2)), ad.parameter(np.zeros((1, 2))))
    params = EncoderParams(trunk=[layer])
    x = np.array([[1.5, -2.0], [0.0, 3.0]])
    np.testing.assert_array_equal(encode(params, x).value, x)


def test_passthrough_without_layers():
    x = x_batch()
    np.testing.assert_array_equal(encode(EncoderParams(), x).value, x)


def test_input_dim_mismatch():
    with pytest.raises(ad.ShapeError):
        encode(init_params(SMALL, 0), x_batch(d=4))


def test_embed_matches_encode():
    params = init_params(EncoderConfig(), 3)
    x = x_batch(8, 16)
    np.testing.assert_array_equal(embed(params, x), encode(params, x).value)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_encoder_grad_check(seed):
    params = init_params(SMALL, seed)
    x = x_batch(seed=seed + 10)
    rep = ad.grad_check(lambda: ad.mean(encode(params, x)), params.parameters())
    assert rep.passed, rep.worst


def test_encode_deterministic():
    params = init_params(SMALL, 0)
    x = x_batch()
    np.testing.assert_array_equal(encode(params, x).value, encode(params, x).value)


def test_init_determinism_and_bounds():
    a, b, c = init_params(SMALL, 7), init_params(SMALL, 7), init_params(SMALL, 8)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.value, pb.value)
    assert any(not np.array_equal(pa.value, pc.value) for pa, pc in zip(a.parameters(), c.parameters()))
    for layer in a.layers():
        bound = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        assert np.abs(layer.weight.value).max() <= bound
        np.testing.assert_array_equal(layer.bias.value, 0.0)


def test_default_dims():
    params = init_params(EncoderConfig(), 0)
    shapes = [l.weight.shape for l in params.layers()]
    assert shapes == [(16, 64), (64, 64), (64, 64), (64, 64), (64, 32)]
    assert not params.has_prediction_head


@pytest.mark.parametrize("field", ["input_dim", "hidden_dim", "embed_dim"])
def test_nonpositive_dim_rejected(field):
    cfg = EncoderConfig(**{field: 0})
    with pytest.raises(ConfigError):
        init_params(cfg, 0)


def test_prediction_head():
    cfg = EncoderConfig(**{**SMALL.__dict__, "pred_head": True, "pred_hidden": 5})
    params = init_params(cfg, 0)
    z = encode(params, x_batch())
    assert predict_head(params, z, enabled=False) is z
    out = predict_head(params, z)
    assert out.shape == z.shape
    assert not np.allclose(out.value, z.value)
    params.prediction[-1].weight.value[...] = 0.0
    params.prediction[-1].bias.value[...] = 0.25
    np.testing.assert_array_equal(predict_head(params, z).value, 0.25)


def test_prediction_head_missing():
    params = init_params(SMALL, 0)
    with pytest.raises(ConfigError):
        predict_head(params, encode(params, x_batch()))


def test_checkpoint_round_trip(tmp_path):
    params = init_params(EncoderConfig(pred_head=True), 4)
    vel = [np.random.default_rng(i).normal(size=p.shape) for i, p in enumerate(params.parameters())]
    save_checkpoint(tmp_path / "a.paws", params, vel, step=123, epoch=5)
    ck = load_checkpoint(tmp_path / "a.paws")
    assert (ck.step, ck.epoch) == (123, 5)
    assert ck.params.has_prediction_head
    for p, q in zip(params.parameters(), ck.params.parameters()):
        np.testing.assert_array_equal(p.value, q.value)
    for v, w in zip(vel, ck.velocity):
        np.testing.assert_array_equal(v, w)
    assert checkpoint_bytes(ck.params, ck.velocity, ck.step, ck.epoch) == (tmp_path / "a.paws").read_bytes()


def test_checkpoint_header():
    blob = checkpoint_bytes(init_params(SMALL, 0))
    assert blob[:4] == b"PAWS"
    assert int.from_bytes(blob[4:8], "little") == 1
    # layout row + 3 layers x (W, b)
    assert int.from_bytes(blob[8:12], "little") == 7
    assert parse_checkpoint(blob).velocity is None


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
])
def test_checkpoint_corruption(mutate):
    blob = checkpoint_bytes(init_params(SMALL, 0))
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(mutate(blob))
