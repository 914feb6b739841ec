import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fjl import tensor as T
from fjl.model import (
    ARCHITECTURES,
    ConfigError,
    LstmState,
    ModelConfig,
    ModelParams,
    encode_window,
    forward,
    init_params,
    layout_hash,
    lstm_step,
    param_layout,
    predict,
    predict_batched,
    transformer_block,
)
from fjl.records import ObservationWindow, RobotTarget

from conftest import tiny_config
from oracles import directional_check


def _window(rng, P=16):
    poses = rng.normal(size=(P, 7))
    return ObservationWindow(poses, np.arange(P) * 0.02, "P000", "arm_lifting")


def test_init_is_deterministic():
    cfg = ModelConfig()
    assert init_params(cfg, 5).equals(init_params(cfg, 5))
    a, b = init_params(cfg, 5).flatten(), init_params(cfg, 6).flatten()
    assert not np.array_equal(a, b)


def test_init_ranges():
    cfg = ModelConfig(lstm_hidden=16)
    p = init_params(cfg, 0)
    assert p["lstm.w_ih"].shape == (64, 7)
    for name, shape, fan_in in param_layout(cfg):
        if fan_in is None:
            assert not p[name].any()
        else:
            assert np.abs(p[name]).max() <= 1 / np.sqrt(fan_in)


def test_default_parameter_count():
    assert init_params(ModelConfig(), 0).size == 57894


@pytest.mark.parametrize(
    "kw",
    [
        dict(attn_dim=10, attn_heads=4),
        dict(mlp_layers=(64, 5)),
        dict(architecture="gru"),
        dict(input_dim=6),
        dict(lstm_hidden=0),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        init_params(ModelConfig(**kw), 0)


def test_flatten_round_trip_bytes():
    p = init_params(ModelConfig(), 1)
    vec = p.flatten()
    again = ModelParams.unflatten(p.config, vec).flatten()
    assert vec.tobytes() == again.tobytes()


def test_unflatten_wrong_length():
    with pytest.raises(T.ShapeError):
        ModelParams.unflatten(ModelConfig(), np.zeros(10))


def test_layout_hash_depends_on_shapes():
    assert layout_hash(ModelConfig()) == layout_hash(ModelConfig())
    assert layout_hash(ModelConfig()) != layout_hash(ModelConfig(lstm_hidden=32))
    assert layout_hash(ModelConfig()) != layout_hash(ModelConfig(architecture="lstm_only"))
    assert 0 <= layout_hash(ModelConfig()) < 2**64


def test_lstm_step_zero_weights():
    cfg = tiny_config()
    zero = ModelParams.unflatten(cfg, np.zeros(init_params(cfg, 0).size))
    s = lstm_step(np.ones(7), LstmState.zeros(6), zero)
    assert np.array_equal(s.h.data, np.zeros(6)) and np.array_equal(s.c.data, np.zeros(6))


def test_lstm_step_shapes_and_errors(rng):
    p = init_params(tiny_config(), 0)
    s = lstm_step(rng.normal(size=7), LstmState.zeros(6), p)
    assert s.h.shape == (6,) and s.c.shape == (6,)
    with pytest.raises(T.ShapeError):
        lstm_step(rng.normal(size=5), LstmState.zeros(6), p)
    with pytest.raises(T.ShapeError):
        lstm_step(rng.normal(size=7), LstmState.zeros(4), p)


def test_lstm_step_matches_manual_gates(rng):
    p = init_params(tiny_config(), 3)
    x, h, c = rng.normal(size=7), rng.normal(size=6), rng.normal(size=6)
    s = lstm_step(x, LstmState(T.Tensor(h), T.Tensor(c)), p)
    z = p["lstm.w_ih"] @ x + p["lstm.w_hh"] @ h + p["lstm.b"]
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:6]), sig(z[6:12]), np.tanh(z[12:18]), sig(z[18:])
    c2 = f * c + i * g
    np.testing.assert_allclose(s.c.data, c2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(s.h.data, o * np.tanh(c2), rtol=1e-13, atol=1e-15)


def test_lstm_step_gradients(rng):
    p = init_params(tiny_config(), 2)
    names = ["lstm.w_ih", "lstm.w_hh", "lstm.b"]
    sizes = [p[n].size for n in names]
    x = rng.normal(size=7)
    state = LstmState(T.Tensor(rng.normal(size=6)), T.Tensor(rng.normal(size=6)))

    def f(v):
        parts = np.cumsum([0] + sizes)
        w = {n: T.reshape(T.slice_axis(v, 0, parts[k], parts[k + 1]), p[n].shape) for k, n in enumerate(names)}
        return T.mean(lstm_step(x, state, w).h)

    point = np.concatenate([p[n].reshape(-1) for n in names])
    assert T.finite_diff_check(f, point) < 1e-4


def test_encode_window_shape_and_reduction(rng):
    cfg = tiny_config()
    p = init_params(cfg, 0)
    w = _window(rng)
    assert encode_window(w, p).shape == (16, 6)
    one = ModelConfig(**{**cfg.to_dict(), "window_p": 1})
    p1 = ModelParams.unflatten(one, p.flatten())
    x = rng.normal(size=(1, 7))
    enc = encode_window(x, p1).data
    step = lstm_step(x[0], LstmState.zeros(6), p1).h.data
    np.testing.assert_array_equal(enc[0], step)


def test_encode_window_rejects_wrong_length(rng):
    p = init_params(tiny_config(), 0)
    with pytest.raises(T.ShapeError):
        encode_window(rng.normal(size=(15, 7)), p)


def test_encode_window_order_sensitive(rng):
    p = init_params(tiny_config(), 0)
    for _ in range(10):
        x = rng.normal(size=(16, 7))
        perm = rng.permutation(16)
        assert not np.allclose(encode_window(x, p).data, encode_window(x[perm], p).data)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 14), st.integers(0, 2**31))
def test_encode_window_is_causal(t, seed):
    rng = np.random.default_rng(seed)
    p = init_params(tiny_config(), 0)
    x = rng.normal(size=(16, 7))
    y = x.copy()
    y[t + 1 :] = 0.0
    a, b = encode_window(x, p).data, encode_window(y, p).data
    np.testing.assert_array_equal(a[: t + 1], b[: t + 1])


def test_attention_rows_sum_to_one(rng):
    p = init_params(tiny_config(), 0)
    out, weights = transformer_block(rng.normal(size=(16, 4)), p, return_attention=True)
    assert out.shape == (16, 4)
    for a in weights:
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-9)


def test_zeroed_value_output_projection_is_ffn_residual(rng):
    cfg = tiny_config()
    arrays = dict(init_params(cfg, 4).arrays)
    for name in arrays:
        if name.endswith(".wv") or name in ("block0.attn.wo", "block0.attn.bo"):
            arrays[name] = np.zeros_like(arrays[name])
    p = ModelParams(cfg, arrays)
    x = rng.normal(size=(16, 4))
    ln = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    hidden = np.maximum(ln @ p["block0.ffn.w1"] + p["block0.ffn.b1"], 0.0)
    expected = x + hidden @ p["block0.ffn.w2"] + p["block0.ffn.b2"]
    np.testing.assert_allclose(transformer_block(x, p).data, expected, rtol=1e-12, atol=1e-12)


def test_transformer_block_shape_error(rng):
    p = init_params(tiny_config(), 0)
    with pytest.raises(T.ShapeError):
        transformer_block(rng.normal(size=(16, 5)), p)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_predict_contract(arch, rng):
    p = init_params(tiny_config(arch), 0)
    w = _window(rng)
    out = predict(w, p)
    assert isinstance(out, RobotTarget)
    assert out.vector().shape == (6,)
    assert np.array_equal(out.vector(), predict(w, p).vector())


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_batched_forward_matches_single(arch, rng):
    p = init_params(tiny_config(arch), 1)
    x = rng.normal(size=(5, 16, 7))
    batch = forward(x, p).data
    for i in range(5):
        np.testing.assert_allclose(forward(x[i], p).data, batch[i], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(predict_batched(x, p, chunk=2), predict_batched(x, p, chunk=5), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_forward_gradients_every_architecture(arch, rng):
    p = init_params(tiny_config(arch), 7)
    x = rng.normal(size=(2, 16, 7))
    y = rng.normal(size=(2, 6))

    def f(v):
        w = {}
        pos = 0
        for name, shape in p.layout():
            n = int(np.prod(shape))
            w[name] = T.reshape(T.slice_axis(v, 0, pos, pos + n), shape)
            pos += n
        return T.mean(T.square(T.sub(forward(x, p, w), y)))

    assert directional_check(f, p.flatten(), rng, n_dirs=5) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_no_dead_branches(seed):
    rng = np.random.default_rng(seed)
    p = init_params(ModelConfig(), seed)
    w = p.tensors(requires_grad=True)
    out = forward(rng.normal(size=(4, 16, 7)), p, w)
    T.backward(T.mean(T.square(T.sub(out, rng.normal(size=(4, 6))))))
    for name in p.names():
        assert np.any(w[name].grad != 0), name


def test_projection_only_when_widths_differ():
    names = init_params(ModelConfig(lstm_hidden=64, attn_dim=64), 0).names()
    assert "proj.w" not in names
    names = init_params(ModelConfig(lstm_hidden=32, attn_dim=64), 0).names()
    assert "proj.w" in names
