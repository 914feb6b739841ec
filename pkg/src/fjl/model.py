"""LSTM-Transformer pose estimator and the three baseline variants.

A window of ``P`` patient poses (7 values each) is mapped to a 6-value robot
target ``(x, y, z, vx, vy, vz)``. Inputs may be a single window ``(P, 7)`` or
a batch ``(B, P, 7)``; outputs follow the same leading shape.

Weight conventions: LSTM matrices are stored gate-stacked as ``(4H, in)``
with gate order input, forget, candidate, output. Every other weight matrix
is stored ``(in, out)`` and applied as ``x @ w``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .records import RobotTarget
from .tensor import Tensor, ShapeError

ARCHITECTURES = ("lstm_only", "transformer_only", "lstm_encoder_decoder", "lstm_transformer")
INPUT_DIM = 7
OUTPUT_DIM = 6
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = INPUT_DIM
    window_p: int = 16
    lstm_hidden: int = 64
    attn_heads: int = 4
    attn_dim: int = 64
    ffn_dim: int = 128
    mlp_layers: tuple = (64, 32, 6)
    architecture: str = "lstm_transformer"
    n_blocks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mlp_layers", tuple(int(w) for w in self.mlp_layers))

    def validate(self):
        if self.input_dim != INPUT_DIM:
            raise ConfigError(f"input_dim must be {INPUT_DIM}, got {self.input_dim}")
        for key in ("window_p", "lstm_hidden", "attn_heads", "attn_dim", "ffn_dim", "n_blocks"):
            if int(getattr(self, key)) <= 0:
                raise ConfigError(f"{key} must be a positive integer")
        if self.attn_dim % self.attn_heads:
            raise ConfigError(
                f"attn_dim ({self.attn_dim}) must be divisible by attn_heads ({self.attn_heads})"
            )
        if not self.mlp_layers or any(w <= 0 for w in self.mlp_layers):
            raise ConfigError("mlp_layers must be a non-empty list of positive widths")
        if self.mlp_layers[-1] != OUTPUT_DIM:
            raise ConfigError(f"last mlp layer must have width {OUTPUT_DIM}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        return self

    @property
    def uses_lstm(self):
        return self.architecture != "transformer_only"

    @property
    def uses_transformer(self):
        return self.architecture in ("transformer_only", "lstm_transformer")

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "window_p": self.window_p,
            "lstm_hidden": self.lstm_hidden,
            "attn_heads": self.attn_heads,
            "attn_dim": self.attn_dim,
            "ffn_dim": self.ffn_dim,
            "mlp_layers": list(self.mlp_layers),
            "architecture": self.architecture,
            "n_blocks": self.n_blocks,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_layout(config):
    """Ordered ``[(name, shape, fan_in)]``; ``fan_in`` is None for biases."""
    config.validate()
    H, d, dh = config.lstm_hidden, config.attn_dim, config.attn_dim // config.attn_heads
    layout = []
    if config.uses_lstm:
        layout += [
            ("lstm.w_ih", (4 * H, INPUT_DIM), INPUT_DIM),
            ("lstm.w_hh", (4 * H, H), H),
            ("lstm.b", (4 * H,), None),
        ]
    if config.architecture == "lstm_encoder_decoder":
        layout += [
            ("dec.w_ih", (4 * H, H), H),
            ("dec.w_hh", (4 * H, H), H),
            ("dec.b", (4 * H,), None),
        ]
    if config.architecture == "transformer_only":
        layout += [("embed.w", (INPUT_DIM, d), INPUT_DIM), ("embed.b", (d,), None)]
    if config.architecture == "lstm_transformer" and H != d:
        layout += [("proj.w", (H, d), H), ("proj.b", (d,), None)]
    if config.uses_transformer:
        for b in range(config.n_blocks):
            pre = f"block{b}"
            for k in range(config.attn_heads):
                for m in ("wq", "wk", "wv"):
                    layout.append((f"{pre}.attn.head{k}.{m}", (d, dh), d))
            layout += [
                (f"{pre}.attn.wo", (d, d), d),
                (f"{pre}.attn.bo", (d,), None),
                (f"{pre}.ffn.w1", (d, config.ffn_dim), d),
                (f"{pre}.ffn.b1", (config.ffn_dim,), None),
                (f"{pre}.ffn.w2", (config.ffn_dim, d), config.ffn_dim),
                (f"{pre}.ffn.b2", (d,), None),
            ]
    width = d if config.uses_transformer else H
    for i, out in enumerate(config.mlp_layers):
        layout += [(f"mlp.{i}.w", (width, out), width), (f"mlp.{i}.b", (out,), None)]
        width = out
    return layout


def layout_hash(config):
    """64-bit digest of parameter names and shapes."""
    h = hashlib.blake2b(digest_size=8)
    for name, shape, _ in param_layout(config):
        h.update(name.encode())
        h.update(struct.pack(f">{len(shape)}I", *shape))
        h.update(b";")
    return int.from_bytes(h.digest(), "big")


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    arrays: dict = field(repr=False)
    version: int = 0

    def __post_init__(self):
        expected = param_layout(self.config)
        if list(self.arrays) != [n for n, _, _ in expected]:
            raise ConfigError("parameter names do not match the config layout")
        frozen = {}
        for name, shape, _ in expected:
            arr = np.array(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "arrays", frozen)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    @property
    def size(self):
        return sum(a.size for a in self.arrays.values())

    def layout(self):
        return [(n, a.shape) for n, a in self.arrays.items()]

    def layout_hash(self):
        return layout_hash(self.config)

    def flatten(self):
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    @classmethod
    def unflatten(cls, config, vector, version=0):
        vector = np.asarray(vector, dtype=np.float64)
        layout = param_layout(config)
        total = sum(int(np.prod(s)) for _, s, _ in layout)
        if vector.shape != (total,):
            raise ShapeError(f"flat vector has length {vector.size}, layout needs {total}")
        arrays, pos = {}, 0
        for name, shape, _ in layout:
            n = int(np.prod(shape))
            arrays[name] = vector[pos : pos + n].reshape(shape)
            pos += n
        return cls(config, arrays, version)

    def with_vector(self, vector, version=None):
        return ModelParams.unflatten(
            self.config, vector, self.version + 1 if version is None else version
        )

    def tensors(self, requires_grad=False):
        return {n: Tensor(a, requires_grad=requires_grad) for n, a in self.arrays.items()}

    def equals(self, other):
        return (
            self.config == other.config
            and self.names() == other.names()
            and all(np.array_equal(self[n], other[n]) for n in self.names())
        )


def init_params(config, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    layout = param_layout(config)
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, fan_in in layout:
        if fan_in is None:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays, 0)


def _weights(params):
    if isinstance(params, ModelParams):
        return params.tensors()
    return params


def _as_input(x):
    if isinstance(x, Tensor):
        return x
    poses = getattr(x, "poses", x)
    return Tensor(np.asarray(poses, dtype=np.float64))


@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden, batch_shape=()):
        z = Tensor(np.zeros(tuple(batch_shape) + (hidden,)))
        return cls(z, z)


def lstm_step(x_t, state, params, prefix="lstm"):
    """One LSTM cell update; returns the next :class:`LstmState`."""
    w = _weights(params)
    w_ih, w_hh, b = w[f"{prefix}.w_ih"], w[f"{prefix}.w_hh"], w[f"{prefix}.b"]
    H = w_hh.shape[1]
    x_t = _as_input(x_t)
    if x_t.shape[-1] != w_ih.shape[1]:
        raise ShapeError(f"lstm_step: input width {x_t.shape[-1]} != {w_ih.shape[1]}")
    if state.h.shape[-1] != H or state.c.shape[-1] != H:
        raise ShapeError(f"lstm_step: state width {state.h.shape} != hidden {H}")
    return _lstm_cell(x_t, state, T.transpose(w_ih), T.transpose(w_hh), b, H)


def _lstm_cell(x_t, state, w_ih_t, w_hh_t, b, H):
    squeeze = x_t.ndim == 1
    x2 = T.reshape(x_t, (1, -1)) if squeeze else x_t
    h2 = T.reshape(state.h, (1, H)) if state.h.ndim == 1 else state.h
    c2 = T.reshape(state.c, (1, H)) if state.c.ndim == 1 else state.c
    gates = T.add(T.add(T.matmul(x2, w_ih_t), T.matmul(h2, w_hh_t)), b)
    i = T.sigmoid(T.slice_axis(gates, -1, 0, H))
    f = T.sigmoid(T.slice_axis(gates, -1, H, 2 * H))
    g = T.tanh(T.slice_axis(gates, -1, 2 * H, 3 * H))
    o = T.sigmoid(T.slice_axis(gates, -1, 3 * H, 4 * H))
    c = T.add(T.mul(f, c2), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    if squeeze:
        return LstmState(T.reshape(h, (H,)), T.reshape(c, (H,)))
    return LstmState(h, c)


def _run_lstm(x, w, prefix="lstm"):
    """Run over ``x`` of shape (B, P, in); return (B, P, H) and final state."""
    w_ih_t = T.transpose(w[f"{prefix}.w_ih"])
    w_hh_t = T.transpose(w[f"{prefix}.w_hh"])
    b = w[f"{prefix}.b"]
    H = w[f"{prefix}.w_hh"].shape[1]
    B, P = x.shape[0], x.shape[1]
    state = LstmState.zeros(H, (B,))
    rows = []
    for t in range(P):
        x_t = T.reshape(T.slice_axis(x, 1, t, t + 1), (B, x.shape[2]))
        state = _lstm_cell(x_t, state, w_ih_t, w_hh_t, b, H)
        rows.append(T.reshape(state.h, (B, 1, H)))
    return T.concat(rows, axis=1), state


def _batched(x, P):
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
        single = True
    elif x.ndim == 3:
        single = False
    else:
        raise ShapeError(f"expected a window (P, 7) or batch (B, P, 7), got {x.shape}")
    if x.shape[1] != P or x.shape[2] != INPUT_DIM:
        raise ShapeError(f"window must have shape ({P}, {INPUT_DIM}), got {x.shape[1:]}")
    return x, single


def encode_window(window, params):
    """LSTM feature embedding: row t is the hidden state after pose t."""
    cfg = params.config if isinstance(params, ModelParams) else None
    w = _weights(params)
    x = _as_input(window)
    P = cfg.window_p if cfg is not None else x.shape[-2]
    x, single = _batched(x, P)
    feats, _ = _run_lstm(x, w)
    if single:
        return T.reshape(feats, feats.shape[1:])
    return feats


def positional_encoding(P, d):
    pos = np.arange(P)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def transformer_block(features, params, block=0, return_attention=False):
    """Pre-norm block: x + MHA(LN(x)), then y + FFN(LN(y)).

    ``features`` is (P, d) or (B, P, d). With ``return_attention`` the
    per-head attention weights, each (B, P, P), are returned as well.
    """
    w = _weights(params)
    x = _as_input(features)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    pre = f"block{block}"
    d = w[f"{pre}.attn.wo"].shape[0]
    if x.ndim != 3 or x.shape[-1] != d:
        raise ShapeError(f"transformer_block: expected feature width {d}, got shape {x.shape}")
    n_heads = 0
    while f"{pre}.attn.head{n_heads}.wq" in w:
        n_heads += 1
    dh = d // n_heads
    h = T.layer_norm(x, LN_EPS)
    heads, weights = [], []
    for k in range(n_heads):
        q = T.matmul(h, w[f"{pre}.attn.head{k}.wq"])
        kk = T.matmul(h, w[f"{pre}.attn.head{k}.wk"])
        v = T.matmul(h, w[f"{pre}.attn.head{k}.wv"])
        scores = T.scale(T.matmul(q, T.transpose(kk)), 1.0 / math.sqrt(dh))
        a = T.softmax(scores)
        weights.append(a)
        heads.append(T.matmul(a, v))
    mixed = T.concat(heads, axis=-1) if n_heads > 1 else heads[0]
    y = T.add(x, T.add(T.matmul(mixed, w[f"{pre}.attn.wo"]), w[f"{pre}.attn.bo"]))
    hidden = T.relu(T.add(T.matmul(T.layer_norm(y, LN_EPS), w[f"{pre}.ffn.w1"]), w[f"{pre}.ffn.b1"]))
    out = T.add(y, T.add(T.matmul(hidden, w[f"{pre}.ffn.w2"]), w[f"{pre}.ffn.b2"]))
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_attention:
        return out, weights
    return out


def _mlp(z, w, n_layers):
    for i in range(n_layers):
        z = T.add(T.matmul(z, w[f"mlp.{i}.w"]), w[f"mlp.{i}.b"])
        if i < n_layers - 1:
            z = T.relu(z)
    return z


def forward(x, params, weights=None):
    """Batched forward pass for ``x`` of shape (B, P, 7) -> (B, 6).

    ``weights`` lets callers pass their own Tensor leaves (for gradients).
    """
    cfg = params.config if isinstance(params, ModelParams) else params
    w = weights if weights is not None else params.tensors()
    x = _as_input(x)
    x, single = _batched(x, cfg.window_p)
    B, P = x.shape[0], cfg.window_p
    arch = cfg.architecture
    if arch == "transformer_only":
        feats = T.add(T.matmul(x, w["embed.w"]), w["embed.b"])
    else:
        feats, state = _run_lstm(x, w)
    if arch == "lstm_encoder_decoder":
        H = cfg.lstm_hidden
        dec_in = T.reshape(T.slice_axis(feats, 1, P - 1, P), (B, H))
        last = lstm_step(dec_in, state, w, prefix="dec").h
    elif cfg.uses_transformer:
        if "proj.w" in w:
            feats = T.add(T.matmul(feats, w["proj.w"]), w["proj.b"])
        feats = T.add(feats, positional_encoding(P, cfg.attn_dim))
        for b in range(cfg.n_blocks):
            feats = transformer_block(feats, w, block=b)
        last = T.reshape(T.slice_axis(feats, 1, P - 1, P), (B, feats.shape[-1]))
    else:
        last = T.reshape(T.slice_axis(feats, 1, P - 1, P), (B, feats.shape[-1]))
    out = _mlp(last, w, len(cfg.mlp_layers))
    if single:
        return T.reshape(out, (OUTPUT_DIM,))
    return out


def predict(window, params):
    """Robot target for one window; a (B, 6) array for a batch."""
    out = forward(window, params).data
    if out.ndim == 1:
        return RobotTarget.from_vector(out)
    return out


def predict_batched(x, params, chunk=512):
    """Inference over many windows, evaluated in chunks."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, OUTPUT_DIM))
    w = params.tensors()
    return np.concatenate(
        [forward(x[i : i + chunk], params, w).data for i in range(0, len(x), chunk)]
    )
