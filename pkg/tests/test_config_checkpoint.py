import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fjl.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
    LayoutMismatchError,
    check_layout,
    checkpoint_bytes,
    checkpoint_from_bytes,
    checkpoint_load,
    checkpoint_save,
)
from fjl.config import ConfigKeyError, ExperimentConfig, load_config, parse_config
from fjl.model import ModelConfig, init_params

from conftest import tiny_config


def test_defaults_round_trip_through_text():
    cfg = ExperimentConfig()
    assert parse_config(cfg.to_text()) == cfg


def test_every_key_documented_in_flat_view():
    flat = ExperimentConfig().flat()
    assert "federation.lambda" in flat and "federation.lambda_" not in flat
    assert "federation.relational" not in flat
    assert flat["model.architecture"] == "lstm_transformer"


def test_overrides_are_typed_and_synced():
    cfg = parse_config(
        """
[run]
seed = 7
[model]
mlp_layers = 32, 6
[federation]
lambda = 0.5
record_wall_time = no
[relational]
beta = 0.25
[eval]
thresholds = 0.1, 0.3
"""
    )
    assert cfg.seed == 7
    assert cfg.model.mlp_layers == (32, 6)
    assert cfg.federation.lambda_ == 0.5
    assert cfg.federation.record_wall_time is False
    # the federation config trains with the configured relational settings
    assert cfg.federation.relational.beta == 0.25
    assert cfg.eval.thresholds == (0.1, 0.3)
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text, key",
    [
        ("[model]\nwidth = 3\n", "model.width"),
        ("[nonsense]\na = 1\n", "nonsense"),
        ("[datagen]\nexercises = arm_lifting, jumping\n", "datagen.exercises"),
        ("[federation]\nn_clients = many\n", "federation.n_clients"),
        ("[federation]\nrecord_wall_time = maybe\n", "federation.record_wall_time"),
        ("[model]\nwindow_p = 8\n", "model.window_p"),
        ("[run]\ntest_fraction = 1.5\n", "run.test_fraction"),
        ("[federation]\nmode = gossip\n", "federation.mode"),
    ],
)
def test_bad_keys_name_the_key(text, key):
    with pytest.raises(ConfigKeyError) as info:
        parse_config(text)
    assert info.value.key == key
    assert key in str(info.value)


def test_load_and_write(tmp_path):
    cfg = ExperimentConfig().with_overrides({"run.seed": "3", "train.epochs": 5})
    path = tmp_path / "c.ini"
    cfg.write(path)
    assert load_config(path) == cfg


def test_with_overrides_rejects_unknown():
    with pytest.raises(ConfigKeyError):
        ExperimentConfig().with_overrides({"run.nope": "1"})


# -- checkpoints --------------------------------------------------------------


def test_round_trip_bit_exact(tmp_path):
    p = init_params(ModelConfig(), 3)
    path = tmp_path / "a.fjlck"
    checkpoint_save(p, path, {"pck": 0.5, "round": 4})
    q, meta = checkpoint_load(path)
    assert q.flatten().tobytes() == p.flatten().tobytes()
    assert q.config == p.config and meta == {"pck": 0.5, "round": 4}
    assert path.read_bytes()[:6] == MAGIC
    assert not (tmp_path / "a.fjlck.tmp").exists()


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(["lstm_only", "transformer_only", "lstm_encoder_decoder", "lstm_transformer"]), st.integers(0, 1000))
def test_round_trip_every_architecture(arch, seed):
    p = init_params(tiny_config(arch), seed)
    q, _ = checkpoint_from_bytes(checkpoint_bytes(p))
    assert q.equals(p)


def test_flipped_payload_byte_detected():
    data = bytearray(checkpoint_bytes(init_params(tiny_config(), 0)))
    data[-20] ^= 0x01
    with pytest.raises(ChecksumError):
        checkpoint_from_bytes(bytes(data))


def test_truncated_checkpoint():
    data = checkpoint_bytes(init_params(tiny_config(), 0))
    with pytest.raises(CheckpointError, match="unexpected end of payload"):
        checkpoint_from_bytes(data[:-1])
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(data[:10])


def test_bad_magic():
    data = checkpoint_bytes(init_params(tiny_config(), 0))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"NOTCK1" + data[6:])


def test_older_minor_version_warns():
    data = checkpoint_bytes(init_params(tiny_config(), 0), version=(VERSION[0], VERSION[1] - 1))
    with pytest.warns(UserWarning, match="format"):
        checkpoint_from_bytes(data)


def test_current_version_loads_silently():
    data = checkpoint_bytes(init_params(tiny_config(), 0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        checkpoint_from_bytes(data)


@pytest.mark.parametrize("version", [(VERSION[0], VERSION[1] + 1), (VERSION[0] + 1, 0), (VERSION[0] - 1, 9)])
def test_unsupported_versions(version):
    data = checkpoint_bytes(init_params(tiny_config(), 0), version=version)
    with pytest.raises(CheckpointVersionError):
        checkpoint_from_bytes(data)


def test_version_field_position():
    data = checkpoint_bytes(init_params(tiny_config(), 0))
    assert struct.unpack(">HH", data[6:10]) == VERSION


def test_layout_mismatch_names_parameter():
    data = checkpoint_bytes(init_params(tiny_config(), 0))
    with pytest.raises(LayoutMismatchError, match="lstm.w_ih"):
        checkpoint_from_bytes(data, expect_config=tiny_config(lstm_hidden=7))
    with pytest.raises(LayoutMismatchError, match=r"'mlp.0.w'.*'proj.w'"):
        check_layout(tiny_config("lstm_only"), tiny_config("lstm_transformer"))
    check_layout(tiny_config(), tiny_config())
