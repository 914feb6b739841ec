"""Checkpoint files.

Layout::

    "FJLCK1" | u16 major | u16 minor | u32 header length | JSON header
             | little-endian float64 payload | u64 checksum

The header records the model config, the parameter name/shape table, the
parameter version and free-form metadata (e.g. the PCK the parameters
scored). The checksum is an 8-byte BLAKE2b digest of the payload, read as a
big-endian integer. Files written by an older minor version load with a
warning; a newer major or minor version is refused.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings

import numpy as np

from .model import ModelConfig, ModelParams, layout_hash, param_layout

MAGIC = b"FJLCK1"
VERSION = (1, 1)
_PREFIX = struct.Struct(">6sHHI")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class LayoutMismatchError(CheckpointError):
    pass


def payload_checksum(payload):
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def checkpoint_bytes(params, metadata=None, version=VERSION):
    header = {
        "model": params.config.to_dict(),
        "params": [[name, list(shape)] for name, shape in params.layout()],
        "layout_hash": params.layout_hash(),
        "version": params.version,
        "metadata": metadata or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(params.flatten(), dtype="<f8").tobytes()
    return b"".join(
        [
            _PREFIX.pack(MAGIC, version[0], version[1], len(raw)),
            raw,
            payload,
            struct.pack(">Q", payload_checksum(payload)),
        ]
    )


def checkpoint_save(params, path, metadata=None):
    """Write atomically: a temporary file renamed over ``path``."""
    data = checkpoint_bytes(params, metadata)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def checkpoint_from_bytes(data, expect_config=None):
    """Returns ``(params, metadata)``."""
    data = bytes(data)
    if len(data) < _PREFIX.size:
        raise CheckpointError("unexpected end of checkpoint header")
    magic, major, minor, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if (major, minor) > VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {major}.{minor} is newer than supported {VERSION[0]}.{VERSION[1]}"
        )
    if major < VERSION[0]:
        raise CheckpointVersionError(f"checkpoint major version {major} is no longer supported")
    if minor < VERSION[1]:
        warnings.warn(
            f"checkpoint written by format {major}.{minor}; current is {VERSION[0]}.{VERSION[1]}",
            stacklevel=2,
        )
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError("unexpected end of checkpoint header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    config = ModelConfig.from_dict(header["model"])
    table = [(name, tuple(shape)) for name, shape in header["params"]]
    n = sum(int(np.prod(shape)) for _, shape in table)
    body = data[start + hlen :]
    if len(body) != 8 * n + 8:
        raise CheckpointError(f"unexpected end of payload: expected {8 * n + 8} bytes, got {len(body)}")
    payload, (stored,) = body[:-8], struct.unpack(">Q", body[-8:])
    if payload_checksum(payload) != stored:
        raise ChecksumError("checkpoint checksum mismatch: payload is corrupted")
    expected = [(name, shape) for name, shape, _ in param_layout(config)]
    if expected != table or header["layout_hash"] != layout_hash(config):
        raise CheckpointError("parameter table does not match the recorded model config")
    if expect_config is not None:
        check_layout(expect_config, config)
    vec = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = ModelParams.unflatten(config, vec, header["version"])
    return params, header.get("metadata", {})


def checkpoint_load(path, expect_config=None):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), expect_config)


def check_layout(expected_config, actual_config):
    """Raise naming the first parameter whose name or shape differs."""
    a = [(n, s) for n, s, _ in param_layout(expected_config)]
    b = [(n, s) for n, s, _ in param_layout(actual_config)]
    for i in range(max(len(a), len(b))):
        ea = a[i] if i < len(a) else None
        eb = b[i] if i < len(b) else None
        if ea != eb:
            name = (ea or eb)[0]
            raise LayoutMismatchError(
                f"parameter {name!r} mismatch: expected {ea[1] if ea else 'absent'}, "
                f"checkpoint has {eb[1] if eb else 'absent'}"
                + (f" ({eb[0]!r})" if eb and ea and eb[0] != ea[0] else "")
            )

