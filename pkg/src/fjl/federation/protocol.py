"""Binary framing for coordinator/client messages.

Frame layout::

    +--------+------+----------------+-----------------+
    | "FJL1" | kind | payload length | payload         |
    | 4 B    | 1 B  | 4 B big-endian | length bytes    |
    +--------+------+----------------+-----------------+

Integers are big-endian, floats little-endian float64, strings a 4-byte
length followed by UTF-8. REGISTER carries only the client id (its round is
always 0); every other kind starts its payload with a 4-byte round number.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FJL1"
HEADER = struct.Struct(">4sBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 31


class ProtocolError(Exception):
    pass


class BadMagicError(ProtocolError):
    pass


class FramingError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class Kind(enum.IntEnum):
    REGISTER = 1
    MODEL_BROADCAST = 2
    GRAD_UPLOAD = 3
    ROUND_END = 4
    SHUTDOWN = 5


@dataclass(frozen=True)
class GradientUpdate:
    client_id: str
    round: int
    delta: np.ndarray
    n_samples: int
    local_loss: float
    layout_hash: int

    def __post_init__(self):
        delta = np.array(self.delta, dtype=np.float64).reshape(-1)
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")

    def __eq__(self, other):
        if not isinstance(other, GradientUpdate):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.round == other.round
            and self.n_samples == other.n_samples
            and _same_float(self.local_loss, other.local_loss)
            and self.layout_hash == other.layout_hash
            and _same_vec(self.delta, other.delta)
        )


@dataclass(frozen=True)
class Broadcast:
    """Global parameters plus optional peer snapshots (personalized mode)."""

    layout_hash: int
    params: np.ndarray
    peers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "params", np.array(self.params, dtype=np.float64).reshape(-1))
        object.__setattr__(
            self, "peers", tuple(np.array(p, dtype=np.float64).reshape(-1) for p in self.peers)
        )

    def __eq__(self, other):
        if not isinstance(other, Broadcast):
            return NotImplemented
        return (
            self.layout_hash == other.layout_hash
            and _same_vec(self.params, other.params)
            and len(self.peers) == len(other.peers)
            and all(_same_vec(a, b) for a, b in zip(self.peers, other.peers))
        )


@dataclass(frozen=True)
class RoundReport:
    round: int
    global_loss: float
    global_pck: float
    spearman_loss_metric: float
    per_client: dict = field(default_factory=dict)  # client_id -> (local_loss, n_samples)
    wall_time: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, RoundReport):
            return NotImplemented
        return self.same_metrics(other) and _same_float(self.wall_time, other.wall_time)

    def same_metrics(self, other):
        """Equality ignoring ``wall_time``."""
        return (
            self.round == other.round
            and _same_float(self.global_loss, other.global_loss)
            and _same_float(self.global_pck, other.global_pck)
            and _same_float(self.spearman_loss_metric, other.spearman_loss_metric)
            and sorted(self.per_client) == sorted(other.per_client)
            and all(
                _same_float(self.per_client[k][0], other.per_client[k][0])
                and self.per_client[k][1] == other.per_client[k][1]
                for k in self.per_client
            )
        )


def _same_float(a, b):
    return a == b or (a != a and b != b)


def _same_vec(a, b):
    return np.array_equal(a, b, equal_nan=True)


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    round: int = 0
    payload: object = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))


# -- encoding helpers --------------------------------------------------------


def _u32(n):
    return struct.pack(">I", n)


def _u64(n):
    return struct.pack(">Q", n)


def _f64(x):
    return struct.pack("<d", x)


def _str(s):
    raw = s.encode("utf-8")
    return _u32(len(raw)) + raw


def _vec(v):
    v = np.ascontiguousarray(v, dtype="<f8")
    return _u32(v.size) + v.tobytes()


class _Cursor:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FramingError("truncated payload")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack(">I", self.take(4))[0]

    def u64(self):
        return struct.unpack(">Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def str(self):
        n = self.u32()
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise FramingError("string is not valid UTF-8") from None

    def vec(self):
        n = self.u32()
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def done(self):
        if self.pos != len(self.buf):
            raise FramingError(f"{len(self.buf) - self.pos} unexpected trailing payload bytes")


def _encode_payload(msg):
    k, p = msg.kind, msg.payload
    if k == Kind.REGISTER:
        if msg.round != 0:
            raise ProtocolError("REGISTER messages always carry round 0")
        return _str(p)
    head = _u32(msg.round)
    if k == Kind.MODEL_BROADCAST:
        parts = [head, _u64(p.layout_hash), _u32(1 + len(p.peers)), _vec(p.params)]
        parts += [_vec(v) for v in p.peers]
        return b"".join(parts)
    if k == Kind.GRAD_UPLOAD:
        if p.round != msg.round:
            raise ProtocolError("GRAD_UPLOAD round differs from its update's round")
        return b"".join(
            [
                head,
                _str(p.client_id),
                _u32(p.n_samples),
                _f64(p.local_loss),
                _u64(p.layout_hash),
                _vec(p.delta),
            ]
        )
    if k == Kind.ROUND_END:
        if p.round != msg.round:
            raise ProtocolError("ROUND_END round differs from its report's round")
        parts = [
            head,
            _f64(p.global_loss),
            _f64(p.global_pck),
            _f64(p.spearman_loss_metric),
            _f64(p.wall_time),
            _u32(len(p.per_client)),
        ]
        for cid in sorted(p.per_client):
            loss, n = p.per_client[cid]
            parts += [_str(cid), _f64(loss), _u32(n)]
        return b"".join(parts)
    if k == Kind.SHUTDOWN:
        return head
    raise VersionError(f"unknown message kind {k}")


def encode_message(msg):
    payload = _encode_payload(msg)
    return HEADER.pack(MAGIC, int(msg.kind), len(payload)) + payload


def parse_header(header):
    if len(header) < HEADER_SIZE:
        raise FramingError("truncated frame header")
    magic, kind, length = HEADER.unpack(bytes(header[:HEADER_SIZE]))
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise VersionError(f"unknown message kind {kind}") from None
    if length > MAX_PAYLOAD:
        raise FramingError(f"payload length {length} exceeds limit")
    return kind, length


def decode_payload(kind, payload):
    c = _Cursor(payload)
    if kind == Kind.REGISTER:
        msg = ProtocolMessage(kind, 0, c.str())
    else:
        rnd = c.u32()
        if kind == Kind.MODEL_BROADCAST:
            lh = c.u64()
            n = c.u32()
            if n < 1:
                raise FramingError("broadcast carries no parameter vector")
            vecs = [c.vec() for _ in range(n)]
            msg = ProtocolMessage(kind, rnd, Broadcast(lh, vecs[0], tuple(vecs[1:])))
        elif kind == Kind.GRAD_UPLOAD:
            cid = c.str()
            n = c.u32()
            loss = c.f64()
            lh = c.u64()
            delta = c.vec()
            msg = ProtocolMessage(kind, rnd, GradientUpdate(cid, rnd, delta, n, loss, lh))
        elif kind == Kind.ROUND_END:
            gl, gp, sp, wt = c.f64(), c.f64(), c.f64(), c.f64()
            per = {}
            for _ in range(c.u32()):
                cid = c.str()
                per[cid] = (c.f64(), c.u32())
            msg = ProtocolMessage(kind, rnd, RoundReport(rnd, gl, gp, sp, per, wt))
        elif kind == Kind.SHUTDOWN:
            msg = ProtocolMessage(kind, rnd, None)
        else:  # pragma: no cover - Kind() already rejected it
            raise VersionError(f"unknown message kind {kind}")
    c.done()
    return msg


def decode_message(data):
    """Decode exactly one frame."""
    data = memoryview(bytes(data))
    kind, length = parse_header(data)
    payload = data[HEADER_SIZE:]
    if len(payload) < length:
        raise FramingError(f"truncated payload: expected {length} bytes, got {len(payload)}")
    if len(payload) > length:
        raise FramingError(f"{len(payload) - length} bytes after end of frame")
    return decode_payload(kind, payload)


# -- stream helpers ----------------------------------------------------------


def _recv_exact(sock, n):
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise FramingError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock):
    """Read one whole frame from a socket; returns the raw bytes."""
    header = _recv_exact(sock, HEADER_SIZE)
    _, length = parse_header(header)
    return header + _recv_exact(sock, length)


def send_frame(sock, frame):
    sock.sendall(frame)


# -- session rules -----------------------------------------------------------


class SessionMonitor:
    """Checks one client session against the message state machine.

    Allowed order: REGISTER, then any number of MODEL_BROADCAST/GRAD_UPLOAD
    pairs and ROUND_END notices, then SHUTDOWN. Round numbers never decrease.
    """

    def __init__(self):
        self.state = "new"
        self.round = 0

    def observe(self, msg):
        k = msg.kind
        if msg.round < self.round:
            raise ProtocolError(f"round went backwards: {msg.round} after {self.round}")
        allowed = {
            "new": {Kind.REGISTER},
            "registered": {Kind.MODEL_BROADCAST, Kind.ROUND_END, Kind.SHUTDOWN},
            "broadcast": {Kind.GRAD_UPLOAD, Kind.MODEL_BROADCAST, Kind.SHUTDOWN},
            "closed": set(),
        }[self.state]
        if k not in allowed:
            raise ProtocolError(f"{k.name} not allowed in state {self.state}")
        self.round = msg.round
        if k == Kind.REGISTER:
            self.state = "registered"
        elif k == Kind.MODEL_BROADCAST:
            self.state = "broadcast"
        elif k in (Kind.GRAD_UPLOAD, Kind.ROUND_END):
            self.state = "registered"
        else:
            self.state = "closed"
