"""Coordinator loop and the two transports.

Both transports move the same encoded frames; ``in_process`` hands them to
client objects directly and runs clients one after another (deterministic),
``tcp`` runs each client in its own thread behind a real socket.
"""

from __future__ import annotations

import logging
import os
import socket
import threading
import time

import numpy as np

from ..model import ModelParams, init_params
from ..training import evaluate
from .core import (
    FederationError,
    aggregate_updates,
    apply_global_update,
    client_ids,
    client_local_round,
    client_rng,
    partition_dataset,
    peer_snapshots,
)
from .protocol import (
    Broadcast,
    FramingError,
    Kind,
    ProtocolError,
    ProtocolMessage,
    RoundReport,
    SessionMonitor,
    decode_message,
    encode_message,
    read_frame,
    send_frame,
)

log = logging.getLogger(__name__)


class AuditError(AssertionError):
    pass


class LayoutAudit:
    """Frame inspector: every float vector on the wire must be parameter-shaped.

    REGISTER may carry only its client id, ROUND_END only scalar metrics.
    Call it as ``audit(direction, client_id, frame)``.
    """

    def __init__(self, n_params):
        self.n_params = n_params
        self.frames = 0
        self.kinds = {}

    def __call__(self, direction, client_id, frame):
        msg = decode_message(frame)
        self.frames += 1
        self.kinds[msg.kind.name] = self.kinds.get(msg.kind.name, 0) + 1
        p = msg.payload
        if msg.kind == Kind.REGISTER:
            if not isinstance(p, str):
                raise AuditError("REGISTER payload is not a client id")
        elif msg.kind == Kind.MODEL_BROADCAST:
            for v in (p.params, *p.peers):
                if v.size != self.n_params:
                    raise AuditError(f"broadcast vector of length {v.size}, layout has {self.n_params}")
        elif msg.kind == Kind.GRAD_UPLOAD:
            if p.delta.size != self.n_params:
                raise AuditError(f"upload vector of length {p.delta.size}, layout has {self.n_params}")
        # ROUND_END and SHUTDOWN carry fixed scalar fields only


class Client:
    """One participant: holds its data privately and answers broadcasts."""

    def __init__(self, client_id, data, cfg, model_cfg, seed):
        self.client_id = client_id
        self.data = data
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.seed = seed
        self.reports = []
        self.closed = False

    def register(self):
        return ProtocolMessage(Kind.REGISTER, 0, self.client_id)

    def handle(self, msg):
        """Process one incoming message; returns the reply or None."""
        if msg.kind == Kind.MODEL_BROADCAST:
            b = msg.payload
            params = ModelParams.unflatten(self.model_cfg, b.params, msg.round - 1)
            if b.layout_hash != params.layout_hash():
                raise ProtocolError(f"{self.client_id}: broadcast layout does not match local model")
            rng = client_rng(self.seed, self.client_id, msg.round)
            update = client_local_round(
                params, self.data, self.cfg, self.client_id, msg.round, rng, b.peers
            )
            return ProtocolMessage(Kind.GRAD_UPLOAD, msg.round, update)
        if msg.kind == Kind.ROUND_END:
            self.reports.append(msg.payload)
            return None
        if msg.kind == Kind.SHUTDOWN:
            self.closed = True
            return None
        raise ProtocolError(f"{self.client_id}: unexpected {msg.kind.name}")


def _no_audit(direction, client_id, frame):
    pass


class InProcessTransport:
    def __init__(self, clients, audit=None):
        self.clients = {c.client_id: c for c in clients}
        self.audit = audit or _no_audit
        self.monitors = {}

    def _to_client(self, cid, msg):
        frame = encode_message(msg)
        self.audit("down", cid, frame)
        msg = decode_message(frame)
        self.monitors[cid].observe(msg)
        reply = self.clients[cid].handle(msg)
        if reply is None:
            return None
        frame = encode_message(reply)
        self.audit("up", cid, frame)
        reply = decode_message(frame)
        self.monitors[cid].observe(reply)
        return reply

    def start(self):
        for cid in sorted(self.clients):
            frame = encode_message(self.clients[cid].register())
            self.audit("up", cid, frame)
            msg = decode_message(frame)
            self.monitors[cid] = SessionMonitor()
            self.monitors[cid].observe(msg)
            if msg.payload != cid:
                raise ProtocolError(f"client registered as {msg.payload!r}, expected {cid!r}")
        return sorted(self.clients)

    def exchange(self, rnd, broadcasts):
        updates = {}
        for cid in sorted(broadcasts):
            reply = self._to_client(cid, ProtocolMessage(Kind.MODEL_BROADCAST, rnd, broadcasts[cid]))
            updates[cid] = reply.payload
        return updates

    def notify(self, rnd, report):
        for cid in sorted(self.clients):
            self._to_client(cid, ProtocolMessage(Kind.ROUND_END, rnd, report))

    def shutdown(self, rnd):
        for cid in sorted(self.clients):
            self._to_client(cid, ProtocolMessage(Kind.SHUTDOWN, rnd, None))

    def close(self):
        pass


def bind_address():
    return os.environ.get("FJL_BIND_ADDR", "127.0.0.1")


class TcpTransport:
    """Coordinator socket server with each client in a thread of its own."""

    def __init__(self, clients, port, timeout=60.0, audit=None):
        self.clients = {c.client_id: c for c in clients}
        self.port = port
        self.timeout = timeout
        self.audit = audit or _no_audit
        self.conns = {}
        self.monitors = {}
        self.threads = []
        self.errors = {}
        self.server = None
        self._lock = threading.Lock()

    # -- client side --

    def _client_main(self, client, host, port):
        try:
            with socket.create_connection((host, port), timeout=self.timeout) as sock:
                sock.settimeout(None)
                send_frame(sock, encode_message(client.register()))
                while not client.closed:
                    msg = decode_message(read_frame(sock))
                    reply = client.handle(msg)
                    if reply is not None:
                        send_frame(sock, encode_message(reply))
        except Exception as exc:  # reported to the coordinator when it reads
            with self._lock:
                self.errors[client.client_id] = exc
            if not isinstance(exc, (FramingError, OSError)):
                log.error("client %s failed: %s", client.client_id, exc)

    # -- coordinator side --

    def start(self):
        host = bind_address()
        self.server = socket.create_server((host, self.port))
        self.server.settimeout(self.timeout)
        port = self.server.getsockname()[1]
        connect_host = "127.0.0.1" if host in ("", "0.0.0.0") else host
        for cid in sorted(self.clients):
            t = threading.Thread(
                target=self._client_main, args=(self.clients[cid], connect_host, port), daemon=True
            )
            t.start()
            self.threads.append(t)
        try:
            while len(self.conns) < len(self.clients):
                conn, _ = self.server.accept()
                conn.settimeout(self.timeout)
                frame = read_frame(conn)
                msg = decode_message(frame)
                cid = msg.payload if msg.kind == Kind.REGISTER else None
                self.audit("up", cid, frame)
                if cid not in self.clients or cid in self.conns:
                    conn.close()
                    raise ProtocolError(f"unexpected registration {msg.kind.name} {cid!r}")
                self.monitors[cid] = SessionMonitor()
                self.monitors[cid].observe(msg)
                self.conns[cid] = conn
        except socket.timeout:
            self.close()
            raise FederationError("timed out waiting for clients to register") from None
        return sorted(self.conns)

    def _send(self, cid, msg):
        frame = encode_message(msg)
        self.audit("down", cid, frame)
        self.monitors[cid].observe(msg)
        send_frame(self.conns[cid], frame)

    def _collect(self, rnd, deadline):
        updates = {}
        for cid in sorted(self.conns):
            conn = self.conns[cid]
            while cid not in updates:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise socket.timeout()
                conn.settimeout(remaining)
                try:
                    frame = read_frame(conn)
                except FramingError as exc:
                    cause = self.errors.get(cid)
                    raise FederationError(f"{cid} dropped out: {cause or exc}") from cause
                msg = decode_message(frame)
                if msg.kind != Kind.GRAD_UPLOAD:
                    raise ProtocolError(f"{cid} sent {msg.kind.name} while an upload was due")
                if msg.round < rnd:
                    continue  # stale answer to an aborted attempt
                self.audit("up", cid, frame)
                self.monitors[cid].observe(msg)
                updates[cid] = msg.payload
        return updates

    def exchange(self, rnd, broadcasts):
        for attempt in (1, 2):
            for cid in sorted(broadcasts):
                self._send(cid, ProtocolMessage(Kind.MODEL_BROADCAST, rnd, broadcasts[cid]))
            try:
                return self._collect(rnd, time.monotonic() + self.timeout)
            except socket.timeout:
                if attempt == 2:
                    raise FederationError(f"round {rnd}: client timeout after retry") from None
                log.warning("round %d: client timeout, retrying the round once", rnd)

    def notify(self, rnd, report):
        for cid in sorted(self.conns):
            self._send(cid, ProtocolMessage(Kind.ROUND_END, rnd, report))

    def shutdown(self, rnd):
        for cid in sorted(self.conns):
            try:
                self._send(cid, ProtocolMessage(Kind.SHUTDOWN, rnd, None))
            except OSError:
                pass
        for t in self.threads:
            t.join(self.timeout)

    def close(self):
        for conn in self.conns.values():
            conn.close()
        if self.server is not None:
            self.server.close()


def make_transport(cfg, clients, audit=None):
    if cfg.transport == "in_process":
        return InProcessTransport(clients, audit)
    return TcpTransport(clients, cfg.port, cfg.timeout, audit)


def run_federated_training(
    cfg, dataset, model_cfg, seed, eval_data=None, audit=None, callback=None, initial=None
):
    """Synchronous FedAvg rounds; returns ``(reports, final params)``.

    ``eval_data`` is the held-out set scored after every round (the training
    union when omitted). ``callback(report, params)`` runs after each round.
    """
    parts = partition_dataset(dataset, cfg, seed)
    ids = client_ids(cfg.n_clients)
    clients = [Client(cid, part, cfg, model_cfg, seed) for cid, part in zip(ids, parts)]
    params = initial if initial is not None else init_params(model_cfg, seed)
    if params.config != model_cfg:
        raise FederationError("initial parameters do not match the model config")
    held_out = eval_data if eval_data is not None else dataset
    transport = make_transport(cfg, clients, audit)
    reports = []
    try:
        transport.start()
        snapshots = {}
        for rnd in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            theta = params.flatten()
            broadcasts = {}
            for cid in ids:
                peers = tuple(snapshots[p] for p in ids if p != cid and p in snapshots)
                if cfg.mode != "personalized":
                    peers = ()
                broadcasts[cid] = Broadcast(params.layout_hash(), theta, peers)
            updates = transport.exchange(rnd, broadcasts)
            if sorted(updates) != ids:
                raise FederationError(f"round {rnd}: updates from {sorted(updates)}, expected {ids}")
            ups = [updates[c] for c in ids]
            delta = aggregate_updates(ups, cfg.weighted, params.layout_hash())
            new_theta = apply_global_update(theta, delta, cfg.eta)
            if not np.all(np.isfinite(new_theta)):
                raise FederationError(f"round {rnd}: non-finite global parameters")
            if cfg.mode == "personalized":
                snapshots = peer_snapshots(theta, ups, cfg.local_lr)
            params = ModelParams.unflatten(model_cfg, new_theta, rnd)
            ev = evaluate(params, held_out, cfg.pck, max_windows=cfg.eval_windows)
            wall = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
            report = RoundReport(
                rnd,
                ev["loss"],
                ev["pck"],
                ev["spearman"],
                {u.client_id: (u.local_loss, u.n_samples) for u in ups},
                wall,
            )
            transport.notify(rnd, report)
            reports.append(report)
            if callback is not None:
                callback(report, params)
        transport.shutdown(cfg.rounds)
    finally:
        transport.close()
    return reports, params
