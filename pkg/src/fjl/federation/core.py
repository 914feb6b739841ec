"""FedAvg building blocks: partitioning, the client step, aggregation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from ..model import ModelParams
from ..objectives import PckConfig, RelationalConfig
from ..records import EXERCISES
from ..training import OBJECTIVES, OPTIMIZERS, train_local
from .protocol import GradientUpdate

MODES = ("fedavg", "personalized")
PARTITIONS = ("iid", "by_patient", "by_exercise")
TRANSPORTS = ("in_process", "tcp")
DEFAULT_PORT = 7431


class FederationError(RuntimeError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    """Round structure and local training settings.

    ``eta`` is the global step of ``theta <- theta - eta * delta_agg``. Since
    clients report ``delta = (theta_broadcast - theta_local) / local_lr``,
    ``eta == local_lr`` reproduces the averaged local step exactly.
    """

    n_clients: int = 4
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 32
    eta: float = 1e-3
    local_lr: float = 1e-3
    lambda_: float = 0.1
    sigma: float = 1.0
    mode: str = "fedavg"
    partition: str = "iid"
    transport: str = "in_process"
    port: int = DEFAULT_PORT
    objective: str = "mse"
    optimizer: str = "adam"
    samples_per_epoch: int = 1000  # windows drawn per local epoch; 0 = all of them
    eval_windows: int = 0  # 0 = the whole held-out set
    timeout: float = 60.0
    weighted: bool = False
    record_wall_time: bool = True
    relational: RelationalConfig = field(default_factory=RelationalConfig)
    pck: PckConfig = field(default_factory=PckConfig)

    def __post_init__(self):
        for name in ("n_clients", "rounds", "local_epochs", "batch_size"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eta <= 0 or self.local_lr <= 0:
            raise ValueError("eta and local_lr must be positive")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.samples_per_epoch < 0 or self.eval_windows < 0:
            raise ValueError("sample caps must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not 0 <= self.port <= 65535:
            raise ValueError("port must be in 0..65535")
        for name, allowed in (
            ("mode", MODES),
            ("partition", PARTITIONS),
            ("transport", TRANSPORTS),
            ("objective", OBJECTIVES),
            ("optimizer", OPTIMIZERS),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes):
        return replace(self, **changes)


def client_ids(n):
    return [f"client{i:02d}" for i in range(n)]


def partition_dataset(dataset, cfg, seed):
    """Split ``dataset`` into ``cfg.n_clients`` disjoint subsets.

    ``iid`` shuffles windows, ``by_patient`` deals whole patients,
    ``by_exercise`` deals whole exercise labels. Sizes differ by at most one
    unit.
    """
    n = cfg.n_clients
    if len(dataset) == 0:
        raise PartitionError("cannot partition an empty dataset")
    rng = np.random.default_rng([seed, 0xFED])
    if cfg.partition == "iid":
        if n > len(dataset):
            raise PartitionError(f"{n} clients but only {len(dataset)} windows")
        groups = np.array_split(rng.permutation(len(dataset)), n)
        return [dataset.subset(np.sort(g)) for g in groups]
    if cfg.partition == "by_patient":
        labels = dataset.patient_ids()
        units = sorted(set(labels))
        units = [units[i] for i in rng.permutation(len(units))]
    else:
        labels = dataset.exercises()
        units = [e for e in EXERCISES if np.any(labels == e)]
    if n > len(units):
        raise PartitionError(f"{n} clients but only {len(units)} {cfg.partition[3:]} units")
    parts = []
    for group in np.array_split(np.arange(len(units)), n):
        chosen = {units[i] for i in group}
        parts.append(dataset.subset(np.array([lab in chosen for lab in labels], dtype=bool)))
    return parts


def client_rng(seed, client_id, rnd):
    return np.random.default_rng([seed, zlib.crc32(client_id.encode("utf-8")), rnd])


def client_local_round(params, local_data, cfg, client_id, rnd, rng, peers=()):
    """Local training from the broadcast ``params``; returns the update.

    ``delta = (theta_broadcast - theta_local_final) / local_lr``. In
    personalized mode ``peers`` (last round's snapshots of the other
    clients) enter the divergence penalty.
    """
    if len(local_data) == 0:
        raise ValueError(f"{client_id}: no local data")
    lam = cfg.lambda_ if cfg.mode == "personalized" else 0.0
    final, loss = train_local(
        params,
        local_data,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.local_lr,
        rng,
        objective=cfg.objective,
        optimizer=cfg.optimizer,
        rel_cfg=cfg.relational,
        pck_cfg=cfg.pck,
        samples_per_epoch=cfg.samples_per_epoch,
        peers=peers if lam > 0 else (),
        lam=lam,
        sigma=cfg.sigma,
    )
    delta = (params.flatten() - final.flatten()) / cfg.local_lr
    return GradientUpdate(client_id, rnd, delta, len(local_data), loss, params.layout_hash())


def aggregate_updates(updates, weighted=False, expected_hash=None):
    """Mean of the update deltas, summed in client-id order."""
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise FederationError("no updates to aggregate")
    rounds = {u.round for u in updates}
    hashes = {u.layout_hash for u in updates}
    if len(rounds) > 1:
        raise FederationError(f"updates from mixed rounds {sorted(rounds)}")
    if len(hashes) > 1 or (expected_hash is not None and hashes != {expected_hash}):
        raise FederationError("update layout hash does not match the model layout")
    sizes = {u.delta.size for u in updates}
    if len(sizes) > 1:
        raise FederationError(f"update lengths differ: {sorted(sizes)}")
    if len({u.client_id for u in updates}) != len(updates):
        raise FederationError("duplicate client ids among updates")
    total = np.zeros(updates[0].delta.size)
    if weighted:
        n = 0
        for u in updates:
            total += u.n_samples * u.delta
            n += u.n_samples
        return total / n
    for u in updates:
        total += u.delta
    return total / len(updates)


def apply_global_update(theta, delta_agg, eta):
    theta = np.asarray(theta, dtype=np.float64)
    delta_agg = np.asarray(delta_agg, dtype=np.float64)
    if theta.shape != delta_agg.shape:
        raise FederationError(f"length mismatch: theta {theta.shape} vs delta {delta_agg.shape}")
    return theta - eta * delta_agg


def peer_snapshots(theta_prev, updates, lr):
    """Reconstruct each client's last local parameters from its update."""
    return {u.client_id: theta_prev - lr * u.delta for u in updates}


def params_after(params, theta, version):
    return ModelParams.unflatten(params.config, theta, version)
