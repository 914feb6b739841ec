"""Coordinator/client federation: protocol, FedAvg steps and the round loop."""

from .core import (
    FederationConfig,
    FederationError,
    PartitionError,
    aggregate_updates,
    apply_global_update,
    client_ids,
    client_local_round,
    client_rng,
    partition_dataset,
)
from .protocol import (
    BadMagicError,
    Broadcast,
    FramingError,
    GradientUpdate,
    Kind,
    ProtocolError,
    ProtocolMessage,
    RoundReport,
    VersionError,
    decode_message,
    encode_message,
)
from .runner import AuditError, LayoutAudit, run_federated_training

__all__ = [
    "AuditError",
    "BadMagicError",
    "Broadcast",
    "FederationConfig",
    "FederationError",
    "FramingError",
    "GradientUpdate",
    "Kind",
    "LayoutAudit",
    "PartitionError",
    "ProtocolError",
    "ProtocolMessage",
    "RoundReport",
    "VersionError",
    "aggregate_updates",
    "apply_global_update",
    "client_ids",
    "client_local_round",
    "client_rng",
    "decode_message",
    "encode_message",
    "partition_dataset",
    "run_federated_training",
]
