"""Gradual one-level differentiable architecture search over a sigmoid-gated
cell super-network, with exact FLOPs accounting and a pruning scheduler that
emits a sequence of architectures in a single run."""

__version__ = "0.1.0"

from .space import (
    ArchitectureEncoding,
    GateId,
    NetworkShapeConfig,
    OpKind,
    count_space,
    deserialize,
    enumerate_gates,
    export_dot,
    serialize,
    validate,
)

__all__ = [
    "ArchitectureEncoding",
    "GateId",
    "NetworkShapeConfig",
    "OpKind",
    "count_space",
    "deserialize",
    "enumerate_gates",
    "export_dot",
    "serialize",
    "validate",
]
