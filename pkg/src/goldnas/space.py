"""Cell-based search space: gate universe, exact counting, architecture
documents, DOT export and budget-constrained random sampling.

A gate is one (cell, edge, operator) candidate.  Edges run between node
``i`` and node ``j`` of the same cell for every ``i < j`` except the pair
of input nodes ``(0, 1)``.  Each inner node must keep at least one active
incoming gate for the architecture to be valid; nodes that lose all their
gates are "dead" and are zero-filled during search.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

FORMAT_VERSION = 1


class ArchitectureError(ValueError):
    """Malformed or out-of-universe architecture data."""


class OpKind(enum.Enum):
    SKIP_CONNECT = "skip_connect"
    SEP_CONV_3X3 = "sep_conv_3x3"


# canonical operator order used everywhere ties must break deterministically
OP_ORDER: Tuple[OpKind, ...] = (OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3)


@dataclass(frozen=True)
class NetworkShapeConfig:
    num_cells: int
    nodes_per_cell: int
    initial_channels: int
    input_height: int
    input_width: int
    reduction_cells: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_cells < 1:
            raise ValueError("num_cells must be positive")
        if self.nodes_per_cell < 3:
            raise ValueError("nodes_per_cell must be >= 3 (two inputs + one inner node)")
        if self.initial_channels < 1:
            raise ValueError("initial_channels must be positive")
        if self.input_height < 1 or self.input_width < 1:
            raise ValueError("input resolution must be positive")
        for r in self.reduction_cells:
            if not 0 <= r < self.num_cells:
                raise ValueError(f"reduction cell index {r} out of range")
        object.__setattr__(self, "reduction_cells", tuple(sorted(self.reduction_cells)))

    @staticmethod
    def default_reductions(num_cells: int) -> Tuple[int, ...]:
        """Reduction cells at depth 1/3 and 2/3 (deduplicated for tiny L)."""
        return tuple(sorted({num_cells // 3, (2 * num_cells) // 3} & set(range(num_cells))))


@dataclass(frozen=True, order=True)
class GateId:
    cell: int
    i: int
    j: int
    op_index: int  # index into OP_ORDER; kept integral so GateId sorts canonically

    @property
    def op(self) -> OpKind:
        return OP_ORDER[self.op_index]

    @staticmethod
    def make(cell: int, i: int, j: int, op: OpKind) -> "GateId":
        return GateId(cell, i, j, OP_ORDER.index(op))


def cell_edges(nodes_per_cell: int) -> List[Tuple[int, int]]:
    """All legal (i, j) pairs of one cell, lexicographically ordered."""
    return [
        (i, j)
        for i in range(nodes_per_cell)
        for j in range(i + 1, nodes_per_cell)
        if (i, j) != (0, 1)
    ]


def enumerate_gates(shape: NetworkShapeConfig) -> List[GateId]:
    """Canonical gate ordering: cell-major, then edge lexicographic, then op."""
    edges = cell_edges(shape.nodes_per_cell)
    return [
        GateId.make(cell, i, j, op)
        for cell in range(shape.num_cells)
        for (i, j) in edges
        for op in OP_ORDER
    ]


@dataclass(frozen=True)
class SpaceCardinality:
    per_cell: int
    exact: int

    def approx(self) -> str:
        """Scientific notation of the exact count, e.g. '6.9e167'."""
        digits = len(str(self.exact)) - 1
        mantissa = self.exact / 10 ** digits
        return f"{mantissa:.1f}e{digits}"


def count_space(shape: NetworkShapeConfig) -> SpaceCardinality:
    """Exact architecture count: each inner node n (counting both inputs as
    precursors) contributes 2^(2n) - 1 on/off patterns, all cells independent."""
    per_cell = 1
    for n in range(2, shape.nodes_per_cell):
        per_cell *= (1 << (2 * n)) - 1
    return SpaceCardinality(per_cell=per_cell, exact=per_cell ** shape.num_cells)


@dataclass(frozen=True)
class ArchitectureEncoding:
    shape: NetworkShapeConfig
    active: frozenset  # frozenset[GateId]
    dead_nodes: Tuple[Tuple[int, int], ...] = ()  # (cell, node) pairs

    def sorted_gates(self) -> List[GateId]:
        return sorted(self.active)


def full_architecture(shape: NetworkShapeConfig) -> ArchitectureEncoding:
    return ArchitectureEncoding(shape=shape, active=frozenset(enumerate_gates(shape)))


@dataclass
class ValidityReport:
    dead_nodes: List[Tuple[int, int]]

    @property
    def valid(self) -> bool:
        return not self.dead_nodes


def validate(arch: ArchitectureEncoding) -> ValidityReport:
    """Report every inner node with zero active incoming gates."""
    universe = set(enumerate_gates(arch.shape))
    for g in arch.active:
        if g not in universe:
            raise ArchitectureError(f"gate {g} outside the universe for this shape")
    incoming: Dict[Tuple[int, int], int] = {}
    for g in arch.active:
        incoming[(g.cell, g.j)] = incoming.get((g.cell, g.j), 0) + 1
    dead = [
        (cell, node)
        for cell in range(arch.shape.num_cells)
        for node in range(2, arch.shape.nodes_per_cell)
        if incoming.get((cell, node), 0) == 0
    ]
    return ValidityReport(dead_nodes=dead)


# -- document serialization ------------------------------------------------


def serialize(arch: ArchitectureEncoding) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "shape": {
            "num_cells": arch.shape.num_cells,
            "nodes_per_cell": arch.shape.nodes_per_cell,
            "initial_channels": arch.shape.initial_channels,
            "input_height": arch.shape.input_height,
            "input_width": arch.shape.input_width,
            "reduction_cells": list(arch.shape.reduction_cells),
        },
        "active_gates": [
            {"cell": g.cell, "from": g.i, "to": g.j, "op": g.op.value}
            for g in arch.sorted_gates()
        ],
    }
    if arch.dead_nodes:
        doc["dead_nodes"] = [
            {"cell": c, "node": n} for c, n in sorted(arch.dead_nodes)
        ]
    return json.dumps(doc, indent=2) + "\n"


def deserialize(text: str) -> ArchitectureEncoding:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArchitectureError(
            f"architecture document is not valid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(doc, dict):
        raise ArchitectureError("architecture document must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchitectureError(f"unsupported format_version {version!r}")
    try:
        s = doc["shape"]
        shape = NetworkShapeConfig(
            num_cells=int(s["num_cells"]),
            nodes_per_cell=int(s["nodes_per_cell"]),
            initial_channels=int(s["initial_channels"]),
            input_height=int(s["input_height"]),
            input_width=int(s["input_width"]),
            reduction_cells=tuple(int(r) for r in s.get("reduction_cells", [])),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ArchitectureError(f"bad shape section: {e}") from e
    op_by_name = {op.value: op for op in OP_ORDER}
    gates = set()
    for idx, entry in enumerate(doc.get("active_gates", [])):
        try:
            cell, i, j = int(entry["cell"]), int(entry["from"]), int(entry["to"])
            op_name = entry["op"]
        except (KeyError, TypeError, ValueError) as e:
            raise ArchitectureError(f"bad gate entry #{idx}: {e}") from e
        if op_name not in op_by_name:
            raise ArchitectureError(f"gate entry #{idx}: unknown op {op_name!r}")
        if (i, j) == (0, 1):
            raise ArchitectureError(f"gate entry #{idx}: edge (0, 1) is excluded")
        if not (0 <= i < j < shape.nodes_per_cell) or not (0 <= cell < shape.num_cells):
            raise ArchitectureError(
                f"gate entry #{idx}: ({cell}, {i}, {j}) outside the gate universe"
            )
        gates.add(GateId.make(cell, i, j, op_by_name[op_name]))
    dead = tuple(
        (int(d["cell"]), int(d["node"])) for d in doc.get("dead_nodes", [])
    )
    return ArchitectureEncoding(shape=shape, active=frozenset(gates), dead_nodes=dead)


# -- DOT export ------------------------------------------------------------

_EDGE_STYLE = {
    OpKind.SKIP_CONNECT: 'color=red, penwidth=1',
    OpKind.SEP_CONV_3X3: 'color=blue, penwidth=3',
}


def export_dot(arch: ArchitectureEncoding) -> str:
    """One digraph per cell; concat arcs from live inner nodes are dashed."""
    if not arch.active:
        raise ArchitectureError("cannot export an architecture with no active gates")
    report = validate(arch)
    dead = set(report.dead_nodes)
    lines: List[str] = []
    for cell in range(arch.shape.num_cells):
        kind = "reduction" if cell in arch.shape.reduction_cells else "normal"
        lines.append(f'digraph cell_{cell} {{')
        lines.append(f'  label="cell {cell} ({kind})";')
        lines.append('  rankdir=LR;')
        lines.append('  in0 [shape=box]; in1 [shape=box]; out [shape=box];')
        for node in range(2, arch.shape.nodes_per_cell):
            style = ', style=dotted' if (cell, node) in dead else ''
            lines.append(f'  n{node} [shape=ellipse{style}];')
        for g in arch.sorted_gates():
            if g.cell != cell:
                continue
            src = f"in{g.i}" if g.i < 2 else f"n{g.i}"
            lines.append(
                f'  {src} -> n{g.j} [label="{g.op.value}", {_EDGE_STYLE[g.op]}];'
            )
        for node in range(2, arch.shape.nodes_per_cell):
            if (cell, node) not in dead:
                lines.append(f'  n{node} -> out [color=black, style=dashed];')
        lines.append('}')
    return "\n".join(lines) + "\n"


# -- budget-constrained random sampling ------------------------------------


def random_sample_under_flops(
    shape: NetworkShapeConfig,
    flops_budget: int,
    rng_seed: int,
    max_attempts: int = 1000,
    num_classes: int = 0,
) -> ArchitectureEncoding:
    """Randomly prune the full architecture until it fits the budget.

    Attempts that produce a dead node before reaching the budget are
    discarded and resampled from scratch.
    """
    from . import flops as flops_model  # local import: flops depends on this module

    rng = np.random.default_rng(rng_seed)
    universe = enumerate_gates(shape)
    full_flops = flops_model.discrete_flops(full_architecture(shape), num_classes)
    if flops_budget >= full_flops:
        return full_architecture(shape)
    for _ in range(max_attempts):
        active = list(universe)
        incoming = {
            (c, n): 0
            for c in range(shape.num_cells)
            for n in range(2, shape.nodes_per_cell)
        }
        for g in active:
            incoming[(g.cell, g.j)] += 1
        flops = full_flops
        ok = True
        while flops > flops_budget:
            if not active:
                ok = False
                break
            idx = int(rng.integers(len(active)))
            g = active.pop(idx)
            incoming[(g.cell, g.j)] -= 1
            if incoming[(g.cell, g.j)] == 0:
                ok = False
                break
            flops -= flops_model.gate_cost(shape, g)
        if ok:
            return ArchitectureEncoding(shape=shape, active=frozenset(active))
    raise ArchitectureError(
        f"no valid architecture within budget {flops_budget} after {max_attempts} attempts"
    )
