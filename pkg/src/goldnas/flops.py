"""FLOPs accounting: exact per-operator closed forms, exact discrete totals,
and the differentiable expected/uniform regularizers.

Costs are multiply-accumulate counts.  For a gate operating at output
resolution H x W with C input = output channels:

  skip-connect, stride 1 -> 0
  skip-connect, stride 2 -> C^2 * H * W      (factorized reduce, two 1x1 convs)
  sep-conv-3x3           -> 2 * (C^2 * H * W + 9 * C * H * W)
                            (two cascaded depthwise 3x3 + pointwise 1x1 stacks)

The non-searchable layers (stem, the per-cell 1x1 input preprocessors and
the classifier) have static shapes during search, so their cost depends on
the shape config only.  The preprocessor cost is folded into the "stem"
bucket of the breakdown; the additive invariant
``total = stem + classifier + sum(active gate costs)`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .autodiff import Tensor, add_n, log1p, scalar_scale, sigmoid, div
from .space import (
    ArchitectureEncoding,
    ArchitectureError,
    GateId,
    NetworkShapeConfig,
    OpKind,
    cell_edges,
    enumerate_gates,
    validate,
)


@dataclass(frozen=True)
class OpCostContext:
    op: OpKind
    channels: int
    out_height: int
    out_width: int
    stride: int

    def __post_init__(self):
        if self.channels < 1 or self.out_height < 1 or self.out_width < 1:
            raise ValueError("channels and output resolution must be positive")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


def op_flops(ctx: OpCostContext) -> int:
    c, hw = ctx.channels, ctx.out_height * ctx.out_width
    if ctx.op is OpKind.SKIP_CONNECT:
        return 0 if ctx.stride == 1 else c * c * hw
    if ctx.op is OpKind.SEP_CONV_3X3:
        return 2 * (c * c * hw + 9 * c * hw)
    raise ValueError(f"unknown op {ctx.op}")


# -- per-cell geometry -----------------------------------------------------


@dataclass(frozen=True)
class CellGeometry:
    channels: int       # C of every node in this cell
    in_height: int      # resolution of the (preprocessed) input nodes
    in_width: int
    out_height: int     # resolution of the inner nodes / cell output
    out_width: int
    in0_channels: int   # raw channel count of input s0 before preprocessing
    in1_channels: int
    in0_reduce: bool    # s0 arrives at twice the input resolution


def cell_geometries(shape: NetworkShapeConfig) -> List[CellGeometry]:
    inner = shape.nodes_per_cell - 2
    geoms: List[CellGeometry] = []
    # (channels, height, width) of the raw output feeding the next cells;
    # index -1 / -2 refer to the stem
    hist: List[Tuple[int, int, int]] = [
        (shape.initial_channels, shape.input_height, shape.input_width)
    ] * 2
    c, h, w = shape.initial_channels, shape.input_height, shape.input_width
    for cell in range(shape.num_cells):
        reduction = cell in shape.reduction_cells
        if reduction:
            c *= 2
        in0_c, in0_h, _ = hist[-2]
        in1_c, in1_h, in1_w = hist[-1]
        h_in, w_in = in1_h, in1_w
        h_out = (h_in + 1) // 2 if reduction else h_in
        w_out = (w_in + 1) // 2 if reduction else w_in
        geoms.append(
            CellGeometry(
                channels=c,
                in_height=h_in,
                in_width=w_in,
                out_height=h_out,
                out_width=w_out,
                in0_channels=in0_c,
                in1_channels=in1_c,
                in0_reduce=in0_h != in1_h,
            )
        )
        hist.append((inner * c, h_out, w_out))
    return geoms


def gate_stride(shape: NetworkShapeConfig, gate: GateId) -> int:
    return 2 if gate.cell in shape.reduction_cells and gate.i < 2 else 1


def gate_cost(shape: NetworkShapeConfig, gate: GateId) -> int:
    geom = cell_geometries(shape)[gate.cell]
    return op_flops(
        OpCostContext(
            op=gate.op,
            channels=geom.channels,
            out_height=geom.out_height,
            out_width=geom.out_width,
            stride=gate_stride(shape, gate),
        )
    )


def fixed_flops(shape: NetworkShapeConfig, num_classes: int = 0) -> Tuple[int, int]:
    """(stem + preprocessor cost, classifier cost) for the static layers."""
    stem = 3 * shape.initial_channels * 9 * shape.input_height * shape.input_width
    geoms = cell_geometries(shape)
    for g in geoms:
        # each input preprocessor is a 1x1 conv to C channels producing the
        # cell input resolution; a stride-2 factorized reduce (used when s0
        # arrives at twice the resolution) costs the same number of MACs
        pre_hw = g.in_height * g.in_width
        stem += g.in0_channels * g.channels * pre_hw
        stem += g.in1_channels * g.channels * pre_hw
    classifier = (shape.nodes_per_cell - 2) * geoms[-1].channels * num_classes
    return stem, classifier


@dataclass
class FlopsBreakdown:
    per_gate: Dict[GateId, int]
    stem: int
    classifier: int

    def total(self, active: Sequence[GateId]) -> int:
        return self.stem + self.classifier + sum(self.per_gate[g] for g in active)


def breakdown(shape: NetworkShapeConfig, num_classes: int = 0) -> FlopsBreakdown:
    stem, classifier = fixed_flops(shape, num_classes)
    return FlopsBreakdown(
        per_gate={g: gate_cost(shape, g) for g in enumerate_gates(shape)},
        stem=stem,
        classifier=classifier,
    )


def discrete_flops(arch: ArchitectureEncoding, num_classes: int = 0) -> int:
    """Exact cost of the active set; dead nodes contribute zero and the
    static shapes of search time are kept (nothing shrinks)."""
    validate(arch)  # raises on out-of-universe gates
    stem, classifier = fixed_flops(arch.shape, num_classes)
    return stem + classifier + sum(gate_cost(arch.shape, g) for g in arch.active)


def minimal_discrete_flops(shape: NetworkShapeConfig, num_classes: int = 0) -> int:
    """Cheapest valid architecture: each inner node keeps its cheapest gate."""
    stem, classifier = fixed_flops(shape, num_classes)
    total = stem + classifier
    for cell in range(shape.num_cells):
        for node in range(2, shape.nodes_per_cell):
            total += min(
                gate_cost(shape, GateId.make(cell, i, node, op))
                for i in range(node)
                if (i, node) != (0, 1)
                for op in (OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3)
            )
    return total


# -- differentiable regularizers -------------------------------------------


def _edge_groups(gates: Sequence[GateId]) -> List[List[GateId]]:
    groups: Dict[Tuple[int, int, int], List[GateId]] = {}
    for g in sorted(gates):
        groups.setdefault((g.cell, g.i, g.j), []).append(g)
    return [groups[k] for k in sorted(groups)]


def _surrogate(
    alpha: Dict[GateId, Tensor],
    active: Sequence[GateId],
    cost_of,
    mean_scope: str,
) -> Tensor:
    active = sorted(active)
    if not active:
        return Tensor(0.0)
    if mean_scope not in ("edge", "global"):
        raise ValueError(f"mean_scope must be 'edge' or 'global', got {mean_scope!r}")
    sig = {g: sigmoid(alpha[g]) for g in active}
    global_mean = None
    if mean_scope == "global":
        global_mean = scalar_scale(add_n([sig[g] for g in active]), 1.0 / len(active))
    terms = []
    for group in _edge_groups(active):
        if mean_scope == "edge":
            mean = scalar_scale(add_n([sig[g] for g in group]), 1.0 / len(group))
        else:
            mean = global_mean
        for g in group:
            cost = cost_of(g)
            if cost == 0:
                continue
            terms.append(scalar_scale(log1p(div(sig[g], mean)), float(cost)))
    if not terms:
        return Tensor(0.0)
    return add_n(terms)


def expected_flops(
    alpha: Dict[GateId, Tensor],
    active: Sequence[GateId],
    costs: FlopsBreakdown,
    mean_scope: str = "edge",
) -> Tensor:
    """sum over active gates of ln(1 + sigma/mean_sigma) * cost(gate).

    The mean sigma is taken over the active gates of the same edge (or
    globally with ``mean_scope='global'``) and is differentiated through.
    """
    return _surrogate(alpha, active, lambda g: costs.per_gate[g], mean_scope)


def uniform_flops(
    alpha: Dict[GateId, Tensor],
    active: Sequence[GateId],
    costs: FlopsBreakdown,
    mean_scope: str = "edge",
) -> Tensor:
    """Same surrogate with every cost replaced by the mean active gate cost,
    penalizing operator count rather than individual expense."""
    active = sorted(active)
    if not active:
        return Tensor(0.0)
    kappa = sum(costs.per_gate[g] for g in active) / len(active)
    return _surrogate(alpha, active, lambda g: kappa, mean_scope)
