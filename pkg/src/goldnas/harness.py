"""Experiment plumbing: the per-epoch trace log and its CSV round-trip,
Pareto manifest emission, and re-training of discrete architectures.

The re-training path builds a plain network from an architecture document:
dead nodes are omitted with channel bookkeeping and there is no gate
machinery anywhere (no architecture parameters, no sigmoid scaling).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import flops as fm
from .autodiff import Tensor
from .data import DatasetSplit
from .space import (
    ArchitectureEncoding,
    ArchitectureError,
    GateId,
    NetworkShapeConfig,
    OpKind,
    serialize,
    validate,
)
from .supernet import (
    BatchNorm,
    Conv,
    ConvBN,
    FactorizedReduce,
    Identity,
    SepConv,
    _uniform_fan_in,
)

# -- trace log -------------------------------------------------------------

TRACE_COLUMNS = (
    "epoch",
    "lambda",
    "delta_lambda",
    "n_pruned",
    "active_gates",
    "expected_flops",
    "discrete_flops",
    "train_loss",
    "train_acc",
    "patience_t",
)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    lam: float
    delta_lambda: float
    n_pruned: int
    active_gates: int
    expected_flops: float
    discrete_flops: int
    train_loss: float
    train_acc: float
    patience_t: int


def emit_trace(rows: Sequence[TraceRow]) -> str:
    """CSV text with the fixed column schema; floats use repr so the
    round-trip is exact."""
    lines = [",".join(TRACE_COLUMNS)]
    for r in rows:
        lines.append(
            f"{r.epoch},{r.lam!r},{r.delta_lambda!r},{r.n_pruned},{r.active_gates},"
            f"{r.expected_flops!r},{r.discrete_flops},{r.train_loss!r},{r.train_acc!r},"
            f"{r.patience_t}"
        )
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> List[TraceRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ",".join(TRACE_COLUMNS):
        raise ValueError(f"bad trace header: {lines[0] if lines else '<empty>'!r}")
    rows = []
    for ln in lines[1:]:
        f = ln.split(",")
        if len(f) != len(TRACE_COLUMNS):
            raise ValueError(f"bad trace row: {ln!r}")
        rows.append(
            TraceRow(
                epoch=int(f[0]),
                lam=float(f[1]),
                delta_lambda=float(f[2]),
                n_pruned=int(f[3]),
                active_gates=int(f[4]),
                expected_flops=float(f[5]),
                discrete_flops=int(f[6]),
                train_loss=float(f[7]),
                train_acc=float(f[8]),
                patience_t=int(f[9]),
            )
        )
    return rows


def write_trace(rows: Sequence[TraceRow], path: str):
    with open(path, "w") as fh:
        fh.write(emit_trace(rows))


def read_trace(path: str) -> List[TraceRow]:
    with open(path) as fh:
        return parse_trace(fh.read())


# -- pareto manifest -------------------------------------------------------


def write_pareto_set(pareto, out_dir: str) -> str:
    """Write one architecture document per record plus a manifest listing
    file, FLOPs, epoch and snapshot metrics.  Returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for idx, rec in enumerate(pareto):
        fname = f"pareto_{idx:03d}_{rec.flops}.json"
        with open(os.path.join(out_dir, fname), "w") as fh:
            fh.write(serialize(rec.arch))
        records.append(
            {
                "file": fname,
                "flops": rec.flops,
                "epoch": rec.epoch,
                "train_loss": rec.train_loss,
                "train_acc": rec.train_acc,
            }
        )
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump({"records": records}, fh, indent=2)
        fh.write("\n")
    return manifest_path


def read_pareto_manifest(path: str) -> List[dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "records" not in doc:
        raise ValueError(f"{path}: not a pareto manifest")
    return doc["records"]


# -- discrete network ------------------------------------------------------


def resolve_live_structure(arch: ArchitectureEncoding):
    """Per cell: (sorted live inner nodes, kept gates).  A node is live if it
    keeps at least one gate from a live source; gates from dead sources are
    dropped."""
    validate(arch)  # rejects out-of-universe gates
    shape = arch.shape
    live_nodes: List[List[int]] = []
    kept_gates: List[List[GateId]] = []
    for cell in range(shape.num_cells):
        live = {0, 1}
        kept: List[GateId] = []
        gates = sorted(g for g in arch.active if g.cell == cell)
        for j in range(2, shape.nodes_per_cell):
            incoming = [g for g in gates if g.j == j and g.i in live]
            if incoming:
                live.add(j)
                kept.extend(incoming)
        inner = sorted(n for n in live if n >= 2)
        if not inner:
            raise ArchitectureError(
                f"cell {cell} has no live inner nodes; cannot build a discrete network"
            )
        live_nodes.append(inner)
        kept_gates.append(sorted(kept))
    return live_nodes, kept_gates


class DiscreteCell:
    def __init__(self, rng, index, shape, geom, in0_c, in1_c, live, gates):
        self.index = index
        self.geom = geom
        self.live = live
        self.gates = gates
        if geom.in0_reduce:
            self.pre0 = FactorizedReduce(rng, in0_c, geom.channels)
        else:
            self.pre0 = ConvBN(rng, in0_c, geom.channels)
        self.pre1 = ConvBN(rng, in1_c, geom.channels)
        self.ops: Dict[GateId, object] = {}
        self.parts = [("pre0", self.pre0), ("pre1", self.pre1)]
        for g in gates:
            stride = fm.gate_stride(shape, g)
            if g.op is OpKind.SEP_CONV_3X3:
                layer = SepConv(rng, geom.channels, stride)
            elif stride == 2:
                layer = FactorizedReduce(rng, geom.channels, geom.channels)
            else:
                layer = Identity()
            self.ops[g] = layer
            self.parts.append((f"op.{g.i}.{g.j}.{g.op.value}", layer))

    def named_params(self, prefix):
        for name, part in self.parts:
            yield from part.named_params(f"{prefix}.{name}")

    def named_buffers(self, prefix):
        for name, part in self.parts:
            yield from part.named_buffers(f"{prefix}.{name}")

    def forward(self, s0, s1, training):
        nodes: Dict[int, Tensor] = {0: self.pre0(s0, training), 1: self.pre1(s1, training)}
        for j in self.live:
            terms = [
                self.ops[g](nodes[g.i], training) for g in self.gates if g.j == j
            ]
            nodes[j] = ad.add_n(terms)
        return ad.channel_concat([nodes[j] for j in self.live])


class DiscreteNetwork:
    """A gate-free network built from a discrete architecture encoding."""

    def __init__(self, arch: ArchitectureEncoding, num_classes: int, seed: int):
        self.encoding = arch
        self.num_classes = num_classes
        shape = arch.shape
        self.shape = shape
        rng = np.random.default_rng(seed)
        geoms = fm.cell_geometries(shape)
        live_nodes, kept_gates = resolve_live_structure(arch)
        c0 = shape.initial_channels
        self.stem_conv = Conv(rng, 3, c0, 3, padding=1)
        self.stem_bn = BatchNorm(c0)
        # raw output channels per producer: stem twice, then each cell
        out_channels = [c0, c0]
        self.cells: List[DiscreteCell] = []
        for k in range(shape.num_cells):
            self.cells.append(
                DiscreteCell(
                    rng,
                    k,
                    shape,
                    geoms[k],
                    out_channels[-2],
                    out_channels[-1],
                    live_nodes[k],
                    kept_gates[k],
                )
            )
            out_channels.append(len(live_nodes[k]) * geoms[k].channels)
        c_final = out_channels[-1]
        self.fc_w = Tensor(
            _uniform_fan_in(rng, (c_final, num_classes), c_final), requires_grad=True
        )
        self.fc_b = Tensor(np.zeros(num_classes), requires_grad=True)
        params: List[Tuple[str, Tensor]] = []
        buffers: List[Tuple[str, np.ndarray]] = []
        params.extend(self.stem_conv.named_params("stem.conv"))
        params.extend(self.stem_bn.named_params("stem.bn"))
        buffers.extend(self.stem_bn.named_buffers("stem.bn"))
        for k, cell in enumerate(self.cells):
            params.extend(cell.named_params(f"cell{k}"))
            buffers.extend(cell.named_buffers(f"cell{k}"))
        params.append(("fc.w", self.fc_w))
        params.append(("fc.b", self.fc_b))
        self.params = params
        self.buffers = buffers
        self.velocity: Dict[str, np.ndarray] = {}

    def forward(self, x, training: bool) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        stem = self.stem_bn(self.stem_conv(x), training)
        s0 = s1 = stem
        for cell in self.cells:
            s0, s1 = s1, cell.forward(s0, s1, training)
        return ad.linear(ad.global_average_pool(s1), self.fc_w, self.fc_b)

    def evaluate(self, data: DatasetSplit, batch_size: int = 256):
        losses, correct = [], 0
        for start in range(0, len(data), batch_size):
            x, y = data.batch(range(start, min(start + batch_size, len(data))))
            logits = self.forward(x, training=False)
            losses.append(float(ad.softmax_cross_entropy(logits, y).data) * len(y))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        n = len(data)
        return (sum(losses) / n if n else 0.0), (correct / n if n else 0.0)


@dataclass
class RetrainSchedule:
    epochs: int = 30
    batch_size: int = 96
    learning_rate: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    seed: int = 0


def retrain(
    arch: ArchitectureEncoding,
    data: DatasetSplit,
    schedule: RetrainSchedule,
    eval_data: Optional[DatasetSplit] = None,
):
    """Momentum SGD with a cosine-annealed learning rate on the discrete
    network.  Returns (model, metrics)."""
    seeds = np.random.SeedSequence(schedule.seed).spawn(2)
    model = DiscreteNetwork(arch, data.num_classes, int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    metrics = {"train_loss": [], "train_acc": []}
    for epoch in range(schedule.epochs):
        lr = 0.5 * schedule.learning_rate * (
            1.0 + math.cos(math.pi * epoch / max(1, schedule.epochs))
        )
        order = rng.permutation(len(data))
        losses, accs = [], []
        for start in range(0, len(order), schedule.batch_size):
            x, y = data.batch(order[start : start + schedule.batch_size])
            for _, p in model.params:
                p.grad = None
            logits = model.forward(x, training=True)
            loss = ad.softmax_cross_entropy(logits, y)
            loss.backward()
            for name, p in model.params:
                g = p.grad_array() + schedule.weight_decay * p.data
                v = model.velocity.get(name)
                v = g if v is None else schedule.momentum * v + g
                model.velocity[name] = v
                p.data = p.data - lr * v
            losses.append(float(loss.data))
            accs.append(float(np.mean(np.argmax(logits.data, axis=1) == y)))
        metrics["train_loss"].append(float(np.mean(losses)))
        metrics["train_acc"].append(float(np.mean(accs)))
    eval_loss, eval_acc = (model.evaluate(eval_data) if eval_data is not None
                           else model.evaluate(data))
    metrics["eval_loss"] = eval_loss
    metrics["eval_acc"] = eval_acc
    return model, metrics
