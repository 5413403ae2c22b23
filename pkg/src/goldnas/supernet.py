"""Sigmoid-gated cell super-network with simultaneous (one-level) updates,
an optional first-order alternating baseline, and hard gate removal.

Every (cell, edge, operator) gate owns an architecture scalar ``alpha``;
its forward contribution is scaled by ``sigmoid(alpha)``.  Deactivated
gates are skipped entirely: they contribute nothing to the forward pass,
receive no gradient, and their weights stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import flops as fm
from .autodiff import Tensor
from .space import (
    ArchitectureEncoding,
    GateId,
    NetworkShapeConfig,
    OpKind,
    cell_edges,
    enumerate_gates,
    validate,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# -- layers ----------------------------------------------------------------


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, groups=1):
        fan_in = (cin // groups) * k * k
        self.w = Tensor(
            _uniform_fan_in(rng, (cout, cin // groups, k, k), fan_in),
            requires_grad=True,
        )
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x):
        return ad.conv2d(x, self.w, stride=self.stride, groups=self.groups, padding=self.padding)

    def named_params(self, prefix):
        yield prefix + ".w", self.w

    def named_buffers(self, prefix):
        return iter(())


class BatchNorm:
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x, training):
        return ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )

    def named_params(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta

    def named_buffers(self, prefix):
        yield prefix + ".running_mean", self.running_mean
        yield prefix + ".running_var", self.running_var


class _Composite:
    """Base for layers made of sub-layers stored in ``self.parts``."""

    parts: List[Tuple[str, object]]

    def named_params(self, prefix):
        for name, part in self.parts:
            yield from part.named_params(f"{prefix}.{name}")

    def named_buffers(self, prefix):
        for name, part in self.parts:
            yield from part.named_buffers(f"{prefix}.{name}")


class ConvBN(_Composite):
    """1x1 convolution + batch norm (cell input preprocessing)."""

    def __init__(self, rng, cin, cout):
        self.conv = Conv(rng, cin, cout, 1)
        self.bn = BatchNorm(cout)
        self.parts = [("conv", self.conv), ("bn", self.bn)]

    def __call__(self, x, training):
        return self.bn(self.conv(x), training)


class FactorizedReduce(_Composite):
    """Two parallel stride-2 1x1 convolutions on half channels each,
    concatenated, then batch norm."""

    def __init__(self, rng, cin, cout):
        half = cout // 2
        self.conv_a = Conv(rng, cin, half, 1, stride=2)
        self.conv_b = Conv(rng, cin, cout - half, 1, stride=2)
        self.bn = BatchNorm(cout)
        self.parts = [("conv_a", self.conv_a), ("conv_b", self.conv_b), ("bn", self.bn)]

    def __call__(self, x, training):
        y = ad.channel_concat([self.conv_a(x), self.conv_b(x)])
        return self.bn(y, training)


class SepConv(_Composite):
    """Two cascaded (relu -> depthwise 3x3 -> pointwise 1x1 -> bn) stacks;
    the stride applies in the first stack only."""

    def __init__(self, rng, channels, stride):
        c = channels
        self.dw1 = Conv(rng, c, c, 3, stride=stride, padding=1, groups=c)
        self.pw1 = Conv(rng, c, c, 1)
        self.bn1 = BatchNorm(c)
        self.dw2 = Conv(rng, c, c, 3, stride=1, padding=1, groups=c)
        self.pw2 = Conv(rng, c, c, 1)
        self.bn2 = BatchNorm(c)
        self.parts = [
            ("dw1", self.dw1),
            ("pw1", self.pw1),
            ("bn1", self.bn1),
            ("dw2", self.dw2),
            ("pw2", self.pw2),
            ("bn2", self.bn2),
        ]

    def __call__(self, x, training):
        y = self.bn1(self.pw1(self.dw1(ad.relu(x))), training)
        return self.bn2(self.pw2(self.dw2(ad.relu(y))), training)


class Identity:
    def __call__(self, x, training):
        return x

    def named_params(self, prefix):
        return iter(())

    def named_buffers(self, prefix):
        return iter(())


def _make_op(rng, op: OpKind, channels: int, stride: int):
    if op is OpKind.SEP_CONV_3X3:
        return SepConv(rng, channels, stride)
    if stride == 1:
        return Identity()
    return FactorizedReduce(rng, channels, channels)


class Cell(_Composite):
    def __init__(self, rng, index, shape: NetworkShapeConfig, geom: fm.CellGeometry):
        self.index = index
        self.geom = geom
        if geom.in0_reduce:
            self.pre0 = FactorizedReduce(rng, geom.in0_channels, geom.channels)
        else:
            self.pre0 = ConvBN(rng, geom.in0_channels, geom.channels)
        self.pre1 = ConvBN(rng, geom.in1_channels, geom.channels)
        self.ops: Dict[GateId, object] = {}
        self.parts = [("pre0", self.pre0), ("pre1", self.pre1)]
        for i, j in cell_edges(shape.nodes_per_cell):
            for op in (OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3):
                gate = GateId.make(index, i, j, op)
                stride = fm.gate_stride(shape, gate)
                layer = _make_op(rng, op, geom.channels, stride)
                self.ops[gate] = layer
                self.parts.append((f"op.{i}.{j}.{op.value}", layer))


# -- config / reports ------------------------------------------------------


@dataclass
class OptimizerConfig:
    eta_omega: float = 0.01
    eta_alpha: float = 1.0
    momentum_omega: float = 0.9
    momentum_alpha: float = 0.9
    weight_decay_omega: float = 3e-4
    batch_size: int = 96

    def __post_init__(self):
        if self.eta_omega < 0 or self.eta_alpha < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class LossSpec:
    lam: float
    mu: float
    costs: fm.FlopsBreakdown
    mean_scope: str = "edge"


@dataclass
class StepReport:
    loss: float
    cross_entropy: float
    regularizer: float
    accuracy: float
    grad_norm_omega: float
    grad_norm_alpha: float


@dataclass
class DiscretizationReport:
    pruned: List[GateId]
    sigmas: Dict[GateId, float]
    probe_loss_before: float
    probe_loss_after: float

    @property
    def discretization_error(self) -> float:
        return self.probe_loss_after - self.probe_loss_before


# -- the super-network -----------------------------------------------------


class SuperNetwork:
    def __init__(self, shape: NetworkShapeConfig, num_classes: int, seed: int):
        self.shape = shape
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.geoms = fm.cell_geometries(shape)
        c0 = shape.initial_channels
        self.stem_conv = Conv(rng, 3, c0, 3, padding=1)
        self.stem_bn = BatchNorm(c0)
        self.cells = [
            Cell(rng, k, shape, self.geoms[k]) for k in range(shape.num_cells)
        ]
        c_final = (shape.nodes_per_cell - 2) * self.geoms[-1].channels
        self.fc_w = Tensor(_uniform_fan_in(rng, (c_final, num_classes), c_final), requires_grad=True)
        self.fc_b = Tensor(np.zeros(num_classes), requires_grad=True)

        self.gates = enumerate_gates(shape)
        self.alpha: Dict[GateId, Tensor] = {
            g: Tensor(0.0, requires_grad=True) for g in self.gates
        }
        self.active: Dict[GateId, bool] = {g: True for g in self.gates}
        self.bn_affine_trainable = True
        self._build_registry()
        self.velocity: Dict[str, np.ndarray] = {}

    def _build_registry(self):
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
        self.omega = params
        self.buffers = buffers
        # which gate (if any) owns each weight, for freeze-on-prune
        self.param_gate: Dict[str, GateId] = {}
        for k, cell in enumerate(self.cells):
            for gate, layer in cell.ops.items():
                for name, _ in layer.named_params(
                    f"cell{k}.op.{gate.i}.{gate.j}.{gate.op.value}"
                ):
                    self.param_gate[name] = gate

    # -- forward -----------------------------------------------------------

    def active_gates(self) -> List[GateId]:
        return [g for g in self.gates if self.active[g]]

    def sigma(self, gate: GateId) -> float:
        return float(ad._sigmoid(self.alpha[gate].data))

    def forward(self, x, training: bool) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expected = (3, self.shape.input_height, self.shape.input_width)
        if x.data.ndim != 4 or x.data.shape[1:] != expected:
            raise ad.ShapeMismatchError(
                f"input shape {x.data.shape} does not match (B, {expected[0]}, "
                f"{expected[1]}, {expected[2]})"
            )
        stem = self.stem_bn(self.stem_conv(x), training)
        s0 = s1 = stem
        for cell in self.cells:
            out = self._cell_forward(cell, s0, s1, training)
            s0, s1 = s1, out
        pooled = ad.global_average_pool(s1)
        return ad.linear(pooled, self.fc_w, self.fc_b)

    def _cell_forward(self, cell: Cell, s0, s1, training) -> Tensor:
        nodes = [cell.pre0(s0, training), cell.pre1(s1, training)]
        batch = s1.data.shape[0]
        g = cell.geom
        inner_shape = (batch, g.channels, g.out_height, g.out_width)
        for j in range(2, self.shape.nodes_per_cell):
            terms = []
            for i in range(j):
                if (i, j) == (0, 1):
                    continue
                for op in (OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3):
                    gate = GateId.make(cell.index, i, j, op)
                    if not self.active[gate]:
                        continue
                    weight = ad.sigmoid(self.alpha[gate])
                    terms.append(weight * cell.ops[gate](nodes[i], training))
            if terms:
                nodes.append(ad.add_n(terms))
            else:
                nodes.append(ad.zeros(inner_shape))  # dead node, zero-filled
        return ad.channel_concat(nodes[2:])

    def loss(self, x, y, spec: Optional[LossSpec], training: bool = True):
        """(total loss tensor, logits tensor).  spec=None means plain CE."""
        logits = self.forward(x, training)
        ce = ad.softmax_cross_entropy(logits, y)
        if spec is None or spec.lam == 0.0:
            return ce, logits
        active = self.active_gates()
        reg = fm.uniform_flops(self.alpha, active, spec.costs, spec.mean_scope)
        if spec.mu != 0.0:
            reg = reg + ad.scalar_scale(
                fm.expected_flops(self.alpha, active, spec.costs, spec.mean_scope),
                spec.mu,
            )
        return ce + ad.scalar_scale(reg, spec.lam), logits

    # -- updates -----------------------------------------------------------

    def _zero_grads(self):
        for _, p in self.omega:
            p.grad = None
        for a in self.alpha.values():
            a.grad = None

    def _apply_omega(self, opt: OptimizerConfig):
        norm_sq = 0.0
        for name, p in self.omega:
            gate = self.param_gate.get(name)
            if gate is not None and not self.active[gate]:
                continue  # pruned ops keep frozen weights
            if not self.bn_affine_trainable and (
                name.endswith(".gamma") or name.endswith(".beta")
            ):
                continue
            g = p.grad_array()
            norm_sq += float(np.sum(g * g))
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = opt.momentum_omega * v + g + opt.weight_decay_omega * p.data
            self.velocity[name] = v
            p.data = p.data - opt.eta_omega * v
        return np.sqrt(norm_sq)

    def _apply_alpha(self, opt: OptimizerConfig):
        norm_sq = 0.0
        for g_id in self.gates:
            if not self.active[g_id]:
                continue
            a = self.alpha[g_id]
            g = a.grad_array()
            norm_sq += float(np.sum(g * g))
            key = f"alpha.{g_id.cell}.{g_id.i}.{g_id.j}.{g_id.op.value}"
            v = self.velocity.get(key)
            if v is None:
                v = np.zeros_like(a.data)
            v = opt.momentum_alpha * v + g
            self.velocity[key] = v
            a.data = a.data - opt.eta_alpha * v
        return np.sqrt(norm_sq)

    def _check_finite(self, loss_value: float, context: str):
        if not np.isfinite(loss_value):
            raise NonFiniteLossError(
                f"non-finite loss during {context}",
                diagnostics={
                    "loss": loss_value,
                    "max_alpha": max(float(a.data) for a in self.alpha.values()),
                    "active_gates": len(self.active_gates()),
                },
            )

    def one_level_step(self, x, y, opt: OptimizerConfig, spec: LossSpec) -> StepReport:
        """Simultaneous momentum-SGD update of weights and gates from one
        backward pass on the same minibatch."""
        self._zero_grads()
        loss, logits = self.loss(x, y, spec, training=True)
        self._check_finite(loss.item(), "one_level_step")
        ce = float("nan")
        loss.backward()
        acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(y)))
        gw = self._apply_omega(opt)
        ga = self._apply_alpha(opt)
        # recover the CE part for reporting
        reg_val = 0.0
        if spec is not None and spec.lam != 0.0:
            active = self.active_gates()
            reg_val = float(
                fm.uniform_flops(self.alpha, active, spec.costs, spec.mean_scope).data
            )
            if spec.mu != 0.0:
                reg_val += spec.mu * float(
                    fm.expected_flops(self.alpha, active, spec.costs, spec.mean_scope).data
                )
            reg_val *= spec.lam
        return StepReport(
            loss=loss.item(),
            cross_entropy=loss.item() - reg_val,
            regularizer=reg_val,
            accuracy=acc,
            grad_norm_omega=gw,
            grad_norm_alpha=ga,
        )

    def bilevel_step(self, batch_d1, batch_d2, opt: OptimizerConfig,
                     spec: Optional[LossSpec] = None) -> StepReport:
        """First-order alternating baseline: weights step on D2, then gates
        step on D1 using the already-updated weights."""
        x2, y2 = batch_d2
        self._zero_grads()
        loss2, _ = self.loss(x2, y2, spec, training=True)
        self._check_finite(loss2.item(), "bilevel_step (weights)")
        loss2.backward()
        gw = self._apply_omega(opt)

        x1, y1 = batch_d1
        self._zero_grads()
        loss1, logits1 = self.loss(x1, y1, spec, training=True)
        self._check_finite(loss1.item(), "bilevel_step (gates)")
        loss1.backward()
        ga = self._apply_alpha(opt)
        acc = float(np.mean(np.argmax(logits1.data, axis=1) == np.asarray(y1)))
        return StepReport(
            loss=loss1.item(),
            cross_entropy=loss1.item(),
            regularizer=0.0,
            accuracy=acc,
            grad_norm_omega=gw,
            grad_norm_alpha=ga,
        )

    # -- discretization ----------------------------------------------------

    def discretize(self, gates_to_prune: Sequence[GateId], probe_batch) -> DiscretizationReport:
        gates_to_prune = sorted(gates_to_prune)
        for g in gates_to_prune:
            if g not in self.active:
                raise ValueError(f"gate {g} is not part of this network")
            if not self.active[g]:
                raise ValueError(f"gate {g} is already inactive")
        px, py = probe_batch
        before, _ = self.loss(px, py, None, training=False)
        sigmas = {g: self.sigma(g) for g in gates_to_prune}
        for g in gates_to_prune:
            self.active[g] = False
            key = f"alpha.{g.cell}.{g.i}.{g.j}.{g.op.value}"
            self.velocity.pop(key, None)
            for name, _ in self.omega:
                if self.param_gate.get(name) == g:
                    self.velocity.pop(name, None)
        after, _ = self.loss(px, py, None, training=False)
        return DiscretizationReport(
            pruned=gates_to_prune,
            sigmas=sigmas,
            probe_loss_before=before.item(),
            probe_loss_after=after.item(),
        )

    def export_architecture(self) -> ArchitectureEncoding:
        arch = ArchitectureEncoding(
            shape=self.shape, active=frozenset(self.active_gates())
        )
        report = validate(arch)
        if report.dead_nodes:
            arch = ArchitectureEncoding(
                shape=self.shape,
                active=arch.active,
                dead_nodes=tuple(report.dead_nodes),
            )
        return arch

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path, extra: Optional[dict] = None):
        """Self-describing npz dump; restores training bit-exactly."""
        arrays = {}
        for name, p in self.omega:
            arrays["param/" + name] = p.data
        for name, b in self.buffers:
            arrays["buffer/" + name] = b
        for g in self.gates:
            arrays[f"alpha/{g.cell}.{g.i}.{g.j}.{g.op.value}"] = self.alpha[g].data
        for name, v in self.velocity.items():
            arrays["velocity/" + name] = v
        meta = {
            "shape": {
                "num_cells": self.shape.num_cells,
                "nodes_per_cell": self.shape.nodes_per_cell,
                "initial_channels": self.shape.initial_channels,
                "input_height": self.shape.input_height,
                "input_width": self.shape.input_width,
                "reduction_cells": list(self.shape.reduction_cells),
            },
            "num_classes": self.num_classes,
            "seed": self.seed,
            "active": [
                f"{g.cell}.{g.i}.{g.j}.{g.op.value}"
                for g in self.gates
                if self.active[g]
            ],
            "bn_affine_trainable": self.bn_affine_trainable,
            "extra": extra or {},
        }
        arrays["meta"] = np.frombuffer(
            json.dumps(meta).encode("utf-8"), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @staticmethod
    def load_checkpoint(path) -> Tuple["SuperNetwork", dict]:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            s = meta["shape"]
            shape = NetworkShapeConfig(
                num_cells=s["num_cells"],
                nodes_per_cell=s["nodes_per_cell"],
                initial_channels=s["initial_channels"],
                input_height=s["input_height"],
                input_width=s["input_width"],
                reduction_cells=tuple(s["reduction_cells"]),
            )
            net = SuperNetwork(shape, meta["num_classes"], meta["seed"])
            net.bn_affine_trainable = meta["bn_affine_trainable"]
            for name, p in net.omega:
                p.data = data["param/" + name].copy()
            for name, b in net.buffers:
                b[...] = data["buffer/" + name]
            active = set(meta["active"])
            for g in net.gates:
                key = f"{g.cell}.{g.i}.{g.j}.{g.op.value}"
                net.alpha[g].data = data["alpha/" + key].copy()
                net.active[g] = key in active
            net.velocity = {
                k[len("velocity/") :]: data[k].copy()
                for k in data.files
                if k.startswith("velocity/")
            }
        return net, meta["extra"]


def build(shape: NetworkShapeConfig, num_classes: int, seed: int) -> SuperNetwork:
    """Fresh super-network: all gates active, every alpha zero (sigma 0.5),
    weights drawn from scaled uniform fan-in initialization."""
    return SuperNetwork(shape, num_classes, seed)
