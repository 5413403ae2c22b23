"""Gradual pruning driver: per-epoch training, threshold pruning, the
adaptive regularization coefficient, patience-based recording of surviving
architectures, and FLOPs-based termination.

Per epoch: one pass of simultaneous updates over the training data, then
one pruning round.  The pruning rule removes every gate that is among the
``n0`` weakest and below ``xi_max``, plus any gate below ``xi_min``.  The
coefficient ``lam`` grows geometrically while pruning under-delivers and
is cut once the expected number of gates falls; architectures that survive
``t0`` consecutive no-prune epochs are recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import flops as fm
from . import harness
from .data import AugmentationConfig, DatasetSplit, augment_batch
from .space import ArchitectureEncoding, GateId, NetworkShapeConfig, random_sample_under_flops
from .supernet import LossSpec, OptimizerConfig, SuperNetwork, build


class SearchAbort(RuntimeError):
    """Search cannot continue; carries the network for checkpointing."""

    def __init__(self, message, net=None, trace=None):
        super().__init__(message)
        self.net = net
        self.trace = trace or []


@dataclass
class SchedulerConfig:
    flops_min: int
    n0: int = 4
    lambda0: float = 1e-5
    c0: float = 2.0
    xi_max: float = 0.05
    xi_min: float = 0.01
    t0: int = 3
    mu: float = 0.0
    max_epochs: int = 500
    mean_scope: str = "edge"

    def __post_init__(self):
        if not 0 <= self.xi_min <= self.xi_max < 1:
            raise ValueError("need 0 <= xi_min <= xi_max < 1")
        if self.c0 <= 1:
            raise ValueError("c0 must exceed 1")
        if self.n0 < 1 or self.t0 < 1 or self.lambda0 <= 0:
            raise ValueError("n0, t0 must be >= 1 and lambda0 > 0")


@dataclass
class SchedulerState:
    lam: float = 0.0
    delta_lam: float = 0.0
    t: int = 0
    epoch: int = 0

    @staticmethod
    def initial(cfg: SchedulerConfig) -> "SchedulerState":
        return SchedulerState(lam=0.0, delta_lam=cfg.lambda0, t=0, epoch=0)


@dataclass
class PruneRoundReport:
    e_size: int
    e_min: List[GateId]
    pruned: List[GateId]
    sigmas: Dict[GateId, float]  # sigma of every active gate before pruning

    @property
    def n_pruned(self) -> int:
        return len(self.pruned)


@dataclass
class ParetoRecord:
    arch: ArchitectureEncoding
    flops: int
    train_loss: float
    train_acc: float
    epoch: int


ParetoSet = List[ParetoRecord]


def select_prune_set(
    sigmas: Dict[GateId, float], cfg: SchedulerConfig
) -> Tuple[List[GateId], List[GateId]]:
    """(e_min, prune set) for the given active-gate weights.

    Ties in the weakest-``n0`` selection break by canonical gate order.
    """
    ordered = sorted(sigmas, key=lambda g: (sigmas[g], g))
    e_min = ordered[: cfg.n0]
    prune = {g for g in e_min if sigmas[g] < cfg.xi_max}
    prune.update(g for g in sigmas if sigmas[g] < cfg.xi_min)
    return e_min, sorted(prune)


def prune_round(net: SuperNetwork, cfg: SchedulerConfig, probe_batch) -> PruneRoundReport:
    active = net.active_gates()
    sigmas = {g: net.sigma(g) for g in active}
    e_min, prune = select_prune_set(sigmas, cfg)
    if prune:
        net.discretize(prune, probe_batch)
    return PruneRoundReport(
        e_size=len(active), e_min=e_min, pruned=prune, sigmas=sigmas
    )


def lambda_update(state: SchedulerState, n_pruned: int, cfg: SchedulerConfig) -> SchedulerState:
    if n_pruned < cfg.n0:
        delta = cfg.c0 * state.delta_lam
        lam = state.lam + delta
    else:
        delta = cfg.lambda0
        lam = state.lam / cfg.c0
    return replace(state, lam=lam, delta_lam=delta)


def patience_update(
    state: SchedulerState,
    n_pruned: int,
    cfg: SchedulerConfig,
    pareto: ParetoSet,
    current: ParetoRecord,
) -> SchedulerState:
    """Advance the no-prune counter; record the surviving architecture after
    ``t0`` quiet epochs.  Re-records of an unchanged (or not strictly
    cheaper) architecture are suppressed."""
    t = state.t + 1 if n_pruned == 0 else 0
    if t >= cfg.t0:
        _append_record(pareto, current)
        t = 0
    return replace(state, t=t)


def _append_record(pareto: ParetoSet, record: ParetoRecord) -> bool:
    if pareto:
        last = pareto[-1]
        if last.arch.active == record.arch.active or record.flops >= last.flops:
            return False
    pareto.append(record)
    return True


def replay_trace(rows: Sequence["harness.TraceRow"], cfg: SchedulerConfig):
    """Re-derive every lambda / delta-lambda / patience transition from the
    logged n_pruned values; raises AssertionError on the first mismatch."""
    state = SchedulerState.initial(cfg)
    for row in rows:
        state = lambda_update(state, row.n_pruned, cfg)
        t = state.t + 1 if row.n_pruned == 0 else 0
        if t >= cfg.t0:
            t = 0
        state = replace(state, t=t, epoch=row.epoch)
        if not np.isclose(state.lam, row.lam, rtol=0, atol=0):
            raise AssertionError(
                f"epoch {row.epoch}: lambda {row.lam} != replayed {state.lam}"
            )
        if not np.isclose(state.delta_lam, row.delta_lambda, rtol=0, atol=0):
            raise AssertionError(
                f"epoch {row.epoch}: delta_lambda {row.delta_lambda} != replayed {state.delta_lam}"
            )
        if t != row.patience_t:
            raise AssertionError(
                f"epoch {row.epoch}: patience {row.patience_t} != replayed {t}"
            )


@dataclass
class SearchResult:
    pareto: ParetoSet
    trace: List["harness.TraceRow"]
    net: SuperNetwork
    prune_reports: List[PruneRoundReport]


def run_search(
    shape: NetworkShapeConfig,
    data: DatasetSplit,
    cfg: SchedulerConfig,
    opt: OptimizerConfig,
    seed: int,
    augment_cfg: Optional[AugmentationConfig] = None,
) -> SearchResult:
    """Full Algorithm-1 loop; returns the recorded architectures, the
    per-epoch trace and the final network."""
    costs = fm.breakdown(shape, data.num_classes)
    full_flops = costs.total(list(costs.per_gate))
    if cfg.flops_min > full_flops:
        raise ValueError(
            f"flops_min {cfg.flops_min} exceeds the full architecture cost {full_flops}"
        )
    seeds = np.random.SeedSequence(seed).spawn(2)
    net = build(shape, data.num_classes, seed=int(seeds[0].generate_state(1)[0]))
    epoch_rng = np.random.default_rng(seeds[1])

    probe = data.batch(range(min(len(data), opt.batch_size)))
    state = SchedulerState.initial(cfg)
    pareto: ParetoSet = []
    trace: List[harness.TraceRow] = []
    reports: List[PruneRoundReport] = []

    for epoch in range(1, cfg.max_epochs + 1):
        spec = LossSpec(lam=state.lam, mu=cfg.mu, costs=costs, mean_scope=cfg.mean_scope)
        losses, accs = [], []
        order = epoch_rng.permutation(len(data))
        for start in range(0, len(order), opt.batch_size):
            idx = order[start : start + opt.batch_size]
            x, y = data.batch(idx)
            if augment_cfg is not None and augment_cfg.enabled:
                x = augment_batch(x, augment_cfg, epoch_rng)
            report = net.one_level_step(x, y, opt, spec)
            losses.append(report.cross_entropy)
            accs.append(report.accuracy)
        train_loss = float(np.mean(losses))
        train_acc = float(np.mean(accs))

        round_report = prune_round(net, cfg, probe)
        reports.append(round_report)
        state = lambda_update(state, round_report.n_pruned, cfg)

        arch = net.export_architecture()
        flops = fm.discrete_flops(arch, data.num_classes)
        current = ParetoRecord(
            arch=arch, flops=flops, train_loss=train_loss, train_acc=train_acc, epoch=epoch
        )
        state = patience_update(state, round_report.n_pruned, cfg, pareto, current)
        state = replace(state, epoch=epoch)

        active = net.active_gates()
        expected = float(
            fm.expected_flops(net.alpha, active, costs, cfg.mean_scope).data
        )
        trace.append(
            harness.TraceRow(
                epoch=epoch,
                lam=state.lam,
                delta_lambda=state.delta_lam,
                n_pruned=round_report.n_pruned,
                active_gates=len(active),
                expected_flops=expected,
                discrete_flops=flops,
                train_loss=train_loss,
                train_acc=train_acc,
                patience_t=state.t,
            )
        )

        if flops <= cfg.flops_min:
            _append_record(pareto, current)
            return SearchResult(pareto=pareto, trace=trace, net=net, prune_reports=reports)
        if not active:
            raise SearchAbort(
                f"all gates pruned but discrete FLOPs {flops} still exceeds "
                f"flops_min {cfg.flops_min}; the budget is unreachable",
                net=net,
                trace=trace,
            )
    raise SearchAbort(
        f"search did not reach flops_min {cfg.flops_min} within "
        f"{cfg.max_epochs} epochs (current {flops})",
        net=net,
        trace=trace,
    )


def random_search_baseline(
    shape: NetworkShapeConfig,
    data: DatasetSplit,
    budget: int,
    k: int,
    seed: int,
    proxy_epochs: int = 3,
    proxy_val_fraction: float = 0.2,
    schedule: Optional["harness.RetrainSchedule"] = None,
):
    """Sample ``k`` valid architectures under the budget, score each with a
    short proxy training run, and return the best with per-sample reports."""
    if k < 1:
        raise ValueError("k must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(k + 1)
    train, val = data.split(1.0 - proxy_val_fraction, int(seeds[-1].generate_state(1)[0]))
    best = None
    reports = []
    for s in range(k):
        sample_seed = int(seeds[s].generate_state(1)[0])
        arch = random_sample_under_flops(
            shape, budget, sample_seed, num_classes=data.num_classes
        )
        flops = fm.discrete_flops(arch, data.num_classes)
        sched = schedule or harness.RetrainSchedule(epochs=proxy_epochs)
        sched = replace(sched, seed=sample_seed)
        _, metrics = harness.retrain(arch, train, sched, eval_data=val)
        report = {
            "index": s,
            "seed": sample_seed,
            "flops": flops,
            "proxy_val_acc": metrics["eval_acc"],
            "proxy_train_acc": metrics["train_acc"][-1] if metrics["train_acc"] else 0.0,
        }
        reports.append(report)
        if best is None or report["proxy_val_acc"] > best[1]["proxy_val_acc"]:
            best = (arch, report)
    return best[0], reports
