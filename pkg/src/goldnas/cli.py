"""Command-line entry point.

Commands: search, retrain, random-search, count-space, flops, export-dot,
validate, trace-replay.  stdout carries results (one machine-parsable
summary line per command), stderr carries diagnostics.  Exit codes:
0 success, 1 runtime failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import flops as fm
from . import harness, plots, scheduler
from .config import ConfigError, Profile, load_profile
from .data import DatasetSplit, generate_synthetic, load_cifar10_binary, DatasetError
from .space import (
    ArchitectureError,
    NetworkShapeConfig,
    count_space,
    deserialize,
    export_dot,
    validate,
)

EXIT_RUNTIME = 1
EXIT_INPUT = 2

ENV_OUT = "GOLDNAS_OUT"


def _fail(code: int, message: str) -> int:
    print(message, file=sys.stderr)
    return code


def _load_data(profile: Profile) -> DatasetSplit:
    d = profile.data
    if d.source == "synthetic":
        return generate_synthetic(
            d.num_classes, d.samples_per_class, d.resolution, seed=0
        )
    if d.source == "cifar10":
        data = load_cifar10_binary(d.path)
        if d.limit:
            data = data.subset(range(min(d.limit, len(data))))
        return data
    raise ConfigError(f"unknown data source {d.source!r}")


def _read_arch(path: str):
    try:
        with open(path) as fh:
            return deserialize(fh.read())
    except OSError as e:
        raise ArchitectureError(f"cannot read {path}: {e}") from e


def _out_dir(args) -> str:
    out = args.out or os.environ.get(ENV_OUT) or "goldnas_out"
    os.makedirs(out, exist_ok=True)
    return out


def _apply_overrides(profile: Profile, args) -> Profile:
    sched = profile.scheduler
    if getattr(args, "mu", None) is not None:
        sched = replace(sched, mu=args.mu)
    if getattr(args, "flops_min", None) is not None:
        sched = replace(sched, flops_min=args.flops_min)
    if getattr(args, "max_epochs", None) is not None:
        sched = replace(sched, max_epochs=args.max_epochs)
    return replace(profile, scheduler=sched)


# -- commands --------------------------------------------------------------


def cmd_search(args) -> int:
    try:
        profile = _apply_overrides(load_profile(args.config), args)
        data = _load_data(profile)
    except (ConfigError, DatasetError) as e:
        return _fail(EXIT_INPUT, f"search: {e}")
    out = _out_dir(args)
    try:
        result = scheduler.run_search(
            profile.shape,
            data,
            profile.scheduler,
            profile.optimizer,
            seed=args.seed,
            augment_cfg=profile.augment,
        )
    except scheduler.SearchAbort as e:
        ckpt = os.path.join(out, "abort_checkpoint.npz")
        if e.net is not None:
            e.net.save_checkpoint(ckpt, extra={"reason": str(e)})
            harness.write_trace(e.trace, os.path.join(out, "trace.csv"))
            print(f"search aborted; checkpoint written to {ckpt}", file=sys.stderr)
        return _fail(EXIT_RUNTIME, f"search: {e}")
    trace_path = os.path.join(out, "trace.csv")
    harness.write_trace(result.trace, trace_path)
    manifest = harness.write_pareto_set(result.pareto, os.path.join(out, "pareto"))
    ckpt = os.path.join(out, "checkpoint.npz")
    result.net.save_checkpoint(
        ckpt, extra={"seed": args.seed, "mu": profile.scheduler.mu}
    )
    fig_dir = os.path.join(out, "figures")
    plots.render_trace_figures(result.trace, fig_dir)
    plots.render_pareto_figure(harness.read_pareto_manifest(manifest), fig_dir)
    print(
        f"search ok epochs={len(result.trace)} pareto={len(result.pareto)} "
        f"final_flops={result.trace[-1].discrete_flops} trace={trace_path} "
        f"manifest={manifest}"
    )
    return 0


def cmd_retrain(args) -> int:
    try:
        profile = load_profile(args.config)
        data = _load_data(profile)
        arch = _read_arch(args.arch)
    except (ConfigError, DatasetError, ArchitectureError) as e:
        return _fail(EXIT_INPUT, f"retrain: {e}")
    out = _out_dir(args)
    schedule = harness.RetrainSchedule(epochs=args.epochs, seed=args.seed)
    train, eval_split = data.split(0.8, args.seed)
    try:
        model, metrics = harness.retrain(arch, train, schedule, eval_data=eval_split)
    except ArchitectureError as e:
        return _fail(EXIT_INPUT, f"retrain: {e}")
    flops = fm.discrete_flops(model.encoding, data.num_classes)
    with open(os.path.join(out, "retrain_metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    print(
        f"retrain ok epochs={schedule.epochs} flops={flops} "
        f"train_acc={metrics['train_acc'][-1] if metrics['train_acc'] else 0.0:.4f} "
        f"eval_acc={metrics['eval_acc']:.4f}"
    )
    return 0


def cmd_random_search(args) -> int:
    try:
        profile = load_profile(args.config)
        data = _load_data(profile)
    except (ConfigError, DatasetError) as e:
        return _fail(EXIT_INPUT, f"random-search: {e}")
    out = _out_dir(args)
    try:
        best, reports = scheduler.random_search_baseline(
            profile.shape,
            data,
            budget=args.budget,
            k=args.k,
            seed=args.seed,
            proxy_epochs=args.proxy_epochs,
        )
    except ArchitectureError as e:
        return _fail(EXIT_RUNTIME, f"random-search: {e}")
    from .space import serialize

    best_path = os.path.join(out, "random_search_best.json")
    with open(best_path, "w") as fh:
        fh.write(serialize(best))
    with open(os.path.join(out, "random_search_report.json"), "w") as fh:
        json.dump(reports, fh, indent=2)
    winner = max(reports, key=lambda r: r["proxy_val_acc"])
    print(
        f"random-search ok k={args.k} best_index={winner['index']} "
        f"best_flops={winner['flops']} best_proxy_acc={winner['proxy_val_acc']:.4f} "
        f"arch={best_path}"
    )
    return 0


def cmd_count_space(args) -> int:
    if args.nodes < 3:
        return _fail(EXIT_INPUT, "count-space: --nodes must be >= 3")
    shape = NetworkShapeConfig(
        num_cells=args.cells,
        nodes_per_cell=args.nodes,
        initial_channels=1,
        input_height=8,
        input_width=8,
    )
    card = count_space(shape)
    print(f"per_cell={card.per_cell}")
    print(f"total={card.exact}")
    print(f"approx={card.approx()}")
    return 0


def cmd_flops(args) -> int:
    try:
        arch = _read_arch(args.arch)
    except ArchitectureError as e:
        return _fail(EXIT_INPUT, f"flops: {e}")
    costs = fm.breakdown(arch.shape, args.num_classes)
    print("cell,from,to,op,stride,flops,active")
    active = set(arch.active)
    for g in sorted(costs.per_gate):
        print(
            f"{g.cell},{g.i},{g.j},{g.op.value},{fm.gate_stride(arch.shape, g)},"
            f"{costs.per_gate[g]},{int(g in active)}"
        )
    total = costs.total(sorted(active))
    print(f"stem={costs.stem}")
    print(f"classifier={costs.classifier}")
    print(f"total={total}")
    return 0


def cmd_export_dot(args) -> int:
    try:
        arch = _read_arch(args.arch)
        dot = export_dot(arch)
    except ArchitectureError as e:
        return _fail(EXIT_INPUT, f"export-dot: {e}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(dot)
        print(f"export-dot ok file={args.out}")
    else:
        sys.stdout.write(dot)
    return 0


def cmd_validate(args) -> int:
    try:
        arch = _read_arch(args.arch)
        report = validate(arch)
    except ArchitectureError as e:
        return _fail(EXIT_INPUT, f"validate: {e}")
    if report.valid:
        print(f"validate ok gates={len(arch.active)} dead_nodes=0")
    else:
        dead = ";".join(f"{c}.{n}" for c, n in report.dead_nodes)
        print(
            f"validate warning gates={len(arch.active)} "
            f"dead_nodes={len(report.dead_nodes)} [{dead}]"
        )
    return 0


def cmd_trace_replay(args) -> int:
    try:
        rows = harness.read_trace(args.trace)
    except (OSError, ValueError) as e:
        return _fail(EXIT_INPUT, f"trace-replay: {e}")
    cfg = None
    if args.config:
        try:
            cfg = load_profile(args.config).scheduler
        except ConfigError as e:
            return _fail(EXIT_INPUT, f"trace-replay: {e}")
    if cfg is not None:
        try:
            scheduler.replay_trace(rows, cfg)
        except AssertionError as e:
            return _fail(EXIT_RUNTIME, f"trace-replay: branch semantics mismatch: {e}")
    out = _out_dir(args)
    path = os.path.join(out, "trace_replay.csv")
    harness.write_trace(rows, path)
    plots.render_trace_figures(rows, out)
    if args.manifest:
        try:
            records = harness.read_pareto_manifest(args.manifest)
        except (OSError, ValueError) as e:
            return _fail(EXIT_INPUT, f"trace-replay: {e}")
        plots.render_pareto_figure(records, out)
    verified = "verified" if cfg is not None else "unverified"
    print(f"trace-replay ok rows={len(rows)} semantics={verified} csv={path}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="goldnas")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run the gradual-pruning search")
    s.add_argument("--config", required=True)
    s.add_argument("--mu", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.add_argument("--flops-min", dest="flops_min", type=int, default=None)
    s.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("retrain", help="re-train a discrete architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("random-search", help="random baseline under a FLOPs budget")
    s.add_argument("--config", required=True)
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--k", type=int, default=24)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--proxy-epochs", dest="proxy_epochs", type=int, default=3)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_random_search)

    s = sub.add_parser("count-space", help="exact size of the search space")
    s.add_argument("--cells", type=int, required=True)
    s.add_argument("--nodes", type=int, required=True)
    s.set_defaults(func=cmd_count_space)

    s = sub.add_parser("flops", help="per-gate FLOPs table for an architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--num-classes", dest="num_classes", type=int, default=0)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("export-dot", help="DOT graph of an architecture")
    s.add_argument("--arch", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_export_dot)

    s = sub.add_parser("validate", help="check an architecture document")
    s.add_argument("--arch", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("trace-replay", help="verify and re-emit a search trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--manifest", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_trace_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
