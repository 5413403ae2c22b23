"""Search-report figures rendered next to the delimited outputs."""

from __future__ import annotations

import os
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .harness import TraceRow


def render_trace_figures(rows: Sequence[TraceRow], out_dir: str) -> List[str]:
    """lambda trajectory and FLOPs decay vs epoch; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    epochs = [r.epoch for r in rows]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.lam for r in rows], color="tab:red", lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("lambda", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.n_pruned for r in rows], color="tab:gray", lw=0.8, ls=":")
    ax2.set_ylabel("gates pruned", color="tab:gray")
    ax.set_title("regularization coefficient")
    fig.tight_layout()
    path = os.path.join(out_dir, "lambda_trace.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.discrete_flops for r in rows], color="tab:blue", lw=1.5,
            label="discrete")
    ax.plot(epochs, [r.expected_flops for r in rows], color="tab:orange", lw=1.0,
            ls="--", label="expected")
    ax.set_xlabel("epoch")
    ax.set_ylabel("FLOPs")
    ax.legend()
    ax.set_title("super-network cost")
    fig.tight_layout()
    path = os.path.join(out_dir, "flops_trace.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def render_pareto_figure(records: Sequence[dict], out_dir: str) -> str:
    """Scatter of recorded architectures: FLOPs vs snapshot accuracy."""
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    flops = [r["flops"] for r in records]
    accs = [r["train_acc"] for r in records]
    ax.plot(flops, accs, "o-", color="tab:green")
    for r in records:
        ax.annotate(f'e{r["epoch"]}', (r["flops"], r["train_acc"]), fontsize=8,
                    xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("discrete FLOPs")
    ax.set_ylabel("train accuracy at record")
    ax.set_title("recorded architectures")
    fig.tight_layout()
    path = os.path.join(out_dir, "pareto_front.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
