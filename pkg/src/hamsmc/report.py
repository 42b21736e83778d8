"""Figures for evaluation grids and training curves (written to files)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Fixed metadata keeps PNG output byte-identical across runs.
_PNG_META = {"Software": None}


def plot_eval(rows, path) -> None:
    """Per-step ELBO against ``S`` for each ``K``; SMC dashed, HSMC solid."""
    Ks = sorted({r.K for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, K in enumerate(Ks):
        color = f"C{i}"
        for method, style in (("smc", "--"), ("hsmc", "-")):
            sel = sorted((r for r in rows if r.K == K and r.method == method), key=lambda r: r.S)
            ax.errorbar([r.S for r in sel], [r.elbo_per_step for r in sel], yerr=[r.se_per_step for r in sel],
                        fmt=style + "o", color=color, capsize=3, label=f"{method.upper()} K={K}")
    ax.set_xlabel("leapfrog steps S")
    ax.set_ylabel("ELBO per step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_training(metrics_csv, path) -> None:
    """Train ELBO and held-out log-likelihood (per step) against optimizer step."""
    with open(metrics_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, [float(r["train_elbo"]) for r in rows], "o-", label="train ELBO / step")
    ax.plot(steps, [float(r["heldout_ll_per_step"]) for r in rows], "s-", label="held-out LL / step")
    ax.set_xlabel("optimizer step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100, metadata=_PNG_META)
    plt.close(fig)
