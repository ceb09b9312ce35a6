"""Static figures for reports: embedding scatter and loss curves.

Rendering uses the non-interactive Agg backend so it works headless. Figures
are written with fixed metadata so reruns produce identical PNG bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def scatter_figure(scatter, path, title: str | None = None) -> Path:
    """Ground-truth embeddings as dots, converted ones as crosses, one colour per group."""
    groups = sorted(set(scatter.groups))
    cmap = plt.get_cmap("tab10" if len(groups) <= 10 else "tab20")
    fig, ax = plt.subplots(figsize=(6, 5))
    for k, g in enumerate(groups):
        for converted, marker in ((False, "o"), (True, "x")):
            idx = [i for i, (gg, c) in enumerate(zip(scatter.groups, scatter.converted))
                   if gg == g and c == converted]
            if not idx:
                continue
            label = f"{g} (converted)" if converted else g
            ax.scatter(scatter.xy[idx, 0], scatter.xy[idx, 1], marker=marker,
                       color=cmap(k % cmap.N), label=label, s=28)
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    return _save(fig, path)


def loss_figure(history, path, title: str | None = None) -> Path:
    """Loss curves from ``(step, l_rec, l_class, total)`` rows."""
    steps = [r[0] for r in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col, name in ((1, "reconstruction"), (2, "classification"), (3, "total")):
        ax.plot(steps, [r[col] for r in history], label=name, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def metrics_figure(report, path) -> Path:
    """Per-pair MCD and F0 error bars from an :class:`EvalReport`."""
    pairs = report.pairs
    labels = [f"{p.source}->{p.target}" for p in pairs]
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 0.4 * len(pairs)), 6), sharex=True)
    axes[0].bar(range(len(pairs)), [p.mcd for p in pairs], color="tab:blue")
    axes[0].set_ylabel("MCD (dB)")
    axes[1].bar(range(len(pairs)), [p.f0_mae if p.f0_mae is not None else 0.0 for p in pairs],
                color="tab:orange")
    axes[1].set_ylabel("F0 MAE (Hz)")
    axes[1].set_xticks(range(len(pairs)))
    axes[1].set_xticklabels(labels, rotation=90, fontsize=6)
    fig.tight_layout()
    return _save(fig, path)
