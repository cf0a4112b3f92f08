"""Figures written next to the numeric series files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"tta_reset": "tab:blue", "tta": "tab:green", "frozen": "black"}
LABELS = {"tta_reset": "TTA + reset", "tta": "TTA", "frozen": "no adaptation"}


def _domain_spans(domains: Sequence[int]):
    """(start, stop, domain) for each run of equal consecutive domain ids."""
    spans, start = [], 0
    for i in range(1, len(domains) + 1):
        if i == len(domains) or domains[i] != domains[start]:
            spans.append((start, i, domains[start]))
            start = i
    return spans


def plot_rolling_f1(runs: Mapping[str, "RunMetrics"], path: str | Path, title: str = "") -> Path:  # noqa: F821
    """Rolling macro-F1 of several predictors over the same stream, with domain bands."""
    fig, ax = plt.subplots(figsize=(9, 3.2))
    first = next(iter(runs.values()))
    spans = _domain_spans(first.domains)
    if len(spans) <= 40:
        for k, (a, b, d) in enumerate(spans):
            if k % 2:
                ax.axvspan(a, b, color="0.92", lw=0)
            if b - a >= len(first.domains) / 25:
                ax.text((a + b) / 2, 1.02, f"D{d}", ha="center", va="bottom", fontsize=7)
    for name, run in runs.items():
        x = np.arange(run.window - 1, run.window - 1 + len(run.rolling_f1))
        ax.plot(x, run.rolling_f1, color=COLORS.get(name), label=LABELS.get(name, name), lw=1.2)
    ax.set_xlim(0, len(first.domains))
    ax.set_ylim(0, 1.08)
    ax.set_xlabel("sample")
    ax.set_ylabel(f"F1 (rolling {first.window})")
    if title:
        ax.set_title(title, fontsize=9, loc="left")
    ax.legend(fontsize=7, loc="lower right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_training_log(history: Sequence[dict], path: str | Path) -> Path:
    steps = [h["step"] for h in history]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3))
    for key in ("loss", "L_a", "L_d", "L_c"):
        ax.plot(steps, [h[key] for h in history], label=key, lw=1)
    ax.set_xlabel("step")
    ax.legend(fontsize=7, frameon=False)
    ax2.plot(steps, [h["lambda"] for h in history], color="tab:red", lw=1, label="lambda")
    val = [(h["step"], h["val_f1"]) for h in history if h["val_f1"] is not None]
    if val:
        axv = ax2.twinx()
        axv.plot(*zip(*val), "o-", ms=3, color="tab:purple", lw=1, label="val F1")
        axv.set_ylim(0, 1)
        axv.set_ylabel("val F1")
    ax2.set_xlabel("step")
    ax2.set_ylabel("lambda")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_latency(stats: Mapping[str, "LatencyStats"], path: str | Path) -> Path:  # noqa: F821
    names = list(stats)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(
        [LABELS.get(n, n) for n in names],
        [stats[n].mean_ms for n in names],
        yerr=[stats[n].std_ms for n in names],
        color=[COLORS.get(n, "0.5") for n in names],
        capsize=3,
    )
    ax.set_ylabel("ms per sample (batch 1)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
