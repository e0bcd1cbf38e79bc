"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "figure.dpi": 120,
})  # fmt: skip


def figure_path(csv_path: Path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_log(rows: Sequence[dict], path: Path, window: int = 20) -> Path:
    it = np.array([r["iter"] for r in rows])
    loss = np.array([r["loss"] for r in rows], dtype=float)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(it, loss, lw=0.5, alpha=0.4, color="#2980b9")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax1.plot(it[window - 1 :], smooth, color="#2c3e50", label=f"{window}-step mean")
        ax1.legend(frameon=False)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("Charbonnier loss")
    ax1.set_yscale("log")
    ax2.plot(it, [r["lr"] for r in rows], color="#c0392b")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("learning rate")
    return _save(fig, path)


def plot_bench(rows: Sequence[dict], path: Path) -> Path:
    labels = [r["arm"] for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    series = [
        ([r["peak_tape_bytes"] / 2**20 for r in rows], "peak tape (MiB)"),
        ([r["wall_ms_per_iter"] for r in rows], "wall time per iteration (ms)"),
        ([r["final_psnr"] for r in rows], "held-out PSNR (dB)"),
    ]
    for ax, (vals, title) in zip(axes, series):
        ax.bar(x, vals, color=["#27ae60" if lab.startswith("truncated") else "#2980b9" for lab in labels])
        ax.set_xticks(x, labels, rotation=30, ha="right")
        ax.set_title(title)
        if "PSNR" in title and np.all(np.isfinite(vals)):
            lo = min(vals)
            ax.set_ylim(lo - 0.5, max(vals) + 0.2)
    return _save(fig, path)


def plot_attention_stats(rows: Sequence[dict], path: Path) -> Path:
    blocks = sorted({r["block"] for r in rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    for key, base, ax, title in (
        ("zero_fraction", "baseline_zero_fraction", ax1, "exact-zero fraction"),
        ("top50_mass", "baseline_top50_mass", ax2, "top-50 mass"),
    ):
        main = [np.mean([r[key] for r in rows if r["block"] == b]) for b in blocks]
        other = [np.mean([r[base] for r in rows if r["block"] == b]) for b in blocks]
        kind = rows[0]["activation"] if rows else "refocus"
        ax.plot(blocks, main, "o-", color="#c0392b", label=kind)
        ax.plot(blocks, other, "s--", color="#2c3e50", label="softmax" if kind == "refocus" else "refocus")
        ax.set_xlabel("block index (depth)")
        ax.set_title(title)
        ax.legend(frameon=False)
    return _save(fig, path)
