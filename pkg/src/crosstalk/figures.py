"""Offline matplotlib renders written next to the delimited outputs.

Every CLI report path calls one of these: loss curves after training, WER
bars after evaluation, and the attention heatmap grid after a dump.  All
rendering uses the Agg backend; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np


def loss_curves(manifest, out_path) -> Path:
    """Train/dev loss per epoch from a RunManifest."""
    out_path = Path(out_path)
    epochs = np.arange(1, len(manifest.train_losses) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, manifest.train_losses, marker="o", label="train")
    dev_x = np.arange(0, len(manifest.dev_losses) + 1)
    ax.plot(dev_x, [manifest.dev_loss_init] + list(manifest.dev_losses),
            marker="s", label="dev")
    for e in manifest.best_epochs:
        ax.axvline(e + 1, color="grey", alpha=0.3, linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title("training curves (grey lines: fused epochs)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def wer_bars(report, out_path) -> Path:
    """Per-class WER bars mirroring the summary block."""
    out_path = Path(out_path)
    labels, values = [], []
    for name, value in [("overall", report.overall_wer),
                        ("single", report.single_wer),
                        ("low", report.bucket_wer("low")),
                        ("median", report.bucket_wer("median")),
                        ("high", report.bucket_wer("high")),
                        ("oa_wer", report.oa_wer)]:
        if value is not None:
            labels.append(name)
            values.append(100.0 * value)
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color="steelblue")
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylabel("WER (%)")
    ax.set_title(f"{report.variant} on {report.split}")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def attention_grid(matrices: dict, out_path) -> Path:
    """Heatmap per (block, head) from {filename stem: matrix}."""
    out_path = Path(out_path)
    if not matrices:
        raise ValueError("no attention matrices to render")
    names = sorted(matrices)
    blocks = sorted({n.split("_")[0] for n in names})
    heads = sorted({n.split("_")[1] for n in names})
    fig, axes = plt.subplots(len(blocks), len(heads),
                             figsize=(3 * len(heads), 3 * len(blocks)),
                             squeeze=False)
    for i, b in enumerate(blocks):
        for j, h in enumerate(heads):
            ax = axes[i][j]
            name = f"{b}_{h}"
            ax.imshow(matrices[name], aspect="auto", cmap="viridis",
                      origin="upper")
            ax.set_title(name, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
