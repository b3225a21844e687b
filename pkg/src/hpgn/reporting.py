"""Figure and file rendering for reports: loss curves, CMC curves, heatmaps.

Every report path writes the delimited data first and a matplotlib rendering
of the same content next to it.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datasynth import write_pgm  # noqa: E402
from .evalprotocols import EvalReport  # noqa: E402


def save_loss_curves(log_rows: list[dict], out_dir) -> str:
    path = os.path.join(out_dir, "loss_curves.png")
    epochs = [r["epoch"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [r.get("total", 0.0) for r in log_rows], label="total")
    for key in ("lsrs1", "triplet1", "lsrs2", "triplet2"):
        if any(key in r for r in log_rows):
            ax1.plot(epochs, [r.get(key, 0.0) for r in log_rows], label=key, alpha=0.6)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    ax2.plot(epochs, [r["lr"] for r in log_rows])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_cmc_figure(report: EvalReport, out_dir) -> str:
    path = os.path.join(out_dir, "cmc_curve.png")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ranks = np.arange(1, len(report.cmc) + 1)
    ax.plot(ranks, report.cmc, drawstyle="steps-post")
    ax.set_xlabel("rank")
    ax.set_ylabel("identification rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{report.protocol}  mAP={report.map_score:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_heatmaps(maps: list[dict], out_dir) -> list[str]:
    """One text matrix, one PGM, and one PNG figure per heatmap."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for entry in maps:
        stem = f"scale{entry['size']}x{entry['size']}_layer{entry['depth']}"
        heat = entry["heatmap"]
        txt = os.path.join(out_dir, stem + ".txt")
        with open(txt, "w") as fh:
            fh.write(f"{heat.shape[0]} {heat.shape[1]}\n")
            for row in heat:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        write_pgm(os.path.join(out_dir, stem + ".pgm"), heat)
        fig, ax = plt.subplots(figsize=(3, 3))
        im = ax.imshow(heat, cmap="inferno", vmin=0.0, vmax=1.0)
        ax.set_title(stem, fontsize=8)
        ax.axis("off")
        fig.colorbar(im, fraction=0.046)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, stem + ".png"), dpi=120)
        plt.close(fig)
        written.append(txt)
    return written
