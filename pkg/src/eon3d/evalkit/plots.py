"""Static matplotlib figures (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def plot_pr(curve: dict, title: str, path):
    fig, ax = plt.subplots(figsize=(4, 3.2))
    if curve["recall"]:
        ax.step(curve["recall"], curve["precision"], where="post")
    else:
        ax.text(0.5, 0.5, "no detections", ha="center", va="center")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title, fontsize=9)
    _save(fig, path)


def plot_losses(entries: list, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if entries:
        epochs = [e["epoch"] for e in entries]
        names = sorted(entries[0]["losses"])
        for name in names:
            ax.plot(epochs, [e["losses"].get(name, float("nan")) for e in entries], label=name,
                    lw=2 if name == "total" else 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=6, ncol=2)
    else:
        ax.text(0.5, 0.5, "no training log", ha="center", va="center")
        ax.set_axis_off()
    _save(fig, path)


def plot_ablation(rows: list, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [r["label"] for r in rows]
    ax.bar(range(len(rows)), [r["map25"] if r["map25"] is not None else 0.0 for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("mAP@0.25")
    _save(fig, path)
