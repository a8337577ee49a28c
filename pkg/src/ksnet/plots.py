"""Figure rendering for run artifacts (headless matplotlib)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_reliability_figure(table, path: str, title: str = "Reliability") -> None:
    """Reliability diagram: per-bin accuracy bars against the identity line."""
    lo = [b.lo for b in table]
    width = [b.hi - b.lo for b in table]
    acc = [b.acc for b in table]
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    ax.bar(lo, acc, width=width, align="edge", edgecolor="black",
           color="tab:blue", alpha=0.75, label="accuracy")
    ax.plot([0, 1], [0, 1], "k--", linewidth=1, label="perfect calibration")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("empirical accuracy")
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(rows, path: str) -> None:
    """Per-epoch loss decomposition from the training CSV rows."""
    epochs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(epochs, [r[1] for r in rows], marker="o", label="total")
    ax.plot(epochs, [r[4] for r in rows], marker="s", label="nll")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(rows, path: str) -> None:
    """Accuracy against parameter count across the delta sweep."""
    params = [r[1] for r in rows]
    acc = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(params, acc, marker="o")
    for delta, p, a in rows:
        ax.annotate(f"$\\delta$={delta:g}", (p, a), fontsize=7,
                    textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("parameters")
    ax.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
