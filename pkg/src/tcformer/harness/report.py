import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import smoothed


def write_loss_csv(path, losses, window=25):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    blocks = smoothed(losses, window)
    with open(str(path).replace(".csv", "_smoothed.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["block_end_step", "mean_loss"])
        for i, v in enumerate(blocks):
            w.writerow([(i + 1) * window - 1, repr(float(v))])


def plot_loss_png(path, losses, window=25):
    blocks = smoothed(losses, window)
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.semilogy(losses, lw=0.6, alpha=0.4, label="per step")
    ax.semilogy([(i + 1) * window - 1 for i in range(len(blocks))], blocks, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("heatmap MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
