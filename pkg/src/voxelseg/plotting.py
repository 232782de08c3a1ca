"""Training-curve figures (accuracy, loss, IoU) rendered to SVG with matplotlib.

Output is byte-stable: fixed figure size, fixed SVG hash salt, no
timestamp metadata, and no path simplification, so every history row
becomes one vertex of its polyline.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import MalformedCsv  # noqa: E402

COLUMNS = ("epoch", "train_loss", "train_acc", "train_iou", "val_loss", "val_acc", "val_iou")

FIGURES = {
    "accuracy": ("train_acc", "val_acc", "Accuracy"),
    "loss": ("train_loss", "val_loss", "Total loss"),
    "iou": ("train_iou", "val_iou", "IoU"),
}

STYLE = {
    "svg.hashsalt": "voxelseg",
    "svg.fonttype": "path",
    "path.simplify": False,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (5.0, 3.2),
    "lines.linewidth": 1.4,
}


def read_history(path: str | os.PathLike) -> dict[str, list[float]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in COLUMNS if c not in header]
            if missing:
                raise MalformedCsv(f"{path}: missing column(s) {', '.join(missing)}")
            cols: dict[str, list[float]] = {c: [] for c in COLUMNS}
            for lineno, row in enumerate(reader, start=2):
                for c in COLUMNS:
                    try:
                        cols[c].append(float(row[c]))
                    except (TypeError, ValueError) as exc:
                        raise MalformedCsv(f"{path}:{lineno}: bad value for {c}: {row[c]!r}") from exc
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"{path}: not a text file") from exc
    if not cols["epoch"]:
        raise MalformedCsv(f"{path}: no data rows")
    return cols


def plot_history(history: dict[str, list[float]], out_dir: str | os.PathLike) -> list[Path]:
    """Write accuracy.svg, loss.svg and iou.svg; each has a train and a validation line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    epochs = history["epoch"]
    with plt.rc_context(STYLE):
        for stem, (train_col, val_col, label) in FIGURES.items():
            fig, ax = plt.subplots()
            marker = "o" if len(epochs) == 1 else None
            ax.plot(epochs, history[train_col], marker=marker, label="train", gid="train")
            ax.plot(epochs, history[val_col], marker=marker, label="validation", gid="validation")
            ax.set_xlabel("Epoch")
            ax.set_ylabel(label)
            ax.set_title(f"Training and validation {label.lower()}")
            ax.legend(loc="best")
            fig.tight_layout()
            path = out_dir / f"{stem}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
