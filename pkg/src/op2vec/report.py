"""Figures and delimited tables for trained artifacts."""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .dex.opcodes import family, mnemonic  # noqa: E402
from .embedding import EmbeddingTable, TrainTrace  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.8),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "op2vec",  # stable ids across runs
}


def _save(fig, path: Path) -> Path:
    # no timestamps in the metadata, keeps output byte-stable
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path


def embedding_rows(table: EmbeddingTable, opcodes: Iterable[int] | None = None) -> list[list]:
    wanted = set(opcodes) if opcodes is not None else None
    rows = []
    for op, vec in zip(table.opcodes, table.vectors):
        if wanted is None or op in wanted:
            rows.append([f"{op:02x}", mnemonic(op), family(op), *(float(v) for v in vec)])
    return rows


def write_embedding_csv(table: EmbeddingTable, path: str | os.PathLike,
                        opcodes: Iterable[int] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["opcode", "mnemonic", "family", *(f"v{i + 1}" for i in range(table.D))])
        w.writerows(embedding_rows(table, opcodes))


def plot_embeddings(table: EmbeddingTable, path: str | os.PathLike,
                    opcodes: Sequence[int] | None = None, annotate: bool = True) -> Path:
    """Scatter of the first two embedding dimensions, coloured by opcode family."""
    path = Path(path)
    rows = embedding_rows(table, opcodes)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups: dict[str, list] = {}
        for row in rows:
            groups.setdefault(row[2], []).append(row)
        for fam in sorted(groups):
            pts = groups[fam]
            xs = [r[3] for r in pts]
            ys = [r[4] if table.D > 1 else 0.0 for r in pts]
            ax.scatter(xs, ys, s=18, label=fam)
            if annotate:
                for r, x, y in zip(pts, xs, ys):
                    ax.annotate(r[1], (x, y), fontsize=6, xytext=(2, 2), textcoords="offset points")
        ax.set_xlabel("dimension 1")
        ax.set_ylabel("dimension 2" if table.D > 1 else "")
        ax.set_title("Opcode embeddings")
        ax.legend(fontsize=7, loc="best")
        return _save(fig, path)


def plot_loss(trace: TrainTrace, path: str | os.PathLike, title: str = "Skip-gram training") -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = range(1, len(trace.epoch_loss) + 1)
        ax.plot(epochs, trace.epoch_loss, marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean cross-entropy")
        ax.set_title(title)
        return _save(fig, path)


def plot_history(history: Sequence[dict], path: str | os.PathLike) -> Path:
    """Training loss and held-out accuracy/F1 per epoch."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [h["epoch"] for h in history]
        ax.plot(epochs, [h["train_loss"] for h in history], marker="o", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        for key, style in (("accuracy", "s--"), ("f1", "^:")):
            vals = [h.get(key) for h in history]
            if any(v is not None for v in vals):
                ax2.plot(epochs, [float("nan") if v is None else v for v in vals], style,
                         color="tab:green" if key == "accuracy" else "tab:red", label=f"held-out {key}")
        ax2.set_ylim(0, 1.05)
        ax2.grid(False)
        lines = ax.get_legend_handles_labels()
        lines2 = ax2.get_legend_handles_labels()
        ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], fontsize=8, loc="center right")
        ax.set_title("Classifier training")
        return _save(fig, path)


def read_history_csv(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: (None if v == "" else (int(v) if k in ("epoch", "tp", "fp", "tn", "fn")
                                                    else float(v))) for k, v in row.items()})
    return out


HISTORY_FIELDS = ["epoch", "train_loss", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1"]


def write_history_csv(history: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_FIELDS, lineterminator="\n", restval="")
        w.writeheader()
        for h in history:
            w.writerow({k: ("" if v is None else v) for k, v in h.items()})
