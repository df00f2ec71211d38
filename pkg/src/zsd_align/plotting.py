"""Precision/recall points as CSV rows and a rendered PNG of the same curves."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

from .evaluation import MatchResult, pr_curve  # noqa: E402

PR_HEADER = ("class", "rank", "confidence", "recall", "precision", "tp")


def pr_rows(match: MatchResult, names: Sequence[str], classes: Sequence[int]) -> list[tuple]:
    """One row per ranked detection of each class in ``classes``."""
    rows = []
    for k in classes:
        rec, prec = pr_curve(match, k)
        confs = match.confidences.get(k, [])
        flags = match.flags.get(k, [])
        for r, (re, pr) in enumerate(zip(rec, prec)):
            rows.append((names[k], r + 1, float(confs[r]), float(re), float(pr), int(flags[r])))
    return rows


def write_pr_csv(path: str | Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PR_HEADER)
        for row in rows:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), row[5]])


def plot_pr_curves(path: str | Path, rows: Sequence[tuple], title: str = "") -> Path:
    """Step plot of precision against recall, one line per class."""
    by_class: dict[str, list[tuple[float, float]]] = {}
    for name, _, _, rec, prec, _ in rows:
        by_class.setdefault(name, []).append((rec, prec))
    fig, ax = plt.subplots(figsize=(4.5, 3.6), dpi=120)
    try:
        for name, pts in by_class.items():
            rec = [0.0] + [p[0] for p in pts]
            prec = [pts[0][1]] + [p[1] for p in pts]
            ax.step(rec, prec, where="post", lw=1.2, label=name)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if title:
            ax.set_title(title, fontsize=9)
        if by_class:
            ax.legend(fontsize=7, frameon=False, loc="lower left")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
    finally:
        plt.close(fig)
    return path
