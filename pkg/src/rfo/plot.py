"""SVG learning curves from metrics CSVs: mean +/- std across seeds of a
moving-average-smoothed column."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

SMOOTH_WINDOW = 100


def read_column(path: str | Path, column: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and column not in rows[0]:
        raise KeyError(f"{path}: no column {column!r}")
    x = np.array([float(r["iteration"]) for r in rows])
    y = np.array([float(r[column]) for r in rows])
    return x, y


def moving_average(y: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        return y
    c = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(1, y.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def metrics_files(run_dir: str | Path) -> list[Path]:
    """A run directory holds either ``metrics.csv`` or ``seed_*/metrics.csv``."""
    d = Path(run_dir)
    direct = d / "metrics.csv"
    if direct.exists():
        return [direct]
    return sorted(d.glob("seed_*/metrics.csv"))


def seed_band(files: Sequence[Path], column: str, window: int = SMOOTH_WINDOW):
    curves = []
    x = None
    for f in files:
        xi, yi = read_column(f, column)
        curves.append(moving_average(yi, window))
        x = xi if x is None or len(xi) < len(x) else x
    n = min(len(c) for c in curves)
    stack = np.stack([c[:n] for c in curves])
    return x[:n], stack.mean(axis=0), stack.std(axis=0)


def plot_runs(
    run_dirs: Sequence[str | Path],
    out: str | Path,
    column: str = "eval_return",
    window: int = SMOOTH_WINDOW,
    labels: Sequence[str] | None = None,
) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, d in enumerate(run_dirs):
        files = metrics_files(d)
        if not files:
            raise FileNotFoundError(f"no metrics.csv under {d}")
        x, mean, std = seed_band(files, column, window)
        label = labels[i] if labels else Path(d).name
        ax.plot(x, mean, label=f"{label} (n={len(files)})")
        ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel("iteration")
    ax.set_ylabel(column)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the file reproducible
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
