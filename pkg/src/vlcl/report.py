"""Run artifacts: the results table, sweep data files, and a text summary.

The machine-readable table is a plain CSV with the fixed column set
{method, seed, order, final_acc, a_n, f_n, n_prm, wall_time_s}. Sweep
emitters write their own small data files next to it. The summary is for
humans and also carries the consecutive-drop forgetting variant, which
never appears in the CSV.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .train import RunResult

CSV_COLUMNS = ("method", "seed", "order", "final_acc", "a_n", "f_n", "n_prm", "wall_time_s")


def append_runs_csv(path: Path, results: list[RunResult]) -> None:
    path = Path(path)
    fresh = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow([r.method, r.seed, r.order, f"{r.final_acc:.4f}",
                             f"{r.a_n:.4f}", f"{r.f_n:.4f}", f"{r.n_prm:.4f}",
                             f"{r.wall_time_s:.2f}"])


def read_runs_csv(path: Path) -> list[dict]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise DataFormatError(f"{path}: expected columns {CSV_COLUMNS}, got {reader.fieldnames}")
        rows = []
        for row in reader:
            for key in ("final_acc", "a_n", "f_n", "n_prm", "wall_time_s"):
                row[key] = float(row[key])
            row["seed"] = int(row["seed"])
            rows.append(row)
    return rows


def write_order_sweep(path: Path, results: list[RunResult]) -> None:
    """Per-order final accuracies plus mean and half-width per method."""
    lines = ["method,order,final_acc"]
    for r in results:
        lines.append(f"{r.method},{r.order},{r.final_acc:.4f}")
    by_method: dict[str, list[float]] = defaultdict(list)
    for r in results:
        by_method[r.method].append(r.final_acc)
    lines.append("")
    lines.append("method,mean,half_width")
    for method, vals in sorted(by_method.items()):
        arr = np.asarray(vals)
        half = (arr.max() - arr.min()) / 2.0
        lines.append(f"{method},{arr.mean():.4f},{half:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_replay_sweep(path: Path, sizes: list[int], results: list[RunResult]) -> None:
    """A_N against buffer size, one row per run."""
    lines = ["buffer_size,seed,a_n,final_acc"]
    for size, r in zip(sizes, results):
        lines.append(f"{size},{r.seed},{r.a_n:.4f},{r.final_acc:.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def matrix_block(result: RunResult) -> str:
    n = len(result.tasks)
    width = max(len(t) for t in result.tasks)
    lines = [f"accuracy matrix (rows: after task i; columns: task j): {result.method} seed {result.seed}"]
    for i in range(n):
        cells = []
        for j in range(n):
            v = result.acc_matrix[i, j]
            cells.append("   .  " if np.isnan(v) else f"{v:6.2f}")
        lines.append(f"  after {result.tasks[i]:<{width}}  " + " ".join(cells))
    return "\n".join(lines)


def write_summary(path: Path, results: list[RunResult], notes: str = "") -> None:
    by_method: dict[str, list[RunResult]] = defaultdict(list)
    for r in results:
        by_method[r.method].append(r)
    lines = ["run summary", "==========", ""]
    header = f"{'method':<14} {'runs':>4} {'final_acc':>10} {'a_n':>8} {'f_n':>8} {'f_n_consec':>10} {'n_prm%':>8}"
    lines.append(header)
    for method, runs in sorted(by_method.items()):
        fin = np.mean([r.final_acc for r in runs])
        a_n = np.mean([r.a_n for r in runs])
        f_n = np.mean([r.f_n for r in runs])
        f_c = np.mean([r.f_n_consecutive for r in runs])
        prm = np.mean([r.n_prm for r in runs])
        lines.append(f"{method:<14} {len(runs):>4} {fin:>10.2f} {a_n:>8.2f} {f_n:>8.2f} {f_c:>10.2f} {prm:>8.2f}")
    lines.append("")
    for r in results:
        lines.append(matrix_block(r))
        lines.append("")
    if notes:
        lines.extend([notes, ""])
    Path(path).write_text("\n".join(lines), encoding="utf-8")
