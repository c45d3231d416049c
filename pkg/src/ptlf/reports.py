"""CSV artifacts of a run and the plain-text summary rendered from them."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

from .evalkit import AccuracyMatrix, accuracy, forgetting, reduction

METRICS_CSV = "metrics.csv"
CORRELATION_CSV = "correlation.csv"
FREEZE_TRACE_CSV = "freeze_trace.csv"
COST_CSV = "cost.csv"
LOSSES_CSV = "losses.csv"
CONFIG_ECHO = "config.echo"
CHECKPOINT = "checkpoint.bin"

CORRELATION_HEADER = ["task", "layer", "r", "k", "m", "grad_norm", "projected_norm"]
FREEZE_TRACE_HEADER = ["task", "epoch", "frozen"]
COST_HEADER = ["task", "counter", "value", "baseline", "reduction"]
LOSSES_HEADER = ["task", "epoch", "loss"]


def metrics_header(tasks: int) -> list[str]:
    return ["task"] + [f"acc_task_{i}" for i in range(1, tasks + 1)] + ["accuracy", "forgetting"]


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def metrics_rows(mat: AccuracyMatrix):
    for t in range(1, mat.seen + 1):
        sub = mat.truncated(t)
        row = mat.rows[t - 1]
        accs = row + [None] * (mat.tasks - t)
        yield [t, *accs, accuracy(sub), forgetting(sub)]


def correlation_rows(task_reports):
    for rep in task_reports:
        if rep.correlation is None:
            continue
        for c in rep.correlation.layers:
            yield [rep.task_id, c.layer, c.ratio, c.k, c.m, c.grad_norm, c.projected_norm]


def freeze_trace_rows(task_reports):
    for rep in task_reports:
        for epoch, frozen in enumerate(rep.freeze_trace, start=1):
            yield [rep.task_id, epoch, ";".join(str(l) for l in frozen)]


def losses_rows(task_reports):
    for rep in task_reports:
        for epoch, loss in enumerate(rep.losses, start=1):
            yield [rep.task_id, epoch, loss]


def cost_rows(task_reports):
    total = None
    for rep in task_reports:
        total = rep.cost if total is None else total.merge(rep.cost)
        for name, value, base in rep.cost.counters():
            yield [rep.task_id, name, value, base, reduction(value, base)]
    if total is not None:
        for name, value, base in total.counters():
            yield ["total", name, value, base, reduction(value, base)]


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def render_summary(out_dir: str | Path) -> str:
    """Plain-text tables built only from the CSVs in ``out_dir``."""
    out_dir = Path(out_dir)
    metrics = read_csv(out_dir / METRICS_CSV)
    lines = ["Accuracy matrix (%, row = after task t)"]
    acc_cols = [k for k in metrics[0] if k.startswith("acc_task_")] if metrics else []
    lines.append("task  " + "  ".join(f"{c[9:]:>7}" for c in acc_cols) + "   accuracy  forgetting")
    for row in metrics:
        cells = "  ".join(f"{float(row[c]):7.2f}" if row[c] else " " * 7 for c in acc_cols)
        forget = f"{float(row['forgetting']):10.2f}" if row["forgetting"] else " " * 10
        lines.append(f"{row['task']:>4}  {cells}   {float(row['accuracy']):8.2f}  {forget}")
    cost_path = out_dir / COST_CSV
    if cost_path.exists():
        lines.append("")
        lines.append("Training cost (all tasks)")
        lines.append(f"{'counter':<20}{'value':>18}{'baseline':>18}{'reduction':>11}")
        for row in read_csv(cost_path):
            if row["task"] != "total":
                continue
            lines.append(
                f"{row['counter']:<20}{int(row['value']):>18}{int(row['baseline']):>18}"
                f"{100 * float(row['reduction']):>10.2f}%"
            )
    corr_path = out_dir / CORRELATION_CSV
    if corr_path.exists():
        rows = read_csv(corr_path)
        if rows:
            lines.append("")
            lines.append("Task correlation ratio per backbone layer")
            by_task: dict[str, list[str]] = {}
            for row in rows:
                by_task.setdefault(row["task"], []).append(f"{float(row['r']):.3f}")
            for task, vals in by_task.items():
                lines.append(f"task {task:>3}: " + " ".join(vals))
    return "\n".join(lines) + "\n"
