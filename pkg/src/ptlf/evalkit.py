"""KNN probe, continual-learning metrics and analytic training-cost counters."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .network import Network, Role, forward

BYTES_PER_FLOAT = 8
DEFAULT_KNN_K = 20


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def knn_classify(train_feats, train_labels, query_feats, k: int = DEFAULT_KNN_K) -> np.ndarray:
    """Cosine-similarity KNN with a similarity-weighted vote.

    Neighbour ties go to the lower training index, vote ties to the smaller
    class id.
    """
    train = np.asarray(train_feats, dtype=np.float64)
    labels = np.asarray(train_labels)
    query = np.asarray(query_feats, dtype=np.float64)
    if train.shape[0] == 0:
        raise ValueError("knn_classify needs a non-empty training set")
    if not 1 <= k <= train.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {train.shape[0]}]")
    classes = np.unique(labels)
    label_pos = np.searchsorted(classes, labels)
    sims = _unit_rows(query) @ _unit_rows(train).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    out = np.empty(query.shape[0], dtype=labels.dtype)
    for q in range(query.shape[0]):
        votes = np.zeros(classes.size)
        np.add.at(votes, label_pos[order[q]], sims[q, order[q]])
        out[q] = classes[int(np.argmax(votes))]
    return out


class AccuracyMatrix:
    """Lower-triangular T x T accuracies in percent; acc[t][i] after task t."""

    def __init__(self, tasks: int):
        self.tasks = tasks
        self.rows: list[list[float]] = []

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], tasks: int | None = None) -> "AccuracyMatrix":
        m = cls(tasks if tasks is not None else len(rows))
        for r in rows:
            m.add_row(r)
        return m

    def add_row(self, row: Sequence[float]):
        t = len(self.rows) + 1
        if len(row) != t:
            raise ValueError(f"row {t} must have {t} entries, got {len(row)}")
        if any(not 0.0 <= v <= 100.0 for v in row):
            raise ValueError(f"accuracies must lie in [0, 100]: {list(row)}")
        self.rows.append([float(v) for v in row])

    def truncated(self, t: int) -> "AccuracyMatrix":
        return AccuracyMatrix.from_rows(self.rows[:t])

    @property
    def seen(self) -> int:
        return len(self.rows)


def accuracy(mat: AccuracyMatrix) -> float:
    if mat.seen != mat.tasks or mat.seen == 0:
        raise ValueError(f"accuracy needs a complete final row ({mat.seen}/{mat.tasks} rows present)")
    final = mat.rows[-1]
    return sum(final) / len(final)


def forgetting(mat: AccuracyMatrix) -> float | None:
    """Mean over earlier tasks of (best accuracy ever reached - final accuracy).

    The best value ranges over every evaluation of the task including the
    final one, so the result is never negative.  None when T < 2.
    """
    T = mat.seen
    if T < 2:
        return None
    final = mat.rows[-1]
    drops = []
    for i in range(T - 1):
        best = max(mat.rows[t][i] for t in range(i, T))
        drops.append(best - final[i])
    return sum(drops) / (T - 1)


@dataclass
class CostDelta:
    forward_flops: int = 0
    weight_grad_flops: int = 0
    input_grad_flops: int = 0
    activation_bytes: int = 0

    def __add__(self, other: "CostDelta") -> "CostDelta":
        return CostDelta(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    @property
    def backward_flops(self) -> int:
        return self.weight_grad_flops + self.input_grad_flops


def account_step(dims: Sequence[tuple[int, int]], batch: int, frozen: Sequence[bool]) -> CostDelta:
    """Analytic cost of one training step through a chain of dense layers.

    ``dims`` are (out, in) per layer in forward order.  A multiply-add counts
    as 2 FLOPs; biases and activations are ignored.
    """
    if len(dims) != len(frozen):
        raise ValueError("dims and frozen flags must align")
    total = CostDelta()
    upstream_trainable = False
    for (out_dim, in_dim), is_frozen in zip(dims, frozen):
        mac = 2 * batch * out_dim * in_dim
        trainable = not is_frozen
        total.forward_flops += mac
        if trainable:
            total.weight_grad_flops += mac
        if upstream_trainable:
            total.input_grad_flops += mac
        if trainable or upstream_trainable:
            total.activation_bytes += BYTES_PER_FLOAT * batch * in_dim
        upstream_trainable = upstream_trainable or trainable
    return total


@dataclass
class CostReport:
    """Cumulative training counters with the matching all-trainable baseline."""

    actual: CostDelta = field(default_factory=CostDelta)
    baseline: CostDelta = field(default_factory=CostDelta)
    parameter_bytes: int = 0
    buffer_bytes: int = 0
    steps: int = 0

    def record(self, dims, batch: int, frozen: Sequence[bool], used: Sequence[bool] | None = None):
        if used is not None:
            dims = [d for d, u in zip(dims, used) if u]
            frozen = [f for f, u in zip(frozen, used) if u]
        self.actual = self.actual + account_step(dims, batch, frozen)
        self.baseline = self.baseline + account_step(dims, batch, [False] * len(dims))
        self.steps += 1

    def merge(self, other: "CostReport") -> "CostReport":
        return CostReport(
            self.actual + other.actual,
            self.baseline + other.baseline,
            max(self.parameter_bytes, other.parameter_bytes),
            max(self.buffer_bytes, other.buffer_bytes),
            self.steps + other.steps,
        )

    def counters(self) -> list[tuple[str, int, int]]:
        """(name, value, baseline) rows in a fixed order."""
        a, b = self.actual, self.baseline
        return [
            ("forward_flops", a.forward_flops, b.forward_flops),
            ("weight_grad_flops", a.weight_grad_flops, b.weight_grad_flops),
            ("input_grad_flops", a.input_grad_flops, b.input_grad_flops),
            ("backward_flops", a.backward_flops, b.backward_flops),
            ("activation_bytes", a.activation_bytes, b.activation_bytes),
            ("parameter_bytes", self.parameter_bytes, self.parameter_bytes),
            ("buffer_bytes", self.buffer_bytes, self.buffer_bytes),
        ]


def reduction(value: int, baseline: int) -> float:
    return 0.0 if baseline == 0 else 1.0 - value / baseline


def features(net: Network, x) -> np.ndarray:
    """Backbone output without touching the training caches."""
    return forward(net, x, Role.BACKBONE, cache=False)


def evaluate_all_tasks(net: Network, tasks, upto_task: int, k: int = DEFAULT_KNN_K) -> list[float]:
    """KNN accuracy (percent) on each of the first ``upto_task`` tasks."""
    row = []
    for task in tasks[:upto_task]:
        train_f = features(net, task.train_x)
        test_f = features(net, task.test_x)
        kk = min(k, train_f.shape[0])
        pred = knn_classify(train_f, task.train_y, test_f, kk)
        row.append(100.0 * float(np.mean(pred == task.test_y)))
    return row

