"""Replay buffer, mixup, the per-task training loop and the stream runner."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import reports as rp
from .config import serialize_config
from .data import load_stream
from .evalkit import AccuracyMatrix, CostReport, accuracy, evaluate_all_tasks, forgetting
from .freezing import FreezeMode, FreezeSchedule, FreezeState, apply_freeze, overlap_ratio
from .network import GradientSet, Network, Role, backward, forward, gradient_probe, save_checkpoint, sgd_step
from .objectives import AugmentationPipeline, augment, barlow_twins_loss, cross_entropy, simsiam_loss
from .subspace import CorrelationReport, correlation_report

log = logging.getLogger(__name__)

# independent RNG streams per task, so optional analysis never shifts training randomness
SHUFFLE, AUGMENT, MIXUP, PROBE, BUFFER = range(5)


def task_rng(seed: int, task_index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_index, purpose])


class ReplayBuffer:
    """Fixed-capacity store of raw samples kept balanced across seen tasks."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.samples: dict[int, np.ndarray] = {}
        self.labels: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.samples.values())

    def counts(self) -> dict[int, int]:
        return {t: len(v) for t, v in self.samples.items()}

    def contents(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(samples, labels, task ids) in task order."""
        if not self.samples:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        tids = sorted(self.samples)
        x = np.concatenate([self.samples[t] for t in tids])
        y = np.concatenate([self.labels[t] for t in tids])
        ids = np.concatenate([np.full(len(self.samples[t]), t) for t in tids])
        return x, y, ids

    @property
    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.samples.values())


def _quotas(capacity: int, task_ids: Sequence[int]) -> dict[int, int]:
    base, extra = divmod(capacity, len(task_ids))
    return {t: base + (1 if i < extra else 0) for i, t in enumerate(sorted(task_ids))}


def buffer_update(buf: ReplayBuffer, task_data, task_id: int, rng: np.random.Generator, labels=None):
    """Admit a new task and rebalance: every task keeps floor(capacity / t)
    samples (earliest tasks take the remainder), evicting uniformly."""
    x = np.asarray(task_data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("buffer_update needs a non-empty batch of samples")
    y = np.full(len(x), -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    quotas = _quotas(buf.capacity, list(buf.samples) + [task_id])
    for t in sorted(buf.samples):
        have = len(buf.samples[t])
        if have > quotas[t]:
            keep = np.sort(rng.choice(have, size=quotas[t], replace=False))
            buf.samples[t] = buf.samples[t][keep]
            buf.labels[t] = buf.labels[t][keep]
    take = min(quotas[task_id], len(x))
    pick = np.sort(rng.choice(len(x), size=take, replace=False))
    buf.samples[task_id] = x[pick].copy()
    buf.labels[task_id] = y[pick].copy()


@dataclass
class MixedBatch:
    x: np.ndarray
    lam: float
    partner_labels: np.ndarray | None


def mix_batch(x_current, buf: ReplayBuffer, alpha: float, rng: np.random.Generator, lam: float | None = None) -> MixedBatch:
    x = np.asarray(x_current, dtype=np.float64)
    if len(buf) == 0:
        log.info("replay buffer empty; mixup skipped")
        return MixedBatch(x, 1.0, None)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    bx, by, _ = buf.contents()
    idx = rng.integers(0, len(bx), size=len(x))
    return MixedBatch(lam * x + (1.0 - lam) * bx[idx], lam, by[idx])


def mixup(x_current, buf: ReplayBuffer, alpha: float, rng: np.random.Generator, lam: float | None = None) -> np.ndarray:
    """lam * x + (1 - lam) * (uniform buffer draws), one lam ~ Beta(alpha, alpha) per batch."""
    return mix_batch(x_current, buf, alpha, rng, lam).x


# -- objectives bound to the network ---------------------------------------

def simsiam_step(net: Network, batch) -> tuple[float, GradientSet]:
    v1, v2 = batch
    b = len(v1)
    p = forward(net, np.concatenate([v1, v2]), Role.PREDICTOR)
    z = net.stage_outputs[Role.PROJECTOR]
    lv = simsiam_loss(p[:b], z[:b], p[b:], z[b:])
    gp = np.concatenate([lv.grads[0], lv.grads[2]])
    gz = np.concatenate([lv.grads[1], lv.grads[3]])
    return lv.value, backward(net, gp, {Role.PROJECTOR: gz})


def barlow_twins_step(net: Network, batch, lam: float = 5e-3) -> tuple[float, GradientSet]:
    v1, v2 = batch
    b = len(v1)
    z = forward(net, np.concatenate([v1, v2]), Role.PROJECTOR)
    lv = barlow_twins_loss(z[:b], z[b:], lam)
    return lv.value, backward(net, np.concatenate(lv.grads))


def supervised_step(net: Network, batch) -> tuple[float, GradientSet]:
    """Cross-entropy on the projector output used as logits.

    ``batch`` is (x, labels) or (x, labels, partner_labels, lam) for a mixed
    batch, whose loss interpolates the two label sets.
    """
    x, y = batch[0], batch[1]
    logits = forward(net, x, Role.PROJECTOR)
    if len(batch) == 2 or batch[2] is None:
        lv = cross_entropy(logits, y)
        return lv.value, backward(net, lv.grads[0])
    partner, lam = batch[2], batch[3]
    a = cross_entropy(logits, y)
    b = cross_entropy(logits, partner)
    value = lam * a.value + (1.0 - lam) * b.value
    return value, backward(net, lam * a.grads[0] + (1.0 - lam) * b.grads[0])


@dataclass
class Objective:
    name: str
    bt_lambda: float = 5e-3

    @property
    def uses_views(self) -> bool:
        return self.name != "supervised_ce"

    @property
    def stage(self) -> Role:
        return Role.PREDICTOR if self.name == "simsiam" else Role.PROJECTOR

    def __call__(self, net: Network, batch) -> tuple[float, GradientSet]:
        if self.name == "simsiam":
            return simsiam_step(net, batch)
        if self.name == "barlow_twins":
            return barlow_twins_step(net, batch, self.bt_lambda)
        if self.name == "supervised_ce":
            return supervised_step(net, batch)
        raise ValueError(f"unknown objective {self.name!r}")


@dataclass
class Hyper:
    epochs: int = 20
    batch: int = 64
    lr: float = 0.03
    alpha: float = 0.4
    eps_th: float = 0.95
    probe_batches: int = 4
    knn_k: int = 20
    seed: int = 0


@dataclass
class TaskReport:
    task_id: int
    losses: list[float]
    freeze_trace: list[list[int]]
    correlation: CorrelationReport | None
    cost: CostReport
    ranking: dict[int, float] = field(default_factory=dict)
    overlap: float | None = None


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    out = [order[i : i + size] for i in range(0, n, size)]
    return [b for b in out if len(b) >= 2]


def _views(x, labels, objective: Objective, pipe: AugmentationPipeline, mixed: MixedBatch | None = None):
    if objective.uses_views:
        return (augment(pipe, x), augment(pipe, x))
    if mixed is None or mixed.partner_labels is None:
        return (augment(pipe, x), labels)
    return (augment(pipe, x), labels, mixed.partner_labels, mixed.lam)


def probe_batches(task, objective: Objective, pipe: AugmentationPipeline, hyper: Hyper) -> list[tuple]:
    """The first ``probe_batches`` batches of the task in stored order."""
    n = len(task.train_x)
    out = []
    for idx in _batches(n, hyper.batch, np.arange(n))[: hyper.probe_batches]:
        out.append(_views(task.train_x[idx], task.train_y[idx], objective, pipe))
    return out


def _correlation(net, task, buf, objective, hyper, geometry, task_index, call) -> CorrelationReport:
    pipe = AugmentationPipeline(*geometry, seed=[hyper.seed, task_index, PROBE, call])
    grads = gradient_probe(net, probe_batches(task, objective, pipe, hyper), objective)
    samples, _, _ = buf.contents()
    return correlation_report(net, samples, grads, hyper.eps_th)


def train_task(
    net: Network,
    task,
    buf: ReplayBuffer,
    objective: Objective,
    schedule: FreezeSchedule | None,
    hyper: Hyper,
    *,
    geometry: tuple[int, int, int],
    task_index: int = 0,
    analyze: bool = True,
    epoch_callback: Callable[[Network, int, FreezeState | None], None] | None = None,
) -> TaskReport:
    """Train one task: correlation analysis against the replay buffer (from
    the second task on), then epochs of mixup-replay training with the freeze
    schedule applied, then admit the task into the buffer.

    ``geometry`` is the (height, width, channels) layout of a sample.
    """
    net.unfreeze_all()
    first = len(buf) == 0
    freezing = schedule is not None and schedule.enabled and not first
    pool = net.indices(Role.BACKBONE)

    correlation = None
    if not first and (analyze or freezing):
        correlation = _correlation(net, task, buf, objective, hyper, geometry, task_index, 0)

    state = None
    if freezing:
        if schedule.epochs != hyper.epochs:
            raise ValueError(f"schedule spans {schedule.epochs} epochs, training runs {hyper.epochs}")
        state = FreezeState(schedule, pool)
    per_epoch = state is not None and schedule.mode is FreezeMode.PER_EPOCH

    shuffle_rng = task_rng(hyper.seed, task_index, SHUFFLE)
    mix_rng = task_rng(hyper.seed, task_index, MIXUP)
    pipe = AugmentationPipeline(*geometry, seed=[hyper.seed, task_index, AUGMENT])
    dims = [(l.out_dim, l.in_dim) for l in net.layers]
    stop = net.stop_index(objective.stage)
    used = [i < stop for i in range(len(net.layers))]
    cost = CostReport(parameter_bytes=8 * net.parameter_count())
    losses = []
    n = len(task.train_x)

    for epoch in range(1, hyper.epochs + 1):
        if state is not None:
            ratios = None
            if epoch == 1:
                ratios = correlation.ratios
            elif per_epoch:
                ratios = _correlation(net, task, buf, objective, hyper, geometry, task_index, epoch).ratios
            apply_freeze(net, state, epoch, ratios)
        epoch_losses = []
        for idx in _batches(n, hyper.batch, shuffle_rng.permutation(n)):
            mixed = mix_batch(task.train_x[idx], buf, hyper.alpha, mix_rng)
            batch = _views(mixed.x, task.train_y[idx], objective, pipe, mixed)
            value, grads = objective(net, batch)
            sgd_step(net, grads, hyper.lr)
            step_batch = 2 * len(idx) if objective.uses_views else len(idx)
            cost.record(dims, step_batch, net.frozen_flags(), used)
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)))
        if epoch_callback is not None:
            epoch_callback(net, epoch, state)

    buffer_update(buf, task.train_x, task.task_id, task_rng(hyper.seed, task_index, BUFFER), task.train_y)
    cost.buffer_bytes = buf.nbytes

    trace = state.history if state is not None else [[] for _ in range(hyper.epochs)]
    overlap = None
    if per_epoch and len(state.rankings) >= 2:
        overlap = overlap_ratio([_implied(state, r) for r in state.rankings])
    return TaskReport(
        task.task_id,
        losses,
        [list(t) for t in trace],
        correlation,
        cost,
        dict(state.ranking) if state is not None else {},
        overlap,
    )


def _implied(state: FreezeState, ratios) -> list[int]:
    size = state.final_size()
    return sorted(sorted(state.pool, key=lambda l: (-ratios.get(l, 0.0), l))[:size])


@dataclass
class RunReport:
    accuracy: AccuracyMatrix
    tasks: list[TaskReport]
    net: Network
    final_accuracy: float
    forgetting: float | None


def build_network(cfg, input_dim: int, num_classes: int) -> Network:
    from .network import Activation

    w = cfg.width
    if cfg.objective == "simsiam":
        proj, pred = (w, w), (max(w // 2, 1), w)
    elif cfg.objective == "barlow_twins":
        proj, pred = (w, w), ()
    else:
        proj, pred = (w, num_classes), ()
    return Network.build(
        input_dim,
        backbone_layers=cfg.backbone_layers,
        width=w,
        projector_dims=proj,
        predictor_dims=pred,
        activation=Activation(cfg.activation),
        seed=cfg.seed,
    )


def hyper_from(cfg) -> Hyper:
    return Hyper(
        epochs=cfg.epochs,
        batch=cfg.batch,
        lr=cfg.lr,
        alpha=cfg.alpha,
        eps_th=cfg.eps_th,
        probe_batches=cfg.probe_batches,
        knn_k=cfg.knn_k,
        seed=cfg.seed,
    )


def run_stream(
    cfg,
    out_dir: str | Path | None = None,
    *,
    stream=None,
    evaluate: bool = True,
    freeze: bool = True,
    epoch_callback=None,
) -> RunReport:
    """Train every task in order, evaluating the accuracy matrix after each.

    When ``out_dir`` is given, all artifacts are written there once training
    has finished, so a failing run leaves no partial CSVs behind.
    """
    cfg.validate()
    if stream is None:
        stream = load_stream(cfg.dataset, cfg.seed)
    net = build_network(cfg, stream.dim, max(max(t.classes) for t in stream.tasks) + 1)
    buf = ReplayBuffer(cfg.buffer_capacity)
    objective = Objective(cfg.objective, cfg.bt_lambda)
    schedule = cfg.schedule() if freeze else None
    hyper = hyper_from(cfg)
    geometry = (stream.height, stream.width, stream.channels)
    mat = AccuracyMatrix(len(stream))
    reports = []
    for t, task in enumerate(stream.tasks):
        cb = None if epoch_callback is None else (lambda n, e, s, t=t: epoch_callback(t, n, e, s))
        reports.append(
            train_task(net, task, buf, objective, schedule, hyper, geometry=geometry, task_index=t, epoch_callback=cb)
        )
        if evaluate:
            mat.add_row(evaluate_all_tasks(net, stream.tasks, t + 1, cfg.knn_k))
        log.info("task %d done: final loss %.4f", task.task_id, reports[-1].losses[-1])
    final_acc = accuracy(mat) if evaluate else float("nan")
    report = RunReport(mat, reports, net, final_acc, forgetting(mat) if evaluate else None)
    if out_dir is not None:
        write_artifacts(report, cfg, out_dir, metrics=evaluate)
    return report


def write_artifacts(report: RunReport, cfg, out_dir: str | Path, *, metrics: bool = True):
    files = {
        rp.CONFIG_ECHO: serialize_config(cfg),
        rp.CORRELATION_CSV: rp.to_csv(rp.CORRELATION_HEADER, rp.correlation_rows(report.tasks)),
        rp.FREEZE_TRACE_CSV: rp.to_csv(rp.FREEZE_TRACE_HEADER, rp.freeze_trace_rows(report.tasks)),
        rp.COST_CSV: rp.to_csv(rp.COST_HEADER, rp.cost_rows(report.tasks)),
        rp.LOSSES_CSV: rp.to_csv(rp.LOSSES_HEADER, rp.losses_rows(report.tasks)),
    }
    if metrics:
        files[rp.METRICS_CSV] = rp.to_csv(rp.metrics_header(report.accuracy.tasks), rp.metrics_rows(report.accuracy))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with OutputLock(out):
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8")
        save_checkpoint(report.net, out / rp.CHECKPOINT)


class OutputLock:
    """Exclusive lockfile guarding an output directory."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"
        self.fd: int | None = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory {self.path.parent} is locked by another run") from None
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        self.path.unlink(missing_ok=True)
