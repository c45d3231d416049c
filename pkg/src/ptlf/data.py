"""Task streams: a seeded synthetic generator and the CIFAR-10 binary reader."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetSpec

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    pass


@dataclass
class Task:
    task_id: int
    classes: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    height: int
    width: int
    channels: int

    @property
    def dim(self) -> int:
        return self.height * self.width * self.channels

    @property
    def num_classes(self) -> int:
        return sum(len(t.classes) for t in self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]


def _split_classes(n_classes: int, spec: DatasetSpec, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(n_classes)
    c = spec.classes_per_task
    return [sorted(int(k) for k in order[t * c : (t + 1) * c]) for t in range(spec.tasks)]


def generate_synthetic(spec: DatasetSpec, seed: int) -> TaskStream:
    """Each class is a random prototype image; samples add Gaussian noise."""
    rng = np.random.default_rng([seed, 0xDA7A])
    n_classes = spec.tasks * spec.classes_per_task
    protos = rng.uniform(0.0, 1.0, size=(n_classes, spec.dim))
    split = _split_classes(n_classes, spec, rng)
    tasks = []
    for t, classes in enumerate(split):
        parts = {}
        for name, per in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            xs, ys = [], []
            for c in classes:
                xs.append(protos[c] + rng.normal(0.0, spec.noise, size=(per, spec.dim)))
                ys.append(np.full(per, c, dtype=np.int64))
            parts[name] = (np.concatenate(xs), np.concatenate(ys))
        tasks.append(Task(t + 1, classes, *parts["train"], *parts["test"]))
    return TaskStream(tasks, spec.height, spec.width, spec.channels)


def read_cifar10_binary(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR-10 binary batch.

    Returns (images, labels) with images shaped (n, 32, 32, 3), values in
    [0, 1]; the file stores each record as a label byte then the R, G and B
    planes, each 32x32 row-major.
    """
    data = Path(path).read_bytes()
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        whole = len(data) // CIFAR_RECORD * CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(data)} is not a positive multiple of {CIFAR_RECORD} "
            f"(truncated record at byte offset {whole})"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        r = int(bad[0])
        raise DataFormatError(f"{path}: label {labels[r]} > 9 at byte offset {r * CIFAR_RECORD}")
    planes = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def downscale2x(images: np.ndarray) -> np.ndarray:
    n, h, w, c = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _take_per_class(x, y, classes, cap, rng):
    keep = []
    for c in classes:
        idx = np.nonzero(y == c)[0]
        if cap and idx.size > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        keep.append(idx)
    idx = np.concatenate(keep)
    return x[idx], y[idx]


def load_cifar10_stream(spec: DatasetSpec, seed: int) -> TaskStream:
    """Split CIFAR-10 into class-disjoint tasks from a directory of batches."""
    root = Path(spec.path)
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.is_file():
        raise FileNotFoundError(f"{root}: expected data_batch_*.bin and test_batch.bin")
    tx, ty = zip(*(read_cifar10_binary(f) for f in train_files))
    train_x, train_y = np.concatenate(tx), np.concatenate(ty)
    test_x, test_y = read_cifar10_binary(test_file)
    side = CIFAR_SIDE
    if spec.downscale:
        train_x, test_x = downscale2x(train_x), downscale2x(test_x)
        side //= 2
    train_x = train_x.reshape(len(train_x), -1)
    test_x = test_x.reshape(len(test_x), -1)
    rng = np.random.default_rng([seed, 0xC1FA])
    tasks = []
    for t, classes in enumerate(_split_classes(10, spec, rng)):
        trx, tr_y = _take_per_class(train_x, train_y, classes, spec.train_per_class, rng)
        tex, te_y = _take_per_class(test_x, test_y, classes, spec.test_per_class, rng)
        tasks.append(Task(t + 1, classes, trx, tr_y, tex, te_y))
    return TaskStream(tasks, side, side, 3)


def load_stream(spec: DatasetSpec, seed: int) -> TaskStream:
    if spec.kind == "synthetic":
        return generate_synthetic(spec, seed)
    return load_cifar10_stream(spec, seed)
