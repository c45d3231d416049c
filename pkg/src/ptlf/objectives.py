"""SSL losses with exact gradients, cross-entropy, and image augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .network import is_stopped, stopgrad

COSINE_EPS = 1e-8
STD_EPS = 1e-8
DEFAULT_BT_LAMBDA = 5e-3


@dataclass
class LossValue:
    value: float
    grads: tuple[np.ndarray, ...]


def _grad_or_zero(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.zeros_like(g) if is_stopped(x) else g


def sum_loss(x) -> LossValue:
    """Plain sum of entries; a stopped input contributes no gradient."""
    arr = np.asarray(x, dtype=np.float64)
    return LossValue(float(arr.sum()), (_grad_or_zero(x, np.ones_like(arr)),))


def _neg_cosine(p: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of -cos(p_b, z_b) and its gradient w.r.t. p."""
    b = p.shape[0]
    pn = np.maximum(np.linalg.norm(p, axis=1, keepdims=True), COSINE_EPS)
    zn = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), COSINE_EPS)
    ph = p / pn
    zh = z / zn
    cos = np.sum(ph * zh, axis=1, keepdims=True)
    # d cos / d p = (zh - cos * ph) / |p| when |p| > eps, zh / eps otherwise
    guarded = np.linalg.norm(p, axis=1, keepdims=True) <= COSINE_EPS
    dcos = np.where(guarded, zh, zh - cos * ph) / pn
    return float(-cos.mean()), -dcos / b


def simsiam_loss(p1, z1, p2, z2) -> LossValue:
    """Symmetrized negative cosine similarity with stop-gradient on z.

    Returns gradients for (p1, z1, p2, z2); the z gradients are exactly 0.
    """
    arrs = [np.asarray(a, dtype=np.float64) for a in (p1, z1, p2, z2)]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs) or len(shape) != 2 or shape[1] < 1:
        raise ValueError(f"simsiam_loss needs four equal batch x d matrices, got {[a.shape for a in arrs]}")
    p1, z1, p2, z2 = arrs
    d12, g1 = _neg_cosine(p1, stopgrad(z2))
    d21, g2 = _neg_cosine(p2, stopgrad(z1))
    zero = np.zeros(shape)
    return LossValue(0.5 * d12 + 0.5 * d21, (0.5 * g1, zero, 0.5 * g2, zero.copy()))


def _standardize(z: np.ndarray):
    mu = z.mean(axis=0)
    std = np.sqrt(((z - mu) ** 2).mean(axis=0))
    denom = np.maximum(std, STD_EPS)
    return (z - mu) / denom, denom, std > STD_EPS


def _standardize_backward(g: np.ndarray, zhat: np.ndarray, denom: np.ndarray, scaled: np.ndarray) -> np.ndarray:
    centered = g - g.mean(axis=0)
    proj = np.where(scaled, (g * zhat).mean(axis=0), 0.0)
    return (centered - zhat * proj) / denom


def barlow_twins_objective(c: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """Loss on a cross-correlation matrix and its gradient w.r.t. that matrix."""
    c = np.asarray(c, dtype=np.float64)
    diag = np.diag(c)
    off = c - np.diag(diag)
    value = float(np.sum((1.0 - diag) ** 2) + lam * np.sum(off * off))
    grad = 2.0 * lam * off
    grad[np.diag_indices_from(grad)] = -2.0 * (1.0 - diag)
    return value, grad


def barlow_twins_loss(z1, z2, lam: float = DEFAULT_BT_LAMBDA) -> LossValue:
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"barlow_twins_loss shape mismatch: {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError("barlow_twins_loss needs a batch of at least 2 samples")
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    h1, d1, s1 = _standardize(z1)
    h2, d2, s2 = _standardize(z2)
    c = h1.T @ h2 / b
    value, gc = barlow_twins_objective(c, lam)
    gh1 = h2 @ gc.T / b
    gh2 = h1 @ gc / b
    return LossValue(
        value,
        (_standardize_backward(gh1, h1, d1, s1), _standardize_backward(gh2, h2, d2, s2)),
    )


def cross_entropy(logits, labels, weights: np.ndarray | None = None) -> LossValue:
    """Mean softmax cross-entropy; optional per-sample weights (mixup)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range for {k} classes")
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(b)
    value = float(-(w * logp[rows, labels]).sum() / b)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad *= w[:, None] / b
    return LossValue(value, (grad,))


class AugKind(str, Enum):
    SHIFT_CROP = "shift_crop"
    FLIP = "flip"
    GAUSSIAN_NOISE = "gaussian_noise"
    CHANNEL_SCALE = "channel_scale"
    CUTOUT = "cutout"


@dataclass(frozen=True)
class AugOp:
    kind: AugKind
    probability: float
    magnitude: float = 0.0


DEFAULT_OPS = (
    AugOp(AugKind.SHIFT_CROP, 0.8, 2),
    AugOp(AugKind.FLIP, 0.5),
    AugOp(AugKind.GAUSSIAN_NOISE, 0.5, 0.05),
    AugOp(AugKind.CHANNEL_SCALE, 0.3, 0.2),
    AugOp(AugKind.CUTOUT, 0.3, 4),
)


@dataclass
class AugmentationPipeline:
    """Ops over flattened H x W x C samples, each applied with its probability."""

    height: int
    width: int
    channels: int
    ops: Sequence[AugOp] = DEFAULT_OPS
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    @property
    def dim(self) -> int:
        return self.height * self.width * self.channels

    def clone(self, seed: int) -> "AugmentationPipeline":
        return AugmentationPipeline(self.height, self.width, self.channels, self.ops, seed)


def _apply(op: AugOp, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w, c = img.shape
    if op.kind is AugKind.FLIP:
        return img[:, ::-1, :]
    if op.kind is AugKind.SHIFT_CROP:
        m = int(op.magnitude)
        dy, dx = rng.integers(-m, m + 1, size=2)
        # a shift past the border leaves an empty image
        dy, dx = int(np.clip(dy, -h, h)), int(np.clip(dx, -w, w))
        out = np.zeros_like(img)
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[yd, xd] = img[ys, xs]
        return out
    if op.kind is AugKind.GAUSSIAN_NOISE:
        return img + rng.normal(0.0, op.magnitude, size=img.shape)
    if op.kind is AugKind.CHANNEL_SCALE:
        return img * rng.uniform(1.0 - op.magnitude, 1.0 + op.magnitude, size=c)
    if op.kind is AugKind.CUTOUT:
        size = int(op.magnitude)
        y = rng.integers(0, max(h - size, 0) + 1)
        x = rng.integers(0, max(w - size, 0) + 1)
        out = img.copy()
        out[y : y + size, x : x + size, :] = 0.0
        return out
    raise ValueError(f"unknown augmentation {op.kind}")


def augment(pipe: AugmentationPipeline, x) -> np.ndarray:
    """Augment one flattened sample, or each row of a batch independently."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return np.stack([augment(pipe, row) for row in arr]) if len(arr) else arr.copy()
    if arr.size != pipe.dim:
        raise ValueError(f"sample has {arr.size} values, pipeline geometry needs {pipe.dim}")
    img = arr.reshape(pipe.height, pipe.width, pipe.channels)
    for op in pipe.ops:
        if op.probability > 0 and pipe.rng.random() < op.probability:
            img = _apply(op, img, pipe.rng)
    return np.ascontiguousarray(img).reshape(-1)
