"""Replay-buffer input subspaces and gradient-projection task correlation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .linalg import frobenius_norm, rank_for_threshold, svd
from .network import GradientSet, Network, activate

log = logging.getLogger(__name__)

DEFAULT_EPS_TH = 0.95


@dataclass
class LayerSubspace:
    layer_id: int
    basis: np.ndarray  # m x k
    k: int
    eps_th: float

    @property
    def m(self) -> int:
        return self.basis.shape[0]


@dataclass
class LayerCorrelation:
    layer: int
    ratio: float
    grad_norm: float
    projected_norm: float
    k: int
    m: int


@dataclass
class CorrelationReport:
    layers: list[LayerCorrelation]

    @property
    def ratios(self) -> dict[int, float]:
        return {c.layer: c.ratio for c in self.layers}


def collect_representations(net: Network, samples) -> list[np.ndarray]:
    """Per backbone layer, the m x n matrix whose columns are that layer's
    inputs for each sample."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("collect_representations needs a non-empty sample matrix")
    reps = []
    for layer in net.backbone:
        reps.append(x.T.copy())
        x = forward_layer(layer, x)
    return reps


def forward_layer(layer, x: np.ndarray) -> np.ndarray:
    return activate(layer.activation, x @ layer.weight.T + layer.bias)


def build_bases(r, eps_th: float = DEFAULT_EPS_TH, layer_id: int = 0) -> LayerSubspace:
    r = np.asarray(r, dtype=np.float64)
    fro_sq = frobenius_norm(r) ** 2
    if fro_sq == 0.0:
        return LayerSubspace(layer_id, np.zeros((r.shape[0], 0)), 0, eps_th)
    res = svd(r, compute_v=False)
    k = rank_for_threshold(res.singular_values, float(np.sum(res.singular_values**2)), eps_th)
    return LayerSubspace(layer_id, res.U[:, :k].copy(), k, eps_th)


def project(grad: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """G B B' (rows of G projected onto span(B))."""
    return (grad @ basis) @ basis.T


def correlation_detail(grad, sub: LayerSubspace) -> LayerCorrelation:
    g = np.asarray(grad, dtype=np.float64)
    if g.shape[1] != sub.m:
        raise ValueError(f"gradient has {g.shape[1]} input columns, basis spans R^{sub.m}")
    gnorm = frobenius_norm(g)
    if gnorm == 0.0:
        log.warning("layer %d: zero gradient, correlation ratio set to 0", sub.layer_id)
        return LayerCorrelation(sub.layer_id, 0.0, 0.0, 0.0, sub.k, sub.m)
    pnorm = frobenius_norm(project(g, sub.basis)) if sub.k else 0.0
    ratio = min(max(pnorm / gnorm, 0.0), 1.0)
    return LayerCorrelation(sub.layer_id, ratio, gnorm, pnorm, sub.k, sub.m)


def correlation_ratio(grad, sub: LayerSubspace) -> float:
    return correlation_detail(grad, sub).ratio


def correlation_report(
    net: Network,
    samples,
    probe_grads: GradientSet,
    eps_th: float | Mapping[int, float] | Sequence[float] = DEFAULT_EPS_TH,
) -> CorrelationReport:
    """Correlation ratio of every backbone layer's probe gradient against the
    input subspace spanned by ``samples`` (the replay buffer contents)."""
    reps = collect_representations(net, samples)
    rows = []
    for layer_id, r in enumerate(reps):
        th = eps_th if isinstance(eps_th, float) else eps_th[layer_id]
        sub = build_bases(r, th, layer_id)
        rows.append(correlation_detail(probe_grads.weights[layer_id], sub))
    return CorrelationReport(rows)
