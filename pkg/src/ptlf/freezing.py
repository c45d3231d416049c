"""Progressive layer-freezing policy.

The freeze ratio follows an increasing cosine ramp over the epochs of a task;
each epoch the frozen set grows (never shrinks) to ``floor(k_n * L)``
backbone layers, choosing the most task-correlated unfrozen layers or, for
the ablation baseline, the lowest-indexed ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Mapping, Sequence

from .network import Network

log = logging.getLogger(__name__)

# absorbs cos() rounding so e.g. k_n * L == 3 - 1e-16 still counts as 3
_COUNT_SLACK = 1e-9


class FreezeMode(str, Enum):
    ONE_SHOT = "one_shot"
    PER_EPOCH = "per_epoch"


class Selection(str, Enum):
    TASK_CORRELATED = "task_correlated"
    ASCENDING_INDEX = "ascending_index"


@dataclass(frozen=True)
class FreezeSchedule:
    k_i: float = 0.0
    k_f: float = 0.4
    epochs: int = 20
    mode: FreezeMode = FreezeMode.ONE_SHOT
    selection: Selection = Selection.TASK_CORRELATED
    verbatim_cosine: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", FreezeMode(self.mode))
        object.__setattr__(self, "selection", Selection(self.selection))
        if not 0.0 <= self.k_i <= self.k_f <= 1.0:
            raise ValueError(f"need 0 <= k_i <= k_f <= 1, got k_i={self.k_i}, k_f={self.k_f}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    @property
    def enabled(self) -> bool:
        return self.k_f > 0.0


def ratio_at_epoch(s: FreezeSchedule, n: int) -> float:
    """Freeze ratio at epoch ``n`` in [0, N].

    Default is the ramp k_f + (k_i - k_f)(1 + cos(n pi / N)) / 2, which starts
    at k_i and ends at k_f.  ``verbatim_cosine`` swaps in
    k_i + (k_f - k_i)(1 + cos(n pi / N)) / 2, which runs the other way.
    """
    if not 0 <= n <= s.epochs:
        raise ValueError(f"epoch {n} outside [0, {s.epochs}]")
    if n == 0:
        return s.k_f if s.verbatim_cosine else s.k_i
    if n == s.epochs:
        return s.k_i if s.verbatim_cosine else s.k_f
    wave = 0.5 * (1.0 + math.cos(n * math.pi / s.epochs))
    if s.verbatim_cosine:
        return s.k_i + (s.k_f - s.k_i) * wave
    return s.k_f + (s.k_i - s.k_f) * wave


def frozen_count(s: FreezeSchedule, n: int, pool_size: int) -> int:
    return int(math.floor(ratio_at_epoch(s, n) * pool_size + _COUNT_SLACK))


def rank_layers(ratios: Mapping[int, float], selection: Selection) -> list[int]:
    """Layer ids in freezing priority order."""
    if Selection(selection) is Selection.ASCENDING_INDEX:
        return sorted(ratios)
    return sorted(ratios, key=lambda l: (-ratios[l], l))


def layers_to_freeze(
    ratios: Mapping[int, float],
    current_frozen: Sequence[int],
    target_count: int,
    selection: Selection = Selection.TASK_CORRELATED,
) -> list[int]:
    """New layer ids to add so that ``target_count`` layers end up frozen.

    ``ratios`` covers the freeze pool; ties go to the lower layer index.
    """
    frozen = set(current_frozen)
    if target_count < len(frozen):
        raise ValueError(f"target {target_count} below current frozen count {len(frozen)}")
    pool = len(ratios)
    if target_count > pool:
        log.warning("freeze target %d exceeds pool of %d layers; clamping", target_count, pool)
        target_count = pool
    candidates = [l for l in rank_layers(ratios, selection) if l not in frozen]
    return candidates[: target_count - len(frozen)]


@dataclass
class FreezeState:
    schedule: FreezeSchedule
    pool: list[int]
    frozen: list[int] = field(default_factory=list)
    history: list[list[int]] = field(default_factory=list)
    ranking: dict[int, float] = field(default_factory=dict)
    rankings: list[dict[int, float]] = field(default_factory=list)

    def final_size(self) -> int:
        return frozen_count(self.schedule, self.schedule.epochs, len(self.pool))

    def implied_final_selection(self, ratios: Mapping[int, float]) -> list[int]:
        extra = layers_to_freeze(
            {l: ratios.get(l, 0.0) for l in self.pool},
            self.frozen,
            max(self.final_size(), len(self.frozen)),
            self.schedule.selection,
        )
        return sorted(self.frozen + extra)


def apply_freeze(net: Network, state: FreezeState, epoch: int, ratios: Mapping[int, float] | None = None):
    """Grow the frozen set for ``epoch`` (1-based) and set the layer flags.

    In one-shot mode the ranking given before the first epoch is reused; in
    per-epoch mode a fresh ``ratios`` mapping may be supplied every epoch.
    """
    s = state.schedule
    if ratios is not None and (s.mode is FreezeMode.PER_EPOCH or not state.ranking):
        state.ranking = dict(ratios)
    if s.mode is FreezeMode.PER_EPOCH and ratios is not None:
        state.rankings.append(dict(ratios))
    ranking = state.ranking or {l: 0.0 for l in state.pool}
    target = frozen_count(s, epoch, len(state.pool))
    target = max(target, len(state.frozen))
    pool_ratios = {l: ranking.get(l, 0.0) for l in state.pool}
    state.frozen = state.frozen + layers_to_freeze(pool_ratios, state.frozen, target, s.selection)
    state.history.append(sorted(state.frozen))
    frozen = set(state.frozen)
    for idx in state.pool:
        net.layers[idx].frozen = idx in frozen


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def overlap_ratio(selections: Sequence[Sequence[int]]) -> float:
    """Mean pairwise Jaccard overlap between per-epoch layer selections."""
    if len(selections) < 2:
        raise ValueError("overlap_ratio needs at least two epochs of selections")
    pairs = list(combinations(selections, 2))
    return sum(jaccard(a, b) for a, b in pairs) / len(pairs)
