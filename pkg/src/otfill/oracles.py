"""Independent reference computations used only by the test suite.

Nothing here shares code with the production paths on purpose: the
matcher enumerates permutations instead of running a DP, and the score
oracle is a closed form of the per-slot objective minimizer.
"""

from __future__ import annotations

import itertools

import numpy as np

from .coupling import SlotClass
from .diffusion import NoiseSchedule


def brute_force_matching(
    sources: np.ndarray,
    targets: np.ndarray,
    source_classes: np.ndarray,
    target_classes: np.ndarray,
) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive min-cost class-respecting matching (tiny instances only).

    Enumerates every injective assignment per class and keeps the global
    minimum, breaking ties toward the lexicographically smallest target
    tuple in sorted-source order so the result is unique.
    """
    sources = np.asarray(sources, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if max(len(sources), len(targets)) > 8:
        raise ValueError("brute force is capped at 8 slots per side")
    total = 0.0
    matching: list[tuple[int, int]] = []
    for cls in (SlotClass.PROMPT, SlotClass.RESPONSE):
        src = [i for i in range(len(sources)) if source_classes[i] == cls]
        tgt = [j for j in range(len(targets)) if target_classes[j] == cls]
        if not src:
            continue
        if len(src) > len(tgt):
            raise ValueError(f"class {cls.name} has {len(src)} sources, {len(tgt)} targets")
        src = sorted(src, key=lambda i: (sources[i], i))
        best_cost, best_pick = np.inf, None
        for pick in itertools.permutations(tgt, len(src)):
            cost = sum(abs(sources[i] - targets[j]) for i, j in zip(src, pick))
            key = tuple(targets[j] for j in pick)
            if cost < best_cost or (cost == best_cost and key < best_key):
                best_cost, best_pick, best_key = cost, pick, key
        total += best_cost
        matching.extend(zip(src, best_pick))
    return float(total), sorted(matching)


def optimal_scores(
    token_counts: np.ndarray, t: float, schedule: NoiseSchedule, mask_id: int
) -> np.ndarray:
    """Closed-form minimizer of the masked-slot objective for one slot.

    With clean-token distribution p(y), the expected penalty
    sum_y s[y] - r(t) E[log s[x0]] is minimized at s*[y] = r(t) p(y).
    The MASK entry is unconstrained by the objective and reported as 0.
    """
    counts = np.asarray(token_counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("need at least one observed token")
    p = counts / counts.sum()
    star = schedule.ratio(t) * p
    star[mask_id] = 0.0
    return star
