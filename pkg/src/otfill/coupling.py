"""Exact sample-level transport coupling between ground-truth and limiting positions.

Each training sample owns l ground-truth slots and L >= l limiting slots.
Slots carry a class (prompt or response); matching never crosses class
boundaries.  Prompt slots are balanced by construction, so their optimal
coupling is plain sort-and-pair.  Response slots are unbalanced (sources
may be fewer than targets) and are solved with an order-preserving
dynamic program over the sorted arrays.  Targets left unmatched become
pad slots whose ground-truth position is pinned to the scaled limiting
value, which makes their linear path stationary in scaled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


class CouplingError(ValueError):
    """Raised when coupling inputs violate a size or class precondition."""


class SlotClass(IntEnum):
    PROMPT = 0
    RESPONSE = 1
    PAD = 2


_PROMPT, _RESPONSE, _PAD = 0, 1, 2  # plain ints for hot paths


@dataclass
class CouplingPlan:
    """Matching between source slots (ground truth) and target slots (limit).

    match pairs are (source_idx, target_idx) in the caller's index space,
    listed in ascending source order.  match_classes and match_costs run
    parallel to match.  pad_targets lists the unmatched target indices.
    """

    match: list[tuple[int, int]]
    pad_targets: list[int]
    total_cost: float
    match_classes: list[SlotClass] = field(default_factory=list)
    match_costs: list[float] = field(default_factory=list)

    def to_lines(self) -> list[str]:
        lines = ["# coupling-plan v1"]
        for (s, t), cls, c in zip(self.match, self.match_classes, self.match_costs):
            lines.append(f"pair {s} {t} {cls.name} {c!r}")
        for t in self.pad_targets:
            lines.append(f"pad {t}")
        lines.append(f"total {self.total_cost!r}")
        return lines

    @classmethod
    def from_lines(cls, lines: list[str]) -> "CouplingPlan":
        if not lines or lines[0].strip() != "# coupling-plan v1":
            raise CouplingError("unrecognized plan header")
        match, classes, costs, pads, total = [], [], [], [], 0.0
        for raw in lines[1:]:
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "pair":
                match.append((int(parts[1]), int(parts[2])))
                classes.append(SlotClass[parts[3]])
                costs.append(float(parts[4]))
            elif parts[0] == "pad":
                pads.append(int(parts[1]))
            elif parts[0] == "total":
                total = float(parts[1])
            else:
                raise CouplingError(f"unrecognized plan line: {raw!r}")
        return cls(match, pads, total, classes, costs)


def scale_targets(z0: np.ndarray, l: int, L: int) -> np.ndarray:
    """Map ground-truth positions into the limiting range by the factor L/l."""
    if l < 1:
        raise CouplingError("empty source sequence")
    if l > L:
        raise CouplingError(f"source length {l} exceeds capacity {L}")
    return np.asarray(z0, dtype=np.float64) * (L / l)


def _stable_order(values: np.ndarray) -> np.ndarray:
    # ties broken by original index, which is what makes plans deterministic
    return np.argsort(values, kind="stable")


def _monotone_assignment_np(s: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, float]:
    """Min-cost order-preserving injection of sorted s into sorted u.

    Suffix DP over |s| x (|u|+1) states: S[i][j] is the cost of matching
    s[i:] into u[j:].  Each row is a reversed running minimum of the
    match column c_ij + S[i+1][j+1], so a row costs one vector op.
    Reconstruction walks the rows left to right and takes the earliest
    target whose match cost equals the stored optimum, which yields the
    leftmost optimal assignment.  Equality is exact because both sides
    are the same floating-point expression.
    """
    m, n = len(s), len(u)
    if m == 0:
        return np.empty(0, dtype=np.int64), 0.0
    rows = np.empty((m + 1, n + 1))
    rows[m] = 0.0
    buf = np.empty(n + 1)
    for i in range(m - 1, -1, -1):
        buf[:n] = np.abs(s[i] - u) + rows[i + 1, 1:]
        buf[n] = np.inf
        rows[i] = np.minimum.accumulate(buf[::-1])[::-1]
    assign = np.empty(m, dtype=np.int64)
    j = 0
    for i in range(m):
        while np.abs(s[i] - u[j]) + rows[i + 1, j + 1] != rows[i, j]:
            j += 1
        assign[i] = j
        j += 1
    return assign, float(rows[0, 0])


if njit is not None:

    @njit(cache=True)
    def _monotone_assignment_fast(s, u):  # pragma: no cover - mirrored by _np
        m, n = len(s), len(u)
        assign = np.empty(m, np.int64)
        rows = np.empty((m + 1, n + 1))
        if m == 0:
            return assign, 0.0
        for j in range(n + 1):
            rows[m, j] = 0.0
        for i in range(m - 1, -1, -1):
            best = np.inf
            rows[i, n] = best
            for j in range(n - 1, -1, -1):
                c = abs(s[i] - u[j]) + rows[i + 1, j + 1]
                if c < best:
                    best = c
                rows[i, j] = best
        j = 0
        for i in range(m):
            while abs(s[i] - u[j]) + rows[i + 1, j + 1] != rows[i, j]:
                j += 1
            assign[i] = j
            j += 1
        return assign, rows[0, 0]

    def _monotone_assignment(s, u):
        assign, cost = _monotone_assignment_fast(
            np.ascontiguousarray(s), np.ascontiguousarray(u)
        )
        return assign, float(cost)

else:  # pragma: no cover
    _monotone_assignment = _monotone_assignment_np


def _finish_plan(sources, targets, src_idx, tgt_idx, n_targets) -> CouplingPlan:
    # pairs arrive in arbitrary order; emit them sorted by source index
    order = np.argsort(src_idx, kind="stable")
    src_idx = src_idx[order]
    tgt_idx = tgt_idx[order]
    costs_arr = np.abs(sources[src_idx] - targets[tgt_idx])
    match = list(zip(src_idx.tolist(), tgt_idx.tolist()))
    if len(src_idx) == n_targets:
        pads = []
    else:
        unused = np.ones(n_targets, dtype=bool)
        unused[tgt_idx] = False
        pads = np.flatnonzero(unused).tolist()
    return CouplingPlan(match, pads, float(costs_arr.sum()), [], costs_arr.tolist())


def couple_balanced(sources: np.ndarray, targets: np.ndarray) -> CouplingPlan:
    """Pair equal-size sets by sorted order, which is optimal in 1D."""
    sources = np.asarray(sources, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(sources) != len(targets):
        raise CouplingError(
            f"balanced coupling needs equal sizes, got {len(sources)} and {len(targets)}"
        )
    so = _stable_order(sources)
    to = _stable_order(targets)
    return _finish_plan(sources, targets, so, to, len(targets))


def couple_unbalanced(sources: np.ndarray, targets: np.ndarray) -> CouplingPlan:
    """Optimally inject sources into a larger target set; leftovers pad."""
    sources = np.asarray(sources, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    m, n = len(sources), len(targets)
    if m > n:
        raise CouplingError(f"{m} sources exceed {n} targets")
    so = _stable_order(sources)
    to = _stable_order(targets)
    assign, _ = _monotone_assignment(sources[so], targets[to])
    return _finish_plan(sources, targets, so, to[assign], n)


def build_coupling(
    z0: np.ndarray,
    classes0: np.ndarray,
    zT: np.ndarray,
    classesT: np.ndarray,
) -> tuple[CouplingPlan, np.ndarray]:
    """Couple a full sample and emit the padded ground-truth positions.

    Matching runs in scaled space (z0 * L/l) independently per class.
    Returns the plan in original index space plus padded_z0 of length L:
    matched target slots take the source value, unmatched slots take
    zT * l/L so the pad path stays put after scaling.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    zT = np.asarray(zT, dtype=np.float64)
    classes0 = np.asarray(classes0, dtype=np.int64)
    classesT = np.asarray(classesT, dtype=np.int64)
    l, L = len(z0), len(zT)
    if len(classes0) != l or len(classesT) != L:
        raise CouplingError("class arrays must align with position arrays")
    if np.any(classes0 == _PAD) or np.any(classesT == _PAD):
        raise CouplingError("pad class is assigned by the coupler, not the caller")
    scaled = scale_targets(z0, l, L)

    is_prompt0 = classes0 == _PROMPT
    is_promptT = classesT == _PROMPT
    src_prompt = np.flatnonzero(is_prompt0)
    tgt_prompt = np.flatnonzero(is_promptT)
    src_resp = np.flatnonzero(~is_prompt0)
    tgt_resp = np.flatnonzero(~is_promptT)
    if len(src_prompt) != len(tgt_prompt):
        raise CouplingError(
            f"prompt slots unbalanced: {len(src_prompt)} sources, {len(tgt_prompt)} targets"
        )
    if len(src_resp) > len(tgt_resp):
        raise CouplingError(
            f"response sources {len(src_resp)} exceed targets {len(tgt_resp)}"
        )

    # same primitives as couple_balanced / couple_unbalanced, inlined to
    # stay inside the precompute throughput budget
    src_p = src_prompt[_stable_order(scaled[src_prompt])]
    tgt_p = tgt_prompt[_stable_order(zT[tgt_prompt])]
    so_r = _stable_order(scaled[src_resp])
    to_r = _stable_order(zT[tgt_resp])
    assign, _ = _monotone_assignment(scaled[src_resp][so_r], zT[tgt_resp][to_r])
    src_r = src_resp[so_r]
    tgt_r = tgt_resp[to_r[assign]]
    unused = np.ones(len(tgt_resp), dtype=bool)
    unused[to_r[assign]] = False
    pads = tgt_resp[unused].tolist()

    src_all = np.concatenate([src_p, src_r])
    tgt_all = np.concatenate([tgt_p, tgt_r])
    prompt_flags = np.arange(len(src_all)) < len(src_p)
    cost_all = np.abs(scaled[src_all] - zT[tgt_all])
    order = np.argsort(src_all, kind="stable")
    match = list(zip(src_all[order].tolist(), tgt_all[order].tolist()))
    classes = [SlotClass.PROMPT if f else SlotClass.RESPONSE
               for f in prompt_flags[order].tolist()]
    costs = cost_all[order].tolist()

    plan = CouplingPlan(match, pads, float(cost_all.sum()), classes, costs)
    padded_z0 = zT * (l / L)
    padded_z0[tgt_all] = z0[src_all]
    return plan, padded_z0


def padded_classes(plan: CouplingPlan, classesT: np.ndarray) -> np.ndarray:
    """Target-side classes with coupler-designated pads marked PAD."""
    out = np.asarray(classesT, dtype=np.int64).copy()
    out[plan.pad_targets] = SlotClass.PAD
    return out
