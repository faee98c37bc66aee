"""Absorbing-state token diffusion: corruption, objective, reverse updates.

The forward chain flips clean tokens to MASK and never back.  With total
noise sigma_bar(t) = -log(1 - (1 - eps) t) the marginal mask probability
is exactly (1 - eps) t, so corruption never needs the chain itself, just
one Bernoulli draw per slot.  The model predicts score ratios s[i][y]
approximating p_t(swap i to y) / p_t(keep), trained by score entropy and
consumed by tau-leaping on the way back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-linear total noise; eps keeps t=1 short of full absorption."""

    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon {self.epsilon} outside (0, 1)")

    def sigma_bar(self, t: float) -> float:
        self._check(t)
        return -math.log1p(-(1.0 - self.epsilon) * t)

    def mask_prob(self, t: float) -> float:
        self._check(t)
        return (1.0 - self.epsilon) * t

    def ratio(self, t: float) -> float:
        # exp(-sigma_bar) / (1 - exp(-sigma_bar)), the score target scale
        self._check(t)
        p = (1.0 - self.epsilon) * t
        if p == 0.0:
            return math.inf
        return (1.0 - p) / p

    def _check(self, t: float):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")


def corrupt(
    x0: np.ndarray,
    t: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mask_id: int,
    exempt: np.ndarray | None = None,
) -> np.ndarray:
    """Independently mask each non-exempt slot with probability mask_prob(t).

    exempt marks slots that must survive corruption (prompt slots during
    training).  The caller decides the policy; nothing here is exempt by
    default.
    """
    x0 = np.asarray(x0)
    if np.any(x0 == mask_id):
        raise ValueError("clean input already contains MASK tokens")
    p = schedule.mask_prob(t)
    hit = rng.random(len(x0)) < p
    if exempt is not None:
        hit &= ~np.asarray(exempt, dtype=bool)
    out = x0.copy()
    out[hit] = mask_id
    return out


def score_entropy_loss(scores, x_t, x0, t: float, schedule: NoiseSchedule,
                       mask_id: int) -> torch.Tensor:
    """Score entropy over masked slots, averaged per masked slot.

    Per masked slot i the penalty is sum_{y != MASK} s[i][y] minus
    r(t) log s[i][x0_i]; unmasked slots contribute nothing.  A zero
    score at the clean token yields an infinite loss on purpose.
    """
    scores = torch.as_tensor(scores)
    x_t = torch.as_tensor(np.asarray(x_t), dtype=torch.long)
    x0 = torch.as_tensor(np.asarray(x0), dtype=torch.long)
    masked = x_t == mask_id
    if not bool(masked.any()):
        return scores.sum() * 0.0
    s = scores[masked]
    clean = x0[masked]
    pos = s.sum(-1) - s[:, mask_id]
    neg = schedule.ratio(t) * torch.log(s.gather(-1, clean[:, None]).squeeze(-1))
    return (pos - neg).mean()


@dataclass
class TauLeapDiagnostics:
    """Counters surfaced by reverse token steps."""

    renormalized: int = 0
    unmasked: int = 0


def tau_leap_step(
    scores: np.ndarray,
    x_t: np.ndarray,
    t: float,
    dt: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mask_id: int,
    anneal: bool = False,
    diag: TauLeapDiagnostics | None = None,
) -> np.ndarray:
    """One reverse jump: each masked slot unmasks to y w.p. dsigma * s[y].

    If the jump probabilities sum past 1 they are renormalized and the
    event counted.  anneal collapses the unmask mass onto the argmax
    token (ties to the lowest id).  Unmasked slots never change, so the
    masked count is non-increasing.
    """
    if dt <= 0 or dt > t:
        raise ValueError(f"step size {dt} outside (0, {t}]")
    x_t = np.asarray(x_t)
    out = x_t.copy()
    masked = np.flatnonzero(x_t == mask_id)
    if len(masked) == 0:
        return out
    dsig = schedule.sigma_bar(t) - schedule.sigma_bar(t - dt)
    probs = dsig * np.asarray(scores, dtype=np.float64)[masked]
    probs[:, mask_id] = 0.0
    totals = probs.sum(axis=1)
    over = totals > 1.0
    if np.any(over):
        probs[over] /= totals[over, None]
        totals[over] = 1.0
        if diag is not None:
            diag.renormalized += int(over.sum())
    if anneal:
        best = np.argmax(probs, axis=1)
        collapsed = np.zeros_like(probs)
        collapsed[np.arange(len(masked)), best] = totals
        probs = collapsed
    u = rng.random(len(masked))
    cum = np.cumsum(probs, axis=1)
    for k, slot in enumerate(masked):
        if u[k] < totals[k]:
            out[slot] = int(np.searchsorted(cum[k], u[k], side="right"))
            if diag is not None:
                diag.unmasked += 1
    return out


def fill_residual_masks(x: np.ndarray, scores: np.ndarray, mask_id: int) -> np.ndarray:
    """Deterministically resolve leftover masks by per-slot score argmax.

    The MASK column is excluded; ties go to the lowest token id.
    """
    out = np.asarray(x).copy()
    left = np.flatnonzero(out == mask_id)
    if len(left):
        s = np.asarray(scores, dtype=np.float64)[left].copy()
        s[:, mask_id] = -np.inf
        out[left] = np.argmax(s, axis=1)
    return out
