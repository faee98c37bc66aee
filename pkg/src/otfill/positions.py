"""Continuous position fields over token slots.

Ground-truth positions are an evenly spaced grid whose extent encodes
sequence length; limiting positions are either uniform noise or a fixed
grid.  The forward process is linear interpolation between the two and
the model predicts the constant velocity that points from limit back to
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import CouplingError, SlotClass


@dataclass
class PositionVector:
    """Positions plus the per-slot class labels they belong to."""

    values: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def ground_positions(l: int, L: int) -> np.ndarray:
    """Evenly spaced grid on [-l/L, l/L]; a single token sits at 0."""
    if l < 1:
        raise CouplingError("empty sequence has no positions")
    if l > L:
        raise CouplingError(f"length {l} exceeds capacity {L}")
    if l == 1:
        return np.zeros(1)
    return np.linspace(-l / L, l / L, l)


def random_limit_positions(L: int, n_prompt: int, rng: np.random.Generator) -> PositionVector:
    """L iid uniform positions with a random subset flagged as prompt slots."""
    if not 0 <= n_prompt <= L:
        raise CouplingError(f"prompt count {n_prompt} outside [0, {L}]")
    values = rng.uniform(-1.0, 1.0, L)
    classes = np.full(L, SlotClass.RESPONSE, dtype=np.int64)
    classes[rng.choice(L, n_prompt, replace=False)] = SlotClass.PROMPT
    return PositionVector(values, classes)


def uniform_limit_positions(L: int, n_prompt: int) -> PositionVector:
    """Deterministic grids: prompt slots on one, response slots on another."""
    if not 0 <= n_prompt <= L:
        raise CouplingError(f"prompt count {n_prompt} outside [0, {L}]")
    values = np.empty(L)
    classes = np.full(L, SlotClass.RESPONSE, dtype=np.int64)
    if n_prompt:
        values[:n_prompt] = np.linspace(-1.0, 1.0, n_prompt) if n_prompt > 1 else [-1.0]
        classes[:n_prompt] = SlotClass.PROMPT
    n_resp = L - n_prompt
    if n_resp:
        values[n_prompt:] = np.linspace(-1.0, 1.0, n_resp) if n_resp > 1 else [-1.0]
    return PositionVector(values, classes)


def interpolate(z0, zT, t: float):
    """Linear path (1-t) z0 + t zT, valid for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise CouplingError(f"time {t} outside [0, 1]")
    return (1.0 - t) * z0 + t * zT


def position_loss(v_pred, z0, zT):
    """Mean squared error against the constant target velocity z0 - zT."""
    diff = v_pred - (z0 - zT)
    return (diff * diff).mean()


def euler_position_step(z: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    """One reverse Euler update, clamped to the valid position range."""
    if dt < 0:
        raise CouplingError(f"negative step size {dt}")
    return np.clip(z + dt * v, -1.0, 1.0)
