"""Reverse-time generation over joint token/position state.

Sampling starts from all-MASK tokens at limiting positions and walks t
from 1 to 0 in equal steps.  Each step runs the denoiser once, then
tau-leaps the tokens and Euler-steps the positions with the same step
size.  Prompt tokens are pinned to their input values throughout while
their positions move with everything else.  The final sequence reads
out by position order with PAD slots dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingError, SlotClass
from .data import draw_limit_positions
from .diffusion import (
    NoiseSchedule,
    TauLeapDiagnostics,
    fill_residual_masks,
    tau_leap_step,
)
from .model import Denoiser
from .positions import euler_position_step

_PROMPT = int(SlotClass.PROMPT)


@dataclass(frozen=True)
class SampleConfig:
    num_steps: int = 32
    zt_mode: str = "uniform"
    anneal: bool = True
    epsilon: float = 1e-3
    trace: bool = False

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("need at least one reverse step")
        if self.zt_mode not in ("random", "uniform"):
            raise ValueError(f"unknown zt_mode {self.zt_mode!r}")


@dataclass
class DiffusionState:
    tokens: np.ndarray
    positions: np.ndarray
    classes: np.ndarray
    t: float


@dataclass
class PathTrace:
    """Position/mask snapshots, one per time point, t strictly decreasing."""

    classes: np.ndarray
    steps: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    masked: list[np.ndarray] = field(default_factory=list)

    def snapshot(self, step: int, t: float, positions: np.ndarray,
                 masked: np.ndarray):
        self.steps.append(step)
        self.times.append(t)
        self.positions.append(positions.copy())
        self.masked.append(masked.copy())

    def to_lines(self) -> list[str]:
        lines = ["step\tt\tslot\tclass\tposition\tis_masked"]
        for step, t, pos, msk in zip(self.steps, self.times,
                                     self.positions, self.masked):
            for slot in range(len(pos)):
                cls = SlotClass(int(self.classes[slot])).name.lower()
                lines.append(
                    f"{step}\t{t!r}\t{slot}\t{cls}\t{float(pos[slot])!r}"
                    f"\t{int(msk[slot])}"
                )
        return lines


@dataclass
class SampleResult:
    tokens: np.ndarray
    positions: np.ndarray
    decoded: np.ndarray
    trace: PathTrace | None
    diagnostics: TauLeapDiagnostics


def init_state(prompt_tokens: np.ndarray, L: int, zt_mode: str,
               rng: np.random.Generator, mask_id: int) -> DiffusionState:
    """All-MASK state at t=1 with prompt tokens laid onto prompt slots.

    Prompt slots are ordered by their drawn position (ties by slot
    index), so reading them back in position order reproduces the
    prompt exactly.
    """
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
    l_p = len(prompt_tokens)
    if l_p > L:
        raise CouplingError(f"prompt length {l_p} exceeds capacity {L}")
    zT = draw_limit_positions(L, l_p, zt_mode, rng)
    tokens = np.full(L, mask_id, dtype=np.int64)
    if l_p:
        slots = np.flatnonzero(zT.classes == _PROMPT)
        order = np.argsort(zT.values[slots], kind="stable")
        tokens[slots[order]] = prompt_tokens
    return DiffusionState(tokens, zT.values.copy(), zT.classes.copy(), 1.0)


def decode(tokens: np.ndarray, positions: np.ndarray, pad_id: int) -> np.ndarray:
    """Read out by ascending position (ties by slot index), dropping PAD."""
    order = np.argsort(positions, kind="stable")
    out = np.asarray(tokens)[order]
    return out[out != pad_id]


def sample(
    model: Denoiser,
    prompt_tokens: np.ndarray,
    cfg: SampleConfig,
    rng: np.random.Generator,
) -> SampleResult:
    mcfg = model.cfg
    L, mask_id, pad_id = mcfg.context_length, mcfg.mask_id, mcfg.pad_id
    schedule = NoiseSchedule(cfg.epsilon)
    state = init_state(prompt_tokens, L, cfg.zt_mode, rng, mask_id)
    prompt_slots = np.flatnonzero(state.classes == _PROMPT)
    prompt_values = state.tokens[prompt_slots].copy()
    type_ids = (state.classes != _PROMPT).astype(np.int64)
    diag = TauLeapDiagnostics()
    trace = PathTrace(state.classes) if cfg.trace else None
    if trace is not None:
        trace.snapshot(0, 1.0, state.positions, state.tokens == mask_id)

    N = cfg.num_steps
    scores = None
    for k in range(N):
        t_k = (N - k) / N
        t_next = (N - k - 1) / N
        out = model.denoise(state.tokens, state.positions, t_k, type_ids)
        scores = out.scores
        tokens = tau_leap_step(
            scores, state.tokens, t_k, t_k - t_next, schedule, rng,
            mask_id, anneal=cfg.anneal, diag=diag,
        )
        tokens[prompt_slots] = prompt_values
        positions = euler_position_step(
            state.positions, out.velocities, t_k - t_next
        )
        state = DiffusionState(tokens, positions, state.classes, t_next)
        if trace is not None:
            trace.snapshot(k + 1, t_next, positions, tokens == mask_id)

    tokens = fill_residual_masks(state.tokens, scores, mask_id)
    tokens[prompt_slots] = prompt_values
    return SampleResult(
        tokens=tokens,
        positions=state.positions,
        decoded=decode(tokens, state.positions, pad_id),
        trace=trace,
        diagnostics=diag,
    )
