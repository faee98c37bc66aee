"""Joint training: score entropy on tokens plus velocity regression.

Every step draws clean samples, couples them to freshly drawn limiting
positions (or pulls couplings from a precomputed cache), corrupts the
token side at a uniformly random time, and regresses both heads at
once.  Prompt slots are exempt from corruption; coupler-designated pad
slots are corruptible like any response content so the model learns to
emit PAD where the sequence ends.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .coupling import (
    CouplingPlan,
    SlotClass,
    build_coupling,
    padded_classes,
    scale_targets,
)
from .data import CouplingCacheEntry, MaskSpec, apply_mask, draw_limit_positions
from .diffusion import NoiseSchedule, corrupt
from .fileio import atomic_write_text
from .model import Denoiser, save_checkpoint
from .positions import PositionVector, ground_positions, interpolate

_PROMPT = int(SlotClass.PROMPT)
_RESPONSE = int(SlotClass.RESPONSE)

ZT_MODES = ("random", "uniform")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    pos_weight: float = 10.0
    zt_mode: str = "random"
    ot_enabled: bool = True
    epsilon: float = 1e-3
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 saves only the final state

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError(f"learning rate {self.lr} must be positive")
        if self.pos_weight < 0:
            raise ValueError(f"position weight {self.pos_weight} must be >= 0")
        if self.zt_mode not in ZT_MODES:
            raise ValueError(f"unknown zt_mode {self.zt_mode!r}")


@dataclass
class TrainStepReport:
    step: int
    token_loss: float
    position_loss: float
    total_loss: float
    masked_fraction: float
    wall_ms: float

    def log_line(self) -> str:
        return (
            f"step={self.step} token_loss={self.token_loss:.6f} "
            f"position_loss={self.position_loss:.6f} "
            f"total_loss={self.total_loss:.6f} "
            f"masked_fraction={self.masked_fraction:.4f} "
            f"wall_ms={self.wall_ms:.2f}"
        )


def batched_score_entropy(scores, x_t, x0, ratios, mask_id: int) -> torch.Tensor:
    """Per-sample mean over masked slots, then mean over the batch.

    Samples with nothing masked contribute zero.  Gradients only touch
    rows gathered at masked slots, so zero scores elsewhere cannot leak
    NaNs through the backward pass.
    """
    B, L, V = scores.shape
    masked = x_t == mask_id
    flat = masked.view(-1)
    if not bool(flat.any()):
        return scores.sum() * 0.0
    s = scores.view(-1, V)[flat]
    clean = x0.view(-1)[flat]
    r = ratios[:, None].expand(B, L).reshape(-1)[flat]
    per = (s.sum(-1) - s[:, mask_id]) - r * torch.log(
        s.gather(-1, clean[:, None]).squeeze(-1)
    )
    sample_of = (
        torch.arange(B, device=scores.device).repeat_interleave(L)[flat]
    )
    sums = torch.zeros(B, dtype=per.dtype, device=per.device)
    sums.index_add_(0, sample_of, per)
    counts = masked.sum(-1).clamp(min=1)
    return (sums / counts).mean()


@dataclass
class _PreparedSample:
    x_t: np.ndarray
    x0_slots: np.ndarray
    z_t: np.ndarray
    target_v: np.ndarray
    type_ids: np.ndarray
    t: float
    n_masked: int


class Trainer:
    def __init__(self, model: Denoiser, cfg: TrainConfig,
                 rng: np.random.Generator | None = None):
        self.model = model
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.epsilon)
        self.opt = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, betas=cfg.betas,
            weight_decay=cfg.weight_decay,
        )
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.couplings_computed = 0

    def _random_matching(self, z0, classes0, zT: PositionVector):
        """Ablation path: class-respecting but uniformly random pairing."""
        l, L = len(z0), len(zT)
        scaled = scale_targets(z0, l, L)
        match, classes = [], []
        tgt_used = []
        for cls in (_PROMPT, _RESPONSE):
            src = np.flatnonzero(classes0 == cls)
            tgt = np.flatnonzero(zT.classes == cls)
            pick = self.rng.permutation(len(tgt))[:len(src)]
            for s, t in zip(src.tolist(), tgt[pick].tolist()):
                match.append((s, t))
                classes.append(SlotClass(cls))
                tgt_used.append(t)
        costs = [float(abs(scaled[s] - zT.values[t])) for s, t in match]
        pads = sorted(set(range(L)) - set(tgt_used))
        plan = CouplingPlan(match, pads, float(sum(costs)), classes, costs)
        padded_z0 = zT.values * (l / L)
        for s, t in match:
            padded_z0[t] = z0[s]
        return plan, padded_z0

    def prepare_sample(self, x0: np.ndarray, prompt_mask: np.ndarray,
                       entry: CouplingCacheEntry | None = None) -> _PreparedSample:
        L = self.model.cfg.context_length
        mask_id = self.model.cfg.mask_id
        pad_id = self.model.cfg.pad_id
        x0 = np.asarray(x0, dtype=np.int64)
        prompt_mask = np.asarray(prompt_mask, dtype=bool)
        l = len(x0)
        classes0 = np.where(prompt_mask, _PROMPT, _RESPONSE)

        if entry is not None:
            zT, plan, padded_z0 = entry.zT, entry.plan, entry.padded_z0
        else:
            z0 = ground_positions(l, L)
            zT = draw_limit_positions(L, int(prompt_mask.sum()),
                                      self.cfg.zt_mode, self.rng)
            if self.cfg.ot_enabled:
                plan, padded_z0 = build_coupling(z0, classes0, zT.values, zT.classes)
                self.couplings_computed += 1
            else:
                plan, padded_z0 = self._random_matching(z0, classes0, zT)

        slot_classes = padded_classes(plan, zT.classes)
        x0_slots = np.full(L, pad_id, dtype=np.int64)
        for s, t in plan.match:
            x0_slots[t] = x0[s]

        t = float(self.rng.uniform(0.0, 1.0))
        exempt = slot_classes == _PROMPT
        x_t = corrupt(x0_slots, t, self.schedule, self.rng, mask_id, exempt=exempt)
        z_t = interpolate(padded_z0, zT.values, t)
        type_ids = (slot_classes != _PROMPT).astype(np.int64)
        return _PreparedSample(
            x_t=x_t, x0_slots=x0_slots, z_t=z_t,
            target_v=padded_z0 - zT.values, type_ids=type_ids, t=t,
            n_masked=int((x_t == mask_id).sum()),
        )

    def step(self, batch: list[tuple[np.ndarray, np.ndarray]],
             entries: list[CouplingCacheEntry] | None = None) -> TrainStepReport:
        t_start = time.perf_counter()
        cfg = self.cfg
        mask_id = self.model.cfg.mask_id
        prepared = [
            self.prepare_sample(x0, pm, entries[i] if entries else None)
            for i, (x0, pm) in enumerate(batch)
        ]
        dt = next(self.model.parameters()).dtype
        tokens = torch.as_tensor(np.stack([p.x_t for p in prepared]))
        clean = torch.as_tensor(np.stack([p.x0_slots for p in prepared]))
        z_t = torch.as_tensor(np.stack([p.z_t for p in prepared]), dtype=dt)
        target_v = torch.as_tensor(np.stack([p.target_v for p in prepared]), dtype=dt)
        types = torch.as_tensor(np.stack([p.type_ids for p in prepared]))
        times = torch.as_tensor([p.t for p in prepared], dtype=dt)
        ratios = torch.as_tensor(
            [self.schedule.ratio(p.t) for p in prepared], dtype=dt
        )

        scores, vel = self.model(tokens, z_t, times, types)
        token_loss = batched_score_entropy(scores, tokens, clean, ratios, mask_id)
        diff = vel - target_v
        pos_loss = (diff * diff).mean()
        if not bool(torch.isfinite(token_loss)) or not bool(torch.isfinite(pos_loss)):
            detail = ", ".join(
                f"sample {i}: t={p.t:.4f} masked={p.n_masked}"
                for i, p in enumerate(prepared)
            )
            raise RuntimeError(
                f"non-finite loss at step {self.step_count + 1} "
                f"(token={float(token_loss.detach())}, "
                f"position={float(pos_loss.detach())}); {detail}"
            )
        total = token_loss + cfg.pos_weight * pos_loss
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        self.step_count += 1

        token_f = float(token_loss.detach())
        pos_f = float(pos_loss.detach())
        L = self.model.cfg.context_length
        return TrainStepReport(
            step=self.step_count,
            token_loss=token_f,
            position_loss=pos_f,
            total_loss=token_f + cfg.pos_weight * pos_f,
            masked_fraction=sum(p.n_masked for p in prepared) / (len(prepared) * L),
            wall_ms=(time.perf_counter() - t_start) * 1e3,
        )


def train(
    model: Denoiser,
    sequences: list[np.ndarray],
    mask_spec: MaskSpec,
    cfg: TrainConfig,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    cache: list[CouplingCacheEntry] | None = None,
) -> list[TrainStepReport]:
    """Run the full loop; returns one report per step.

    With a cache the batches are read from it in order (wrapping), and
    no coupling is ever recomputed.  Logs and checkpoints are written
    atomically; the log keeps wall_ms as its last column so consumers
    can strip it when comparing runs.
    """
    trainer = Trainer(model, cfg)
    reports: list[TrainStepReport] = []
    lines: list[str] = []
    for step in range(1, cfg.steps + 1):
        if cache is not None:
            take = [cache[((step - 1) * cfg.batch_size + j) % len(cache)]
                    for j in range(cfg.batch_size)]
            batch = [(e.x0, e.prompt_mask) for e in take]
            report = trainer.step(batch, take)
        else:
            idx = trainer.rng.integers(0, len(sequences), cfg.batch_size)
            batch = []
            for i in idx:
                x0 = sequences[int(i)]
                batch.append((x0, apply_mask(x0, mask_spec, trainer.rng)))
            report = trainer.step(batch)
        reports.append(report)
        if cfg.log_every > 0 and step % cfg.log_every == 0:
            lines.append(report.log_line())
        if checkpoint_path and cfg.checkpoint_every > 0 and (
            step % cfg.checkpoint_every == 0
        ):
            save_checkpoint(checkpoint_path, model,
                            extra={"step": step, "train": _cfg_dict(cfg)})
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model,
                        extra={"step": cfg.steps, "train": _cfg_dict(cfg)})
    if log_path:
        atomic_write_text(log_path, "\n".join(lines) + "\n" if lines else "")
    return reports


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
