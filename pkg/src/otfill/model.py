"""Bidirectional transformer denoiser over token/position pairs.

Order information enters only through rotary phases computed from the
continuous positions, so the network is equivariant under slot
permutations.  Time conditioning follows the adaptive layer-norm recipe:
a sinusoidal embedding of t modulates scale, shift and gate around each
block, with the modulation projections zero-initialized so the model
starts as an identity-ish map.  Two heads read the trunk: exp-activated
per-token score ratios (strictly positive) and a scalar velocity.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .fileio import atomic_write_bytes

CHECKPOINT_MAGIC = "otfill-checkpoint v1"


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int = 32
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    context_length: int = 64
    rotary_scale: float | None = None  # defaults to context_length
    rotary_base: float = 10000.0
    check_finite: bool = True

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab must hold at least one token plus PAD and MASK")
        if self.vocab_size > 64:
            raise ValueError("desk-scale vocab is capped at 64")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must divide evenly across heads")
        if (self.embed_dim // self.num_heads) % 2:
            raise ValueError("per-head dim must be even for rotary pairing")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 2

    @property
    def scale(self) -> float:
        return float(self.rotary_scale if self.rotary_scale is not None
                     else self.context_length)


@dataclass
class DenoiserOutput:
    scores: np.ndarray      # (L, vocab), strictly positive
    velocities: np.ndarray  # (L,)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _modulate(h, shift, scale):
    return h * (1 + scale[:, None, :]) + shift[:, None, :]


class RotaryAttention(nn.Module):
    """Multi-head attention with rotary phases from continuous positions."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.heads = cfg.num_heads
        self.head_dim = cfg.embed_dim // cfg.num_heads
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        inv = cfg.rotary_base ** (
            -torch.arange(0, self.head_dim, 2, dtype=torch.float64) / self.head_dim
        )
        self.register_buffer("inv_freq", inv, persistent=False)
        self.pos_scale = cfg.scale

    def _rotate(self, x, cos, sin):
        # x: (B, H, L, hd); pairs (even, odd) rotated by the slot's angle
        x1, x2 = x[..., 0::2], x[..., 1::2]
        return torch.stack(
            [x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1
        ).flatten(-2)

    def forward(self, h, positions):
        B, L, D = h.shape
        qkv = self.qkv(h).view(B, L, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        angles = positions[:, None, :, None] * self.pos_scale * \
            self.inv_freq.to(h.dtype)[None, None, None, :]
        cos, sin = torch.cos(angles), torch.sin(angles)
        q = self._rotate(q, cos, sin)
        k = self._rotate(k, cos, sin)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = RotaryAttention(cfg)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d)
        )
        self.ada = nn.Linear(d, 6 * d)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, h, positions, cond):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(cond).chunk(6, dim=-1)
        h = h + g1[:, None, :] * self.attn(_modulate(self.norm1(h), sh1, sc1), positions)
        h = h + g2[:, None, :] * self.mlp(_modulate(self.norm2(h), sh2, sc2))
        return h


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.type_emb = nn.Embedding(2, d)  # 0 prompt, 1 response (pads included)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False)
        self.ada_out = nn.Linear(d, 2 * d)
        nn.init.zeros_(self.ada_out.weight)
        nn.init.zeros_(self.ada_out.bias)
        self.score_head = nn.Linear(d, cfg.vocab_size)
        self.vel_head = nn.Linear(d, 1)

    def forward(self, tokens, positions, t, type_ids):
        """tokens (B,L) long, positions (B,L), t (B,), type_ids (B,L) long.

        Returns (scores (B,L,V) positive, velocities (B,L)).
        """
        h = self.tok_emb(tokens) + self.type_emb(type_ids)
        cond = self.time_mlp(
            sinusoidal_embedding(t.to(h.dtype), self.cfg.embed_dim)
        )
        cond = torch.nn.functional.silu(cond)
        for i, blk in enumerate(self.blocks):
            h = blk(h, positions.to(h.dtype), cond)
            if self.cfg.check_finite and not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after block {i}")
        sh, sc = self.ada_out(cond).chunk(2, dim=-1)
        h = _modulate(self.norm_out(h), sh, sc)
        scores = torch.exp(self.score_head(h))
        vel = self.vel_head(h).squeeze(-1)
        return scores, vel

    @torch.no_grad()
    def denoise(self, tokens: np.ndarray, positions: np.ndarray, t: float,
                type_ids: np.ndarray) -> DenoiserOutput:
        """Single-sequence numpy convenience wrapper for the sampler."""
        dev = next(self.parameters()).device
        dt = next(self.parameters()).dtype
        tk = torch.as_tensor(np.asarray(tokens), dtype=torch.long, device=dev)[None]
        ps = torch.as_tensor(np.asarray(positions), dtype=dt, device=dev)[None]
        ty = torch.as_tensor(np.asarray(type_ids), dtype=torch.long, device=dev)[None]
        tt = torch.full((1,), float(t), dtype=dt, device=dev)
        scores, vel = self.forward(tk, ps, tt, ty)
        return DenoiserOutput(
            scores[0].double().cpu().numpy(), vel[0].double().cpu().numpy()
        )


def save_checkpoint(path: str, model: Denoiser, extra: dict | None = None):
    """Deterministic binary: magic, JSON header, raw little-endian tensors."""
    state = model.state_dict()
    names = sorted(state)
    manifest = []
    blobs = []
    for name in names:
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
        blobs.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    header = {
        "config": asdict(model.cfg),
        "extra": extra or {},
        "tensors": manifest,
    }
    payload = (
        CHECKPOINT_MAGIC.encode() + b"\n"
        + json.dumps(header, sort_keys=True).encode() + b"\n"
        + b"".join(blobs)
    )
    atomic_write_bytes(path, payload)


def load_checkpoint(path: str) -> tuple[Denoiser, dict]:
    with open(path, "rb") as f:
        data = f.read()
    magic_end = data.index(b"\n")
    if data[:magic_end].decode() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a recognized checkpoint")
    header_end = data.index(b"\n", magic_end + 1)
    header = json.loads(data[magic_end + 1:header_end])
    cfg = DenoiserConfig(**header["config"])
    model = Denoiser(cfg)
    offset = header_end + 1
    state = {}
    for spec in header["tensors"]:
        arr_dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * arr_dt.itemsize
        arr = np.frombuffer(data[offset:offset + nbytes], dtype=arr_dt)
        offset += nbytes
        state[spec["name"]] = torch.from_numpy(
            arr.astype(arr_dt.newbyteorder("=")).reshape(spec["shape"]).copy()
        )
    model.load_state_dict(state)
    return model, header["extra"]
