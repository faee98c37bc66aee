"""Desk-scale corpora, prompt masking, and the coupling precompute cache.

Two synthetic corpora keep evaluation honest: sorted integer sequences
(order is checkable by eye) and a templated grammar whose sentences can
be re-parsed exactly.  Token ids live in [0, vocab-3]; the last two ids
are reserved for PAD and MASK.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import CouplingPlan, SlotClass, build_coupling
from .fileio import atomic_write_text
from .positions import (
    PositionVector,
    ground_positions,
    random_limit_positions,
    uniform_limit_positions,
)

_PROMPT_I = int(SlotClass.PROMPT)
_RESPONSE_I = int(SlotClass.RESPONSE)

CORPUS_KINDS = ("sorted-integers", "templated-grammar")
MASK_MODES = ("random_keywords", "block")

# grammar word classes as contiguous id ranges
_DET = range(0, 2)
_ADJ = range(2, 6)
_NOUN = range(6, 12)
_VERB = range(12, 16)
_ADV = range(16, 19)
_PREP = range(19, 21)
GRAMMAR_MIN_VOCAB = 21 + 2  # word ids plus PAD and MASK


@dataclass(frozen=True)
class CorpusSpec:
    kind: str = "sorted-integers"
    vocab_size: int = 32
    l_min: int = 4
    l_max: int = 16
    size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORPUS_KINDS:
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError(f"bad length range [{self.l_min}, {self.l_max}]")
        if self.size < 1:
            raise ValueError("corpus size must be positive")
        if self.kind == "sorted-integers" and self.l_max > self.vocab_size - 2:
            raise ValueError(
                f"cannot draw {self.l_max} distinct values from "
                f"{self.vocab_size - 2} token ids"
            )
        if self.kind == "templated-grammar" and self.vocab_size < GRAMMAR_MIN_VOCAB:
            raise ValueError(f"grammar needs vocab >= {GRAMMAR_MIN_VOCAB}")


def _grammar_sentence(rng: np.random.Generator) -> list[int]:
    def pick(r):
        return int(rng.integers(r.start, r.stop))

    def np_phrase():
        if rng.random() < 0.5:
            return [pick(_DET), pick(_NOUN)]
        return [pick(_DET), pick(_ADJ), pick(_NOUN)]

    sent = np_phrase() + [pick(_VERB)] + np_phrase()
    tail = rng.random()
    if tail < 1 / 3:
        sent.append(pick(_ADV))
    elif tail < 2 / 3:
        sent += [pick(_PREP)] + np_phrase()
    return sent


def parse_grammar(tokens) -> bool:
    """Recursive-descent check that a sequence belongs to the grammar."""
    toks = list(int(v) for v in tokens)
    pos = 0

    def at(r):
        return pos < len(toks) and toks[pos] in r

    def np_phrase():
        nonlocal pos
        if not at(_DET):
            return False
        pos += 1
        if at(_ADJ):
            pos += 1
        if not at(_NOUN):
            return False
        pos += 1
        return True

    if not np_phrase():
        return False
    if not at(_VERB):
        return False
    pos += 1
    if not np_phrase():
        return False
    if at(_ADV):
        pos += 1
    elif at(_PREP):
        pos += 1
        if not np_phrase():
            return False
    return pos == len(toks)


def generate_corpus(spec: CorpusSpec) -> list[np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    out: list[np.ndarray] = []
    if spec.kind == "sorted-integers":
        for _ in range(spec.size):
            l = int(rng.integers(spec.l_min, spec.l_max + 1))
            vals = rng.choice(spec.vocab_size - 2, size=l, replace=False)
            out.append(np.sort(vals).astype(np.int64))
        return out
    for _ in range(spec.size):
        for _attempt in range(1000):
            sent = _grammar_sentence(rng)
            if spec.l_min <= len(sent) <= spec.l_max:
                out.append(np.asarray(sent, dtype=np.int64))
                break
        else:
            raise ValueError(
                f"grammar produced no sentence with length in "
                f"[{spec.l_min}, {spec.l_max}]"
            )
    return out


@dataclass(frozen=True)
class MaskSpec:
    mode: str = "random_keywords"
    k_min: int = 1
    k_max: int = 6
    max_span: int = 32

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError(f"bad keyword range [{self.k_min}, {self.k_max}]")
        if self.max_span < 0:
            raise ValueError("max_span must be non-negative")


def apply_mask(x0: np.ndarray, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean prompt mask: True slots are kept, False slots regenerate."""
    l = len(x0)
    if l == 0:
        raise ValueError("cannot mask an empty sequence")
    keep = np.zeros(l, dtype=bool)
    if spec.mode == "random_keywords":
        k = int(rng.integers(spec.k_min, spec.k_max + 1))
        k = min(k, l)
        keep[rng.choice(l, k, replace=False)] = True
    else:
        b = int(rng.integers(0, min(spec.max_span, l) + 1))
        start = int(rng.integers(0, l - b + 1))
        keep[:] = True
        keep[start:start + b] = False
    return keep


@dataclass
class CouplingCacheEntry:
    """One precomputed training draw: sample, limit positions, plan."""

    x0: np.ndarray
    prompt_mask: np.ndarray
    zT: PositionVector
    plan: CouplingPlan
    padded_z0: np.ndarray


def draw_limit_positions(L: int, n_prompt: int, mode: str,
                         rng: np.random.Generator) -> PositionVector:
    if mode == "random":
        return random_limit_positions(L, n_prompt, rng)
    if mode == "uniform":
        return uniform_limit_positions(L, n_prompt)
    raise ValueError(f"unknown limit-position mode {mode!r}")


def precompute_couplings(
    batch: list[tuple[np.ndarray, np.ndarray]],
    L: int,
    zt_mode: str,
    seed: int,
) -> list[CouplingCacheEntry]:
    """Couple every (x0, prompt_mask) pair ahead of training.

    Randomness comes from one stream at a fixed rate of 2L draws per
    entry (values, then subset keys), so entry i is reproducible from
    (batch[i], seed, i) regardless of how many entries surround it.
    """
    rng = np.random.default_rng(seed)
    n = len(batch)
    if zt_mode == "random":
        # entry i owns draws[i]: L position draws then L subset keys
        draws = rng.random((n, 2 * L))
    elif zt_mode != "uniform":
        raise ValueError(f"unknown limit-position mode {zt_mode!r}")
    grids: dict[int, np.ndarray] = {}
    entries = []
    for i, (x0, prompt_mask) in enumerate(batch):
        l = len(x0)
        z0 = grids.get(l)
        if z0 is None:
            z0 = grids[l] = ground_positions(l, L)
        prompt_mask = np.asarray(prompt_mask, dtype=bool)
        n_prompt = int(prompt_mask.sum())
        classes0 = np.where(prompt_mask, _PROMPT_I, _RESPONSE_I)
        if zt_mode == "random":
            classes = np.full(L, _RESPONSE_I, dtype=np.int64)
            keys = draws[i, L:]
            classes[np.argsort(keys, kind="stable")[:n_prompt]] = _PROMPT_I
            zT = PositionVector(2.0 * draws[i, :L] - 1.0, classes)
        else:
            zT = uniform_limit_positions(L, n_prompt)
        plan, padded_z0 = build_coupling(z0, classes0, zT.values, zT.classes)
        entries.append(CouplingCacheEntry(
            np.asarray(x0, dtype=np.int64), prompt_mask, zT, plan, padded_z0,
        ))
    return entries


def cache_to_text(entries: list[CouplingCacheEntry]) -> str:
    lines = ["# coupling-cache v1", f"count {len(entries)}"]
    for i, e in enumerate(entries):
        lines.append(f"entry {i}")
        lines.append("x0 " + " ".join(str(int(v)) for v in e.x0))
        lines.append("prompt " + " ".join("1" if b else "0" for b in e.prompt_mask))
        lines.append("zt " + " ".join(repr(float(v)) for v in e.zT.values))
        lines.append("ztclass " + " ".join(str(int(c)) for c in e.zT.classes))
        lines.extend("| " + ln for ln in e.plan.to_lines())
        lines.append("padded " + " ".join(repr(float(v)) for v in e.padded_z0))
    return "\n".join(lines) + "\n"


def cache_from_text(text: str) -> list[CouplingCacheEntry]:
    lines = text.splitlines()
    if not lines or lines[0] != "# coupling-cache v1":
        raise ValueError("unrecognized cache header")
    entries: list[CouplingCacheEntry] = []
    fields: dict = {}
    plan_lines: list[str] = []

    def flush():
        if not fields:
            return
        entries.append(CouplingCacheEntry(
            x0=np.asarray(fields["x0"], dtype=np.int64),
            prompt_mask=np.asarray(fields["prompt"], dtype=bool),
            zT=PositionVector(
                np.asarray(fields["zt"]), np.asarray(fields["ztclass"], dtype=np.int64)
            ),
            plan=CouplingPlan.from_lines(plan_lines),
            padded_z0=np.asarray(fields["padded"]),
        ))

    for raw in lines[2:]:
        if raw.startswith("entry "):
            flush()
            fields, plan_lines = {}, []
        elif raw.startswith("| "):
            plan_lines.append(raw[2:])
        elif raw:
            key, _, rest = raw.partition(" ")
            vals = rest.split()
            if key in ("x0", "prompt", "ztclass"):
                fields[key] = [int(v) for v in vals]
            else:
                fields[key] = [float(v) for v in vals]
    flush()
    return entries


def write_cache(path: str, entries: list[CouplingCacheEntry]):
    atomic_write_text(path, cache_to_text(entries))


def read_cache(path: str) -> list[CouplingCacheEntry]:
    with open(path, "r", encoding="utf-8") as f:
        return cache_from_text(f.read())


def write_sequences(path: str, seqs: list[np.ndarray]):
    """One sequence per line, space-separated ids; empty line = empty."""
    atomic_write_text(
        path, "\n".join(" ".join(str(int(v)) for v in s) for s in seqs) + "\n"
    )


def read_sequences(path: str) -> list[np.ndarray]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f.read().splitlines():
            out.append(np.asarray([int(v) for v in line.split()], dtype=np.int64))
    return out
