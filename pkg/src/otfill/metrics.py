"""Corpus metrics: infill success, BLEU, NIST, distinct n-grams.

All metrics work on token sequences (any hashable token type) and pair
candidate i with reference i.  BLEU is classical corpus BLEU without
smoothing; NIST weights matches by corpus information gain and applies
its own brevity factor.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .data import read_sequences

# NIST brevity exponent: the factor halves when the candidate is 2/3
# of the reference length, so beta = ln(0.5) / ln(1.5)^2
NIST_BETA = math.log(0.5) / math.log(1.5) ** 2


class MetricError(ValueError):
    """Raised on malformed metric inputs."""


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def success(candidate, prompt) -> bool:
    """True when the prompt appears in order inside the candidate."""
    it = iter(candidate)
    return all(any(tok == c for c in it) for tok in prompt)


def success_rate(candidates, prompts) -> float:
    if len(candidates) != len(prompts):
        raise MetricError("candidate and prompt counts differ")
    if not candidates:
        return 0.0
    return sum(success(c, p) for c, p in zip(candidates, prompts)) / len(candidates)


def bleu(candidates, references, max_n: int = 2) -> float:
    """Corpus BLEU on a 0-100 scale, no smoothing.

    Any n-gram order with zero clipped matches zeroes the whole score,
    as does an empty candidate corpus.
    """
    if len(candidates) != len(references):
        raise MetricError("candidate and reference counts differ")
    clipped = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc = _ngrams(cand, n)
            rc = _ngrams(ref, n)
            totals[n] += sum(cc.values())
            clipped[n] += sum(min(v, rc[g]) for g, v in cc.items())
    if c_len == 0:
        return 0.0
    if any(totals[n] == 0 or clipped[n] == 0 for n in range(1, max_n + 1)):
        return 0.0
    log_p = sum(math.log(clipped[n] / totals[n]) for n in range(1, max_n + 1))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def nist(candidates, references, max_n: int = 4) -> float:
    """NIST score: information-weighted matches with its brevity factor.

    Info(w1..wn) = log2(count(w1..w_{n-1}) / count(w1..wn)) with counts
    over the reference corpus; unigram parents use the total token
    count.  Matches clip per pair; each order divides by the candidate
    n-gram total.
    """
    if len(candidates) != len(references):
        raise MetricError("candidate and reference counts differ")
    counts: list[Counter] = [Counter() for _ in range(max_n + 1)]
    total_tokens = 0
    for ref in references:
        ref = list(ref)
        total_tokens += len(ref)
        for n in range(1, max_n + 1):
            counts[n].update(_ngrams(ref, n).elements())

    def info(gram) -> float:
        n = len(gram)
        child = counts[n][gram]
        parent = total_tokens if n == 1 else counts[n - 1][gram[:-1]]
        if child == 0 or parent == 0:
            return 0.0
        return math.log2(parent / child)

    c_len = r_len = 0
    gains = [0.0] * (max_n + 1)
    sys_totals = [0] * (max_n + 1)
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc = _ngrams(cand, n)
            rc = _ngrams(ref, n)
            sys_totals[n] += sum(cc.values())
            gains[n] += sum(min(v, rc[g]) * info(g) for g, v in cc.items())
    score = sum(
        gains[n] / sys_totals[n] for n in range(1, max_n + 1) if sys_totals[n] > 0
    )
    if c_len == 0 or r_len == 0:
        return 0.0
    ratio = min(c_len / r_len, 1.0)
    if ratio == 0.0:
        return 0.0
    brevity = math.exp(NIST_BETA * math.log(ratio) ** 2)
    return score * brevity


def distinct_n(sequences, n: int) -> float:
    """Unique n-grams over total n-grams across the corpus; 0 if none."""
    seen = set()
    total = 0
    for seq in sequences:
        seq = list(seq)
        for i in range(len(seq) - n + 1):
            seen.add(tuple(seq[i:i + n]))
            total += 1
    return len(seen) / total if total else 0.0


@dataclass
class EvalReport:
    n_samples: int
    success_rate: float
    bleu2: float
    bleu4: float
    nist2: float
    nist4: float
    distinct1: float
    distinct2: float

    def to_line(self) -> str:
        return (
            f"n={self.n_samples} success_rate={self.success_rate:.6f} "
            f"bleu2={self.bleu2:.6f} bleu4={self.bleu4:.6f} "
            f"nist2={self.nist2:.6f} nist4={self.nist4:.6f} "
            f"distinct1={self.distinct1:.6f} distinct2={self.distinct2:.6f}"
        )

    def pretty(self) -> str:
        return "\n".join([
            f"samples        {self.n_samples}",
            f"success rate   {self.success_rate:.4f}",
            f"BLEU-2         {self.bleu2:.3f}",
            f"BLEU-4         {self.bleu4:.3f}",
            f"NIST-2         {self.nist2:.3f}",
            f"NIST-4         {self.nist4:.3f}",
            f"distinct-1     {self.distinct1:.4f}",
            f"distinct-2     {self.distinct2:.4f}",
        ])


def evaluate_corpus(candidates, references, prompts) -> EvalReport:
    if not (len(candidates) == len(references) == len(prompts)):
        raise MetricError(
            f"size mismatch: {len(candidates)} candidates, "
            f"{len(references)} references, {len(prompts)} prompts"
        )
    cands = [list(c) for c in candidates]
    refs = [list(r) for r in references]
    return EvalReport(
        n_samples=len(cands),
        success_rate=success_rate(cands, [list(p) for p in prompts]),
        bleu2=bleu(cands, refs, max_n=2),
        bleu4=bleu(cands, refs, max_n=4),
        nist2=nist(cands, refs, max_n=2),
        nist4=nist(cands, refs, max_n=4),
        distinct1=distinct_n(cands, 1),
        distinct2=distinct_n(cands, 2),
    )


def evaluate_files(candidate_path: str, reference_path: str,
                   prompt_path: str) -> EvalReport:
    cands = [s.tolist() for s in read_sequences(candidate_path)]
    refs = [s.tolist() for s in read_sequences(reference_path)]
    prompts = [s.tolist() for s in read_sequences(prompt_path)]
    if not (len(cands) == len(refs) == len(prompts)):
        raise MetricError(
            f"line counts differ: {candidate_path} has {len(cands)}, "
            f"{reference_path} has {len(refs)}, {prompt_path} has {len(prompts)}"
        )
    return evaluate_corpus(cands, refs, prompts)
