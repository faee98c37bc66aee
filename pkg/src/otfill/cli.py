"""Command-line front end: train, sample, eval, ablate, trace-paths.

Configuration is a flat INI file with typed sections; unknown sections
or keys are rejected so typos fail loudly.  Exit codes: 0 on success,
1 for configuration or file problems, 2 for runtime numeric failures.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, replace

import numpy as np
import torch

from .coupling import CouplingError
from .data import (
    CorpusSpec,
    MaskSpec,
    apply_mask,
    generate_corpus,
    read_sequences,
    write_sequences,
)
from .fileio import atomic_write_text
from .metrics import MetricError, evaluate_corpus, evaluate_files
from .model import Denoiser, DenoiserConfig, load_checkpoint
from .sampling import SampleConfig, sample
from .training import TrainConfig, train

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _to_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    table = {"true": True, "on": True, "yes": True, "1": True,
             "false": False, "off": False, "no": False, "0": False}
    if lowered not in table:
        raise ValueError(f"not a boolean: {raw!r}")
    return table[lowered]


_SCHEMA = {
    "run": {"version": int, "seed": int, "out_dir": str},
    "corpus": {"kind": str, "vocab_size": int, "l_min": int, "l_max": int,
               "size": int, "path": str, "eval_size": int},
    "mask": {"mode": str, "k_min": int, "k_max": int, "max_span": int},
    "model": {"embed_dim": int, "num_layers": int, "num_heads": int,
              "context_length": int, "rotary_scale": float},
    "train": {"steps": int, "batch_size": int, "lr": float,
              "pos_weight": float, "zt_mode": str, "ot": _to_bool,
              "grad_clip": float, "epsilon": float, "log_every": int,
              "checkpoint_every": int},
    "sample": {"steps": int, "zt_mode": str, "anneal": _to_bool,
               "epsilon": float},
    "ablate": {"steps": int, "sample_steps": int},
}


@dataclass
class Settings:
    seed: int
    out_dir: str
    corpus: CorpusSpec
    corpus_path: str | None
    eval_size: int
    mask: MaskSpec
    model: DenoiserConfig
    train: TrainConfig
    sample: SampleConfig
    ablate_steps: int
    ablate_sample_steps: int


def _typed_section(cp: configparser.ConfigParser, name: str) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    schema = _SCHEMA[name]
    for key, raw in cp.items(name):
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}")
        try:
            out[key] = schema[key](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {name}.{key}: {e}") from e
    return out


def load_settings(path: str) -> Settings:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as f:
            cp.read_string(f.read(), source=path)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    unknown = set(cp.sections()) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")

    run = _typed_section(cp, "run")
    if run.get("version") != CONFIG_VERSION:
        raise ConfigError(
            f"run.version must be {CONFIG_VERSION}, got {run.get('version')}"
        )
    seed = run.get("seed", 0)
    out_dir = run.get("out_dir", "runs/default")

    cor = _typed_section(cp, "corpus")
    corpus_path = cor.pop("path", None)
    eval_size = cor.pop("eval_size", 0)
    if eval_size < 0:
        raise ConfigError("corpus.eval_size must be >= 0")
    try:
        corpus = CorpusSpec(seed=seed, **cor)
        mask = MaskSpec(**_typed_section(cp, "mask"))
        model = DenoiserConfig(vocab_size=corpus.vocab_size,
                               **_typed_section(cp, "model"))
        tr = _typed_section(cp, "train")
        if "ot" in tr:
            tr["ot_enabled"] = tr.pop("ot")
        train_cfg = TrainConfig(seed=seed, **tr)
        sa = _typed_section(cp, "sample")
        if "steps" in sa:
            sa["num_steps"] = sa.pop("steps")
        sample_cfg = SampleConfig(**sa)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e

    if corpus.l_max > model.context_length:
        raise ConfigError(
            f"corpus.l_max {corpus.l_max} exceeds model.context_length "
            f"{model.context_length}"
        )
    ab = _typed_section(cp, "ablate")
    return Settings(
        seed=seed, out_dir=out_dir, corpus=corpus, corpus_path=corpus_path,
        eval_size=eval_size, mask=mask, model=model, train=train_cfg,
        sample=sample_cfg,
        ablate_steps=ab.get("steps", train_cfg.steps),
        ablate_sample_steps=ab.get("sample_steps", sample_cfg.num_steps),
    )


def _load_corpus(settings: Settings) -> list[np.ndarray]:
    if settings.corpus_path:
        if not os.path.exists(settings.corpus_path):
            raise ConfigError(f"corpus file not found: {settings.corpus_path}")
        seqs = read_sequences(settings.corpus_path)
        limit = settings.corpus.vocab_size - 2
        for i, s in enumerate(seqs):
            if len(s) == 0:
                raise ConfigError(f"corpus line {i + 1} is empty")
            if len(s) > settings.model.context_length:
                raise ConfigError(f"corpus line {i + 1} exceeds context length")
            if np.any(s < 0) or np.any(s >= limit):
                raise ConfigError(f"corpus line {i + 1} has ids outside [0, {limit - 1}]")
        return seqs
    return generate_corpus(settings.corpus)


def _split_eval(seqs, eval_size: int):
    if eval_size >= len(seqs):
        raise ConfigError(
            f"eval_size {eval_size} leaves no training data (corpus has {len(seqs)})"
        )
    if eval_size == 0:
        return seqs, []
    return seqs[:-eval_size], seqs[-eval_size:]


def _validate_prompts(prompts, model_cfg: DenoiserConfig, source: str):
    limit = model_cfg.vocab_size - 2
    for i, p in enumerate(prompts):
        if len(p) > model_cfg.context_length:
            raise ConfigError(f"{source} line {i + 1} exceeds context length")
        if len(p) and (np.any(p < 0) or np.any(p >= limit)):
            raise ConfigError(
                f"{source} line {i + 1} has ids outside [0, {limit - 1}]"
            )


def _sample_corpus(model, prompts, scfg: SampleConfig, seed: int,
                   trace_dir: str | None = None):
    outs = []
    for i, p in enumerate(prompts):
        rng = np.random.default_rng([seed, i])
        res = sample(model, p, scfg, rng)
        outs.append(res.decoded)
        if trace_dir is not None:
            atomic_write_text(
                os.path.join(trace_dir, f"trace-{i:05d}.tsv"),
                "\n".join(res.trace.to_lines()) + "\n",
            )
    return outs


def cmd_train(args) -> int:
    settings = load_settings(args.config)
    out_dir = args.out_dir or settings.out_dir
    seqs = _load_corpus(settings)
    train_seqs, _ = _split_eval(seqs, settings.eval_size)
    torch.manual_seed(settings.seed)
    model = Denoiser(settings.model)
    reports = train(
        model, train_seqs, settings.mask, settings.train,
        log_path=os.path.join(out_dir, "metrics.log"),
        checkpoint_path=os.path.join(out_dir, "checkpoint.ckpt"),
    )
    last = reports[-1]
    print(
        f"trained {len(reports)} steps on {len(train_seqs)} sequences; "
        f"final total_loss={last.total_loss:.6f}"
    )
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint.ckpt')}")
    return 0


def cmd_sample(args) -> int:
    settings = load_settings(args.config)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    prompts = read_sequences(args.prompts)
    _validate_prompts(prompts, model.cfg, args.prompts)
    scfg = settings.sample
    if args.trace_dir:
        scfg = replace(scfg, trace=True)
        os.makedirs(args.trace_dir, exist_ok=True)
    outs = _sample_corpus(model, prompts, scfg, settings.seed, args.trace_dir)
    write_sequences(args.out, outs)
    print(f"sampled {len(outs)} sequences -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    for path in (args.generated, args.references, args.prompts):
        if not os.path.exists(path):
            raise ConfigError(f"input file not found: {path}")
    report = evaluate_files(args.generated, args.references, args.prompts)
    print(report.pretty())
    if args.out:
        atomic_write_text(args.out, report.to_line() + "\n")
    return 0


def cmd_ablate(args) -> int:
    settings = load_settings(args.config)
    out_dir = args.out_dir or settings.out_dir
    if settings.eval_size < 1:
        raise ConfigError("ablate needs corpus.eval_size >= 1")
    seqs = _load_corpus(settings)
    train_seqs, eval_refs = _split_eval(seqs, settings.eval_size)
    prompts = []
    for i, ref in enumerate(eval_refs):
        rng = np.random.default_rng([settings.seed, 2, i])
        keep = apply_mask(ref, settings.mask, rng)
        prompts.append(ref[keep])
    scfg = replace(settings.sample, num_steps=settings.ablate_sample_steps)
    rows = []
    for label, ot_on in (("ot=on", True), ("ot=off", False)):
        torch.manual_seed(settings.seed)
        model = Denoiser(settings.model)
        tcfg = replace(settings.train, ot_enabled=ot_on,
                       steps=settings.ablate_steps)
        train(model, train_seqs, settings.mask, tcfg)
        outs = _sample_corpus(model, prompts, scfg, settings.seed)
        report = evaluate_corpus(outs, eval_refs, prompts)
        rows.append((label, report))
        print(f"{label}: {report.to_line()}")
    lines = ["variant\t" + "\t".join(
        ["n", "success_rate", "bleu2", "bleu4", "nist2", "nist4",
         "distinct1", "distinct2"]
    )]
    for label, r in rows:
        lines.append(
            f"{label}\t{r.n_samples}\t{r.success_rate:.6f}\t{r.bleu2:.6f}"
            f"\t{r.bleu4:.6f}\t{r.nist2:.6f}\t{r.nist4:.6f}"
            f"\t{r.distinct1:.6f}\t{r.distinct2:.6f}"
        )
    path = os.path.join(out_dir, "ablation.tsv")
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_trace_paths(args) -> int:
    settings = load_settings(args.config)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    prompts = read_sequences(args.prompts)
    _validate_prompts(prompts, model.cfg, args.prompts)
    os.makedirs(args.out_dir, exist_ok=True)
    scfg = replace(settings.sample, trace=True)
    outs = _sample_corpus(model, prompts, scfg, settings.seed, args.out_dir)
    write_sequences(os.path.join(args.out_dir, "outputs.txt"), outs)
    print(f"wrote {len(outs)} traces to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="otfill",
        description="Flexible-length infilling with joint token/position diffusion",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a denoiser from a config file")
    t.add_argument("config")
    t.add_argument("--out-dir", default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate infills for a prompt file")
    s.add_argument("config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace-dir", default=None)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated sequences")
    e.add_argument("--generated", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--prompts", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare transport coupling on vs off")
    a.add_argument("config")
    a.add_argument("--out-dir", default=None)
    a.set_defaults(func=cmd_ablate)

    tr = sub.add_parser("trace-paths", help="sample with position traces")
    tr.add_argument("config")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--prompts", required=True)
    tr.add_argument("--out-dir", required=True)
    tr.set_defaults(func=cmd_trace_paths)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, MetricError, CouplingError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
