import os
import subprocess
import sys

import numpy as np
import pytest

from otfill.cli import ConfigError, load_settings, main
from otfill.data import read_sequences

BASE_CONFIG = """\
[run]
version = 1
seed = 3
out_dir = {out}

[corpus]
kind = sorted-integers
vocab_size = 16
l_min = 3
l_max = 10
size = 40
eval_size = 8

[mask]
mode = random_keywords
k_min = 1
k_max = 4

[model]
embed_dim = 32
num_layers = 2
num_heads = 2
context_length = 16

[train]
steps = 6
batch_size = 2
lr = 3e-4
pos_weight = 10
zt_mode = random
ot = true
log_every = 2

[sample]
steps = 4
zt_mode = uniform
anneal = true

[ablate]
steps = 4
sample_steps = 2
"""


def write_config(tmp_path, text=None):
    cfg = tmp_path / "run.ini"
    out = tmp_path / "out"
    cfg.write_text((text or BASE_CONFIG).format(out=out))
    return str(cfg), str(out)


def test_load_settings_round_trip(tmp_path):
    cfg, out = write_config(tmp_path)
    s = load_settings(cfg)
    assert s.seed == 3
    assert s.corpus.vocab_size == 16
    assert s.model.vocab_size == 16
    assert s.train.steps == 6
    assert s.train.ot_enabled is True
    assert s.sample.num_steps == 4
    assert s.eval_size == 8


def test_load_settings_rejects_unknown_section(tmp_path):
    cfg, _ = write_config(tmp_path)
    with open(cfg, "a") as f:
        f.write("\n[mystery]\nx = 1\n")
    with pytest.raises(ConfigError, match="mystery"):
        load_settings(cfg)


def test_load_settings_rejects_unknown_key(tmp_path):
    cfg, _ = write_config(tmp_path)
    with open(cfg, "a") as f:
        f.write("\n[train]\nmomentum = 0.9\n")
    # configparser raises on the duplicate section; rewrite instead
    cfg2 = tmp_path / "run2.ini"
    cfg2.write_text(BASE_CONFIG.format(out=tmp_path / "o").replace(
        "steps = 6", "steps = 6\nmomentum = 0.9"
    ))
    with pytest.raises(ConfigError, match="train.momentum"):
        load_settings(str(cfg2))


def test_load_settings_rejects_bad_value_and_version(tmp_path):
    bad_value = BASE_CONFIG.replace("lr = 3e-4", "lr = fast")
    cfg = tmp_path / "bad.ini"
    cfg.write_text(bad_value.format(out=tmp_path / "o"))
    with pytest.raises(ConfigError, match="train.lr"):
        load_settings(str(cfg))
    bad_version = BASE_CONFIG.replace("version = 1", "version = 9")
    cfg.write_text(bad_version.format(out=tmp_path / "o"))
    with pytest.raises(ConfigError, match="version"):
        load_settings(str(cfg))


def test_load_settings_rejects_oversized_lengths(tmp_path):
    text = BASE_CONFIG.replace("l_max = 10", "l_max = 14").replace(
        "context_length = 16", "context_length = 12"
    )
    cfg = tmp_path / "big.ini"
    cfg.write_text(text.format(out=tmp_path / "o"))
    with pytest.raises(ConfigError, match="l_max"):
        load_settings(str(cfg))


def test_missing_config_file_exits_1(capsys):
    assert main(["train", "/nonexistent/run.ini"]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_then_sample_then_eval(tmp_path, capsys):
    cfg, out = write_config(tmp_path)
    assert main(["train", cfg]) == 0
    assert os.path.exists(os.path.join(out, "checkpoint.ckpt"))
    with open(os.path.join(out, "metrics.log")) as f:
        log_lines = f.read().splitlines()
    assert len(log_lines) == 3  # steps 2, 4, 6

    prompts = tmp_path / "prompts.txt"
    prompts.write_text("1 5\n\n2 7 9\n")
    gen = str(tmp_path / "gen.txt")
    code = main([
        "sample", cfg, "--checkpoint", os.path.join(out, "checkpoint.ckpt"),
        "--prompts", str(prompts), "--out", gen,
    ])
    assert code == 0
    outs = read_sequences(gen)
    assert len(outs) == 3

    refs = tmp_path / "refs.txt"
    refs.write_text("1 3 5\n2 4\n2 7 9 11\n")
    code = main([
        "eval", "--generated", gen, "--references", str(refs),
        "--prompts", str(prompts), "--out", str(tmp_path / "report.txt"),
    ])
    assert code == 0
    captured = capsys.readouterr()
    assert "BLEU-2" in captured.out
    with open(tmp_path / "report.txt") as f:
        assert f.read().startswith("n=3 ")


def test_sample_missing_checkpoint_exits_1(tmp_path, capsys):
    cfg, out = write_config(tmp_path)
    prompts = tmp_path / "p.txt"
    prompts.write_text("1\n")
    code = main([
        "sample", cfg, "--checkpoint", str(tmp_path / "nope.ckpt"),
        "--prompts", str(prompts), "--out", str(tmp_path / "g.txt"),
    ])
    assert code == 1
    assert "checkpoint" in capsys.readouterr().err


def test_sample_rejects_bad_prompt_ids(tmp_path, capsys):
    cfg, out = write_config(tmp_path)
    assert main(["train", cfg]) == 0
    prompts = tmp_path / "p.txt"
    prompts.write_text("5 99\n")  # 99 outside the vocab
    code = main([
        "sample", cfg, "--checkpoint", os.path.join(out, "checkpoint.ckpt"),
        "--prompts", str(prompts), "--out", str(tmp_path / "g.txt"),
    ])
    assert code == 1
    assert "line 1" in capsys.readouterr().err


def test_train_missing_corpus_path_exits_1_without_outputs(tmp_path, capsys):
    text = BASE_CONFIG.replace(
        "[mask]", "path = {missing}\n\n[mask]"
    )
    cfg = tmp_path / "run.ini"
    out = tmp_path / "out"
    cfg.write_text(text.format(out=out, missing=tmp_path / "corpus.txt"))
    assert main(["train", str(cfg)]) == 1
    assert not os.path.exists(os.path.join(str(out), "checkpoint.ckpt"))


def test_train_with_corpus_file(tmp_path):
    corpus = tmp_path / "corpus.txt"
    lines = []
    rng = np.random.default_rng(0)
    for _ in range(20):
        l = int(rng.integers(3, 9))
        vals = np.sort(rng.choice(14, size=l, replace=False))
        lines.append(" ".join(str(v) for v in vals))
    corpus.write_text("\n".join(lines) + "\n")
    text = BASE_CONFIG.replace("[mask]", f"path = {corpus}\n\n[mask]")
    cfg = tmp_path / "run.ini"
    out = tmp_path / "out"
    cfg.write_text(text.format(out=out))
    assert main(["train", str(cfg)]) == 0
    assert os.path.exists(os.path.join(str(out), "checkpoint.ckpt"))


def test_eval_line_count_mismatch_exits_1(tmp_path, capsys):
    gen = tmp_path / "g.txt"
    ref = tmp_path / "r.txt"
    pro = tmp_path / "p.txt"
    gen.write_text("1 2\n")
    ref.write_text("1 2\n3 4\n")
    pro.write_text("1\n")
    code = main(["eval", "--generated", str(gen), "--references", str(ref),
                 "--prompts", str(pro)])
    assert code == 1


def test_trace_paths_writes_tsvs(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", cfg]) == 0
    prompts = tmp_path / "p.txt"
    prompts.write_text("1 5\n3\n")
    tdir = str(tmp_path / "traces")
    code = main([
        "trace-paths", cfg, "--checkpoint", os.path.join(out, "checkpoint.ckpt"),
        "--prompts", str(prompts), "--out-dir", tdir,
    ])
    assert code == 0
    assert os.path.exists(os.path.join(tdir, "trace-00000.tsv"))
    assert os.path.exists(os.path.join(tdir, "trace-00001.tsv"))
    assert os.path.exists(os.path.join(tdir, "outputs.txt"))
    with open(os.path.join(tdir, "trace-00000.tsv")) as f:
        header = f.readline().strip()
        rows = f.read().splitlines()
    assert header == "step\tt\tslot\tclass\tposition\tis_masked"
    for row in rows:
        step, t, slot, cls, pos, masked = row.split("\t")
        float(t), float(pos)  # plain decimal columns, no wrapper reprs
        assert cls in ("prompt", "response")
        assert masked in ("0", "1")


def test_ablate_writes_comparison(tmp_path, capsys):
    cfg, out = write_config(tmp_path)
    assert main(["ablate", cfg]) == 0
    path = os.path.join(out, "ablation.tsv")
    with open(path) as f:
        lines = f.read().splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("ot=on\t")
    assert lines[2].startswith("ot=off\t")


def test_usage_error_exits_1():
    assert main(["no-such-command"]) == 1
    assert main([]) == 1


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "otfill", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "trace-paths" in proc.stdout
