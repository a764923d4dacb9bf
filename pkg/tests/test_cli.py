import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from rremoe import data
from rremoe.cli import dispatch, parse_config, parse_config_text
from rremoe.model import ConfigError, load_checkpoint

ROOT = Path(__file__).resolve().parents[1]
TOY_CFG = ROOT / "configs" / "toy.cfg"

SMALL_CFG = """
model.dense_layers = 1
model.rre_layers = 1
model.heads = 2
model.hidden = 8
model.ffn = 16
model.vocab = {vocab}
model.num_domains = {domains}
model.experts_per_domain = 2
model.max_seq_len = 16
adam.peak_lr = 1e-2
adam.warmup_steps = 2
adam.decay_steps = 10
train.batch_size = 4
"""


def run(argv, capsys):
    status = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, out, err


def test_rre_table_and_route(tmp_path, capsys):
    t = tmp_path / "t.bin"
    assert run(["rre", "table", "--domains", 2, "--layers", 1, "--experts", 3, "--vocab", 10, "--out", t], capsys)[0] == 0
    assert t.read_bytes()[:4] == b"RRET"
    status, out, _ = run(["rre", "route", "--table", t, "--domain", 1, "--layer", 0, "--token", 0], capsys)
    assert status == 0 and 3 <= int(out) < 6


def test_usage_errors(capsys):
    status, _, err = run(["rre", "table", "--domains", 2], capsys)
    assert status == 2 and "usage" in err
    status, _, err = run(["frobnicate"], capsys)
    assert status == 2 and "usage" in err
    proc = subprocess.run([sys.executable, "-m", "rremoe", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_config_errors_name_the_key(tmp_path, capsys):
    with pytest.raises(ConfigError, match="model.hiden"):
        parse_config_text(SMALL_CFG.format(vocab=32, domains=2) + "model.hiden = 3\n")
    with pytest.raises(ConfigError, match="adam.beta1"):
        parse_config_text(SMALL_CFG.format(vocab=32, domains=2) + "adam.beta1 = fast\n")
    with pytest.raises(ConfigError, match="model.rre_layers"):
        parse_config_text("model.dense_layers = 1\n")
    with pytest.raises(ConfigError, match="train.stages"):
        parse_config_text(SMALL_CFG.format(vocab=32, domains=2) + "train.stages = 0:5\n")
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL_CFG.format(vocab=32, domains=2) + "train.stepz = 3\n")
    status, _, err = run(["init", "--config", bad, "--out", tmp_path / "m"], capsys)
    assert status == 2 and "train.stepz" in err


def test_bundled_config_parses():
    cfg = parse_config(TOY_CFG)
    assert cfg.model.num_domains == 3 and cfg.steps == 500
    assert [s.domains for s in cfg.schedule.stages] == [(0, 1), (0, 1, 2)]
    assert cfg.pad_id == 29


def test_data_verbs(tmp_path, capsys):
    docs = tmp_path / "en.txt"
    docs.write_text("hello world\n\nsecond line here\n", encoding="utf-8")
    fmt = tmp_path / "en.jsonl"
    status, _, _ = run(["data", "format", "--input", docs, "--domain", 1, "--kind", "bilingual",
                        "--subtag", "en", "--vocab", 262, "--out", fmt], capsys)
    assert status == 0
    sp = data.SpecialTokens.reserve(262)
    first = fmt.read_text().splitlines()[0]
    assert f"[{sp.en}, 104, 101" in first and first.endswith(f"{sp.eot}]}}")

    packed = tmp_path / "packed.pgsi"
    status, out, _ = run(["data", "pack", "--input", fmt, "--len", 8, "--domains", 2, "--out", packed], capsys)
    total = 2 + len("hello world") + len("second line here") + 2
    assert status == 0 and out.startswith(f"{total // 8} instances")
    insts = data.read_instances(packed)
    assert all(len(i) == 8 and i.domain_id == 1 for i in insts)

    padded = tmp_path / "padded.pgsi"
    status, _, _ = run(["data", "pad", "--input", fmt, "--len", 16, "--vocab", 262, "--out", padded], capsys)
    insts = data.read_instances(padded)
    assert status == 0 and len(insts) == 2
    assert insts[0].token_ids[-1] == sp.pad and insts[1].token_ids[-1] != sp.pad

    status, out, _ = run(["data", "stats", "--input", padded, "--vocab", 262], capsys)
    assert "seq_len 16" in out and "instances 2" in out and "pad_tokens 3" in out

    status, _, err = run(["data", "format", "--input", docs, "--domain", 0, "--kind", "code",
                          "--vocab", 262, "--out", fmt], capsys)
    assert status == 1 and "sub-tag" in err


def test_commsim_verbs(tmp_path, capsys):
    status, out, _ = run(["commsim", "volume", "--devices", 8, "--groups", 4, "--tokens", 100000,
                          "--mode", "both"], capsys)
    rows = [line.split(",") for line in out.strip().splitlines()]
    assert status == 0 and rows[0] == ["method", "bytes_global", "bytes_grouped", "ratio"]
    assert float(rows[1][3]) == pytest.approx(4 / 7)
    assert abs(float(rows[2][3]) - 4 / 7) < 0.02 * 4 / 7

    hist = tmp_path / "hist.txt"
    hist.write_text("10\n20\n30\n40\n")
    status, out, _ = run(["commsim", "volume", "--devices", 8, "--groups", 4, "--hist", hist,
                          "--method", "analytic", "--mode", "grouped"], capsys)
    assert status == 0 and out.splitlines()[1].split(",")[1] == ""

    shards = tmp_path / "shards.txt"
    shards.write_text("3\n1\n1\n1\n")
    status, out, err = run(["commsim", "upload", "--shards", shards, "--limit", 2], capsys)
    assert status == 0 and "makespan 3.0" in err
    assert out.splitlines()[0] == "shard,slot,start,end" and len(out.splitlines()) == 5

    status, _, _ = run(["commsim", "volume", "--devices", 8, "--groups", 3], capsys)
    assert status == 1


def _synth(tmp_path, capsys, vocab=30, domains=3, length=16):
    d = tmp_path / "synth"
    status, _, _ = run(["data", "synth", "--domains", domains, "--docs", 30, "--vocab", vocab,
                        "--len", length, "--out", d], capsys)
    assert status == 0
    return d


def test_train_bundled_config_smoke(tmp_path, capsys):
    d = _synth(tmp_path, capsys, length=64)
    outs = []
    for name in ("a", "b"):
        ck = tmp_path / name
        status, out, _ = run(["train", "--config", TOY_CFG, "--data", d, "--steps", 6, "--out", ck], capsys)
        assert status == 0 and out.startswith("loss")
        outs.append(ck)
    for f in ("config.json", "params.json", "params.bin", "routing.rret", "loss.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert len((outs[0] / "loss.csv").read_text().splitlines()) == 7
    status, out, _ = run(["eval", "--model", outs[0], "--data", d], capsys)
    rows = out.strip().splitlines()
    assert status == 0 and rows[0] == "domain,instances,loss" and len(rows) == 4


def test_train_stage_schedule_file(tmp_path, capsys):
    d = _synth(tmp_path, capsys)
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG.format(vocab=30, domains=3))
    sched = tmp_path / "stages.txt"
    sched.write_text("0 4 0,1\n4 8 0,1,2\n")
    csv_path = tmp_path / "trace.csv"
    status, _, _ = run(["train", "--config", cfg, "--data", d, "--steps", 4, "--out", tmp_path / "ck",
                        "--stage-schedule", sched, "--loss-csv", csv_path], capsys)
    assert status == 0 and csv_path.exists()
    init = tmp_path / "init"
    assert run(["init", "--config", cfg, "--out", init], capsys)[0] == 0
    a, b = load_checkpoint(init).params, load_checkpoint(tmp_path / "ck").params
    for name in a.names("rre"):
        assert np.array_equal(a[name], b[name]) == (a.tag(name).domain == 2)
    sched.write_text("0 2 0\n")
    status, _, err = run(["train", "--config", cfg, "--data", d, "--steps", 4, "--out", tmp_path / "ck2",
                          "--stage-schedule", sched], capsys)
    assert status == 2 and "schedule" in err


def test_inherit_extract_gradcheck(tmp_path, capsys):
    dense_cfg = tmp_path / "dense.cfg"
    dense_cfg.write_text(SMALL_CFG.format(vocab=30, domains=1).replace("experts_per_domain = 2", "experts_per_domain = 1")
                         .replace("model.rre_layers = 1", "model.rre_layers = 0").replace("dense_layers = 1", "dense_layers = 2"))
    sparse_cfg = tmp_path / "sparse.cfg"
    sparse_cfg.write_text(SMALL_CFG.format(vocab=30, domains=2))
    donor = tmp_path / "donor"
    assert run(["init", "--config", dense_cfg, "--out", donor], capsys)[0] == 0
    child = tmp_path / "child"
    assert run(["inherit", "--donor", donor, "--config", sparse_cfg, "--out", child], capsys)[0] == 0
    sub = tmp_path / "sub"
    assert run(["extract", "--model", child, "--domain", 1, "--out", sub], capsys)[0] == 0
    assert load_checkpoint(sub).config.num_domains == 1
    status, _, err = run(["extract", "--model", child, "--domain", 5, "--out", tmp_path / "x"], capsys)
    assert status in (1, 2) and err.startswith("error")

    status, out, _ = run(["gradcheck", "--config", sparse_cfg, "--coords", 5, "--len", 4], capsys)
    assert status == 0 and out.startswith("max relative error")
    assert "rre gradient norm" in out and "dense gradient norm" in out
