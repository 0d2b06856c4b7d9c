import json

import pytest

from elasticprune.cli import main


def test_trace_gen_stdout(capsys):
    assert main(["trace-gen", "--seed", "3", "--count", "4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    assert set(json.loads(lines[0])) == {"t", "batch", "seq_len", "budget_frac"}


def test_trace_gen_file_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["trace-gen", "--seed", "1", "--count", "20", "--out", str(a)]) == 0
    assert main(["trace-gen", "--seed", "1", "--count", "20", "--out", str(b)]) == 0
    assert a.read_text() == b.read_text()


def test_missing_cache_exit_code(tmp_path, capsys):
    assert main(["eval", "--policy", "GsiStatic", "--out-dir", str(tmp_path)]) == 2
    assert "gsi-build" in capsys.readouterr().err


def test_gsi_build_then_eval(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\nmodel = toy-4x2\nsurrogate = generate\n[eval_trace]\ncount = 30\n")
    out = str(tmp_path / "out")
    assert main(["gsi-build", "--config", str(cfg), "--out-dir", out]) == 0
    for policy in ("GsiStatic", "OneShot", "RandomDrop"):
        assert main(["eval", "--config", str(cfg), "--out-dir", out, "--policy", policy]) == 0
    assert (tmp_path / "out" / "eval_GsiStatic.csv").read_text().startswith("t,batch,seq_len")
    assert main(["eval", "--config", str(cfg), "--out-dir", out]) == 2  # no checkpoint yet


def test_stale_cache_rejected(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\nmodel = toy-4x2\nsurrogate = generate\n")
    out = str(tmp_path)
    assert main(["gsi-build", "--config", str(cfg), "--out-dir", out]) == 0
    cfg.write_text("[experiment]\nmodel = toy-4x2\nsurrogate = generate\nsurrogate_seed = 9\n")
    assert main(["eval", "--config", str(cfg), "--out-dir", out, "--policy", "GsiStatic"]) == 2
    assert "gsi-build" in capsys.readouterr().err


@pytest.mark.slow
def test_full_pipeline_on_toy(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(
        "[experiment]\nmodel = toy-4x2\nsurrogate = generate\nseeds = 0 1\nn_boot = 200\nwindow = 20\n"
        "alphas = 1.0\nbetas = 0.1 0.3\n"
        "[dqn]\nhidden = 16\ntotal_steps = 800\n"
        "[train_trace]\ncount = 100\n[eval_trace]\ncount = 40\n"
    )
    common = ["--config", str(cfg), "--out-dir", str(tmp_path)]
    assert main(["gsi-build", *common]) == 0
    assert main(["train", *common]) == 0
    assert (tmp_path / "policy.bin").exists() and (tmp_path / "reward_curve.csv").exists()
    assert main(["eval", *common]) == 0
    assert main(["ablate", *common]) == 0
    assert (tmp_path / "ablation.csv").read_text().splitlines()[0].startswith("policy,n,mean_log_ppl")
    assert main(["sweep", *common, "--records", "10"]) == 0
    assert main(["robustness", *common]) == 0
    assert main(["overhead", *common, "--records", "10", "--repeats", "5"]) == 0
    assert "params" in capsys.readouterr().out
