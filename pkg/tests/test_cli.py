import csv
import json
import math

import pytest

from chacal import cli
from chacal.experiments import ExperimentSpec, run, train_single
from chacal.model import TransformerLM

TINY_MODEL = {"d_model": 16, "n_heads": 2, "d_inner": 32, "gamma": 0.9}
TINY_TRAIN = {"lr": 3e-3, "batch_size": 8, "total_steps": 6, "warmup_steps": 2, "eval_interval": 3}


def tiny_toy(tmp_path, kind="toy-sweep", **kw):
    return ExperimentSpec.preset(kind, "desk", model=TINY_MODEL, train=TINY_TRAIN,
                                 dataset={"n": 16, "k": 4, "eval_samples": 16}, out_dir=str(tmp_path), **kw)


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown experiment kind"):
        ExperimentSpec(kind="nope")
    with pytest.raises(ValueError, match="repeats"):
        ExperimentSpec(kind="theorem-check", repeats=0)
    with pytest.raises(ValueError, match="config block"):
        ExperimentSpec(kind="toy-sweep", model={}, train={"lr": 1}, dataset={"n": 1})
    with pytest.raises(ValueError, match="gamma"):
        ExperimentSpec.preset("gamma-sweep", gammas=[1.0])


def test_paper_scale_presets_match_reference_hyperparameters():
    toy = ExperimentSpec.preset("toy-sweep", "paper")
    assert toy.model["d_model"] == 512 and toy.train["total_steps"] == 24000 and toy.dataset["n"] == 128
    assert toy.train["warmup_steps"] == 8000 and toy.train["batch_size"] == 128 and toy.layers == [1, 2, 3, 4, 5]
    boxes = ExperimentSpec.preset("boxes", "paper")
    assert boxes.train["weight_decay"] == 0.01 and boxes.train["batch_size"] == 256


def test_toy_sweep_rows_and_files(tmp_path):
    spec = tiny_toy(tmp_path, layers=[1, 2], repeats=2)
    report = run(spec)
    rows = read_csv(tmp_path / "runs.csv")
    keys = {(r["architecture"], r["layers"], r["seed"]) for r in rows}
    assert keys == {(a, str(L), str(s)) for a, L in [("standard", 1), ("standard", 2), ("chacal", 1)] for s in (0, 1)}
    for name in ("config.json", "command.txt", "summary.json"):
        assert (tmp_path / name).exists()
    assert json.loads((tmp_path / "summary.json").read_text())["summary"]["l_min"] == 2
    assert "standard accuracy non-decreasing in L" in report.checks
    assert (tmp_path / "chacal_L1_s0" / "metrics.csv").exists()
    assert (tmp_path / "chacal_L1_s0" / "run.json").exists()


def test_gamma_sweep_echoes_grid(tmp_path):
    spec = tiny_toy(tmp_path, kind="gamma-sweep", gammas=[0.0, 0.5, 0.9])
    report = run(spec)
    assert [r["gamma"] for r in report.rows] == [0.0, 0.5, 0.9]
    for row in report.rows:
        assert math.isinf(row["epochs_to_solve"]) or row["epochs_to_solve"] >= 1


def test_boxes_relative_time_baseline(tmp_path):
    spec = ExperimentSpec.preset("boxes", "desk", model=TINY_MODEL, train=TINY_TRAIN,
                                 dataset={"n_boxes": 4, "max_ops": 3, "train_samples": 40, "test_samples": 8},
                                 layers=[2, 3], repeats=1, out_dir=str(tmp_path))
    report = run(spec)
    base = [r for r in report.rows if r["architecture"] == "standard" and r["layers"] == 2]
    assert base[0]["relative_time"] == pytest.approx(1.0)
    assert {(r["architecture"], r["layers"]) for r in report.rows} == {("standard", 2), ("standard", 3), ("chacal", 2)}
    assert report.checks["exact match within [0, 1]"]


def test_theorem_check_verb(tmp_path, capsys):
    assert cli.main(["theorem-check", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["summary"]["result"] == "PASS"
    rows = read_csv(tmp_path / "runs.csv")
    assert rows[7]["simulated"] == "3" and rows[8]["simulated"] == "4"


def test_lm_smoke_is_stable_and_deterministic(tmp_path):
    corpus = tmp_path / "c.txt"
    corpus.write_text("abcabcabd abcabcabd " * 60)
    out = []
    for i in range(2):
        spec = ExperimentSpec.preset("lm-smoke", "desk", train={"total_steps": 40, "eval_interval": 20,
                                                                  "warmup_steps": 5},
                                     dataset={"seq_len": 16, "corpus": str(corpus)}, out_dir=str(tmp_path / f"r{i}"))
        report = run(spec)
        assert report.passed, report.checks
        out.append([r["perplexity"] for r in report.rows])
    assert out[0] == out[1]


def test_train_verb_writes_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"kind": "toy-sweep", "model": TINY_MODEL, "train": TINY_TRAIN,
                               "dataset": {"n": 16, "k": 4, "vocab_size": 128, "eval_samples": 8}}))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--modes", "standard,chacal"]) == 0
    model = TransformerLM.load(out / "final.ckpt")
    assert [a.mode for a in model.config.attention] == ["standard", "chacal"]
    assert json.loads((out / "result.json").read_text())["status"] == "ok"


def test_train_single_rejects_theorem_kind(tmp_path):
    with pytest.raises(ValueError):
        train_single(ExperimentSpec(kind="theorem-check", out_dir=str(tmp_path)), ["chacal"])


def test_gen_data_then_eval(tmp_path, capsys):
    assert cli.main(["gen-data", "--task", "toy", "--count", "5", "--n", "16", "--k", "4", "--out",
                     str(tmp_path)]) == 0
    first = (tmp_path / "toy.jsonl").read_bytes()
    assert cli.main(["gen-data", "--task", "toy", "--count", "5", "--n", "16", "--k", "4", "--out",
                     str(tmp_path)]) == 0
    assert (tmp_path / "toy.jsonl").read_bytes() == first
    assert cli.main(["gen-data", "--task", "boxes-advanced", "--count", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "vocab_advanced.txt").exists()

    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"kind": "toy-sweep", "model": TINY_MODEL, "train": TINY_TRAIN,
                               "dataset": {"n": 16, "k": 4, "vocab_size": 128, "eval_samples": 8}}))
    cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "final.ckpt"), "--data",
                     str(tmp_path / "toy.jsonl")]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert set(metrics) == {"loss", "token_accuracy", "exact_match", "perplexity"}


def test_failed_check_gives_nonzero_exit(tmp_path, monkeypatch):
    from chacal import graphs
    monkeypatch.setattr(graphs, "l_min", lambda d: 0)
    assert cli.main(["theorem-check", "--out", str(tmp_path)]) == 1


def test_unknown_verb_exits():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
