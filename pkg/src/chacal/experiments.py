"""Experiment runners: toy layer sweep, boxes comparison, gamma sweep, theorem check, LM smoke test.

Each runner takes an ``ExperimentSpec`` and writes into ``spec.out_dir``:
``config.json`` (the spec), ``command.txt``, ``runs.csv`` (one row per run),
``summary.json`` and one sub-directory per run with its metrics log.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import shlex
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import graphs
from .attention import CHACAL, STANDARD
from .datasets.boxes import BoxesConfig, BoxesVocab, boxes_samples, lm_arrays, tokenize_boxes
from .datasets.seeding import sample_rng
from .datasets.toy import ToyConfig, toy_batch, toy_samples
from .model import ModelConfig, TransformerLM
from .training import (FixedDataset, TrainConfig, TrainingAborted, config_hash, evaluate, train,
                       write_sidecar)

log = logging.getLogger(__name__)

KINDS = ("toy-sweep", "boxes", "gamma-sweep", "theorem-check", "lm-smoke")

DESK = {
    "toy-sweep": {
        "model": {"d_model": 128, "n_heads": 4, "d_inner": 512, "gamma": 0.9},
        "train": {"lr": 1e-3, "batch_size": 64, "total_steps": 3000, "warmup_steps": 100, "eval_interval": 100},
        "dataset": {"n": 64, "k": 8, "vocab_size": 128, "eval_samples": 512},
        "layers": [1, 2, 3],
        "repeats": 2,
    },
    "gamma-sweep": {
        "model": {"d_model": 128, "n_heads": 4, "d_inner": 512},
        "train": {"lr": 1e-3, "batch_size": 64, "total_steps": 3000, "warmup_steps": 100, "eval_interval": 100},
        "dataset": {"n": 64, "k": 8, "vocab_size": 128, "eval_samples": 512},
        "gammas": [0.0, 0.3, 0.5, 0.9, 0.98],
        "repeats": 1,
    },
    "boxes": {
        "model": {"d_model": 128, "n_heads": 4, "d_inner": 512, "gamma": 0.9},
        "train": {"lr": 1e-3, "batch_size": 32, "total_steps": 3000, "warmup_steps": 200, "eval_interval": 250,
                  "weight_decay": 0.01},
        "dataset": {"variant": "advanced", "n_boxes": 6, "max_ops": 15, "train_samples": 20000,
                    "test_samples": 500},
        "layers": [2, 3, 4, 5],
        "repeats": 2,
    },
    "theorem-check": {"max_depth": 200},
    "lm-smoke": {
        "model": {"d_model": 64, "n_heads": 4, "d_inner": 256, "gamma": 0.9, "n_layers": 1},
        "train": {"lr": 3e-3, "batch_size": 16, "total_steps": 300, "warmup_steps": 30, "eval_interval": 100},
        "dataset": {"seq_len": 64, "corpus": None},
        "repeats": 1,
    },
}

PAPER = {
    "toy-sweep": {
        "model": {"d_model": 512, "n_heads": 8, "d_inner": 2048, "gamma": 0.9},
        "train": {"lr": 3e-4, "batch_size": 128, "total_steps": 24000, "warmup_steps": 8000, "eval_interval": 500},
        "dataset": {"n": 128, "k": 8, "vocab_size": 128, "eval_samples": 1024},
        "layers": [1, 2, 3, 4, 5],
        "repeats": 4,
    },
    "gamma-sweep": {
        "model": {"d_model": 512, "n_heads": 8, "d_inner": 2048},
        "train": {"lr": 3e-4, "batch_size": 128, "total_steps": 24000, "warmup_steps": 8000, "eval_interval": 500},
        "dataset": {"n": 128, "k": 8, "vocab_size": 128, "eval_samples": 1024},
        "gammas": [0.0, 0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.98, 0.99],
        "repeats": 1,
    },
    "boxes": {
        "model": {"d_model": 512, "n_heads": 8, "d_inner": 2048, "gamma": 0.9},
        "train": {"lr": 3e-4, "batch_size": 256, "total_steps": 25000, "warmup_steps": 2000, "eval_interval": 1000,
                  "weight_decay": 0.01},
        "dataset": {"variant": "advanced", "n_boxes": 8, "max_ops": 31, "train_samples": 1000000,
                    "test_samples": 5000},
        "layers": [2, 3, 4, 5],
        "repeats": 4,
    },
    "theorem-check": {"max_depth": 200},
    "lm-smoke": DESK["lm-smoke"],
}


@dataclass
class ExperimentSpec:
    kind: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    repeats: int = 1
    out_dir: str = "runs"
    layers: list[int] = field(default_factory=list)
    gammas: list[float] = field(default_factory=list)
    max_depth: int = 200
    seed: int = 0
    stop_at_accuracy: float | None = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.kind != "theorem-check":
            for block in ("model", "train", "dataset"):
                if not getattr(self, block):
                    raise ValueError(f"experiment {self.kind!r} needs a {block!r} config block")
        if any(not 0.0 <= g < 1.0 for g in self.gammas):
            raise ValueError("gamma grid must lie in [0, 1)")

    @classmethod
    def preset(cls, kind: str, scale: str = "desk", **overrides) -> "ExperimentSpec":
        table = {"desk": DESK, "paper": PAPER}[scale]
        base = copy.deepcopy(table[kind])
        for key in ("model", "train", "dataset"):
            if key in overrides:
                base.setdefault(key, {}).update(overrides.pop(key))
        base.update(overrides)
        return cls(kind=kind, **base)

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


class Report:
    """Collects rows and acceptance checks; the CLI exits nonzero when any check fails."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.rows: list[dict] = []
        self.summary: dict = {}
        self.checks: dict[str, bool] = {}

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def write(self) -> Path:
        out = Path(self.spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.spec.to_dict(), indent=2, sort_keys=True))
        (out / "command.txt").write_text(" ".join(shlex.quote(a) for a in sys.argv) + "\n")
        if self.rows:
            cols = list(self.rows[0])
            for r in self.rows[1:]:
                cols += [c for c in r if c not in cols]
            with open(out / "runs.csv", "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=cols)
                w.writeheader()
                w.writerows(self.rows)
        (out / "summary.json").write_text(json.dumps(
            {"kind": self.spec.kind, "summary": self.summary, "checks": self.checks, "passed": self.passed},
            indent=2, sort_keys=True, default=_json_default))
        return out


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


# -- shared helpers ---------------------------------------------------------------------------
def _train_config(spec: ExperimentSpec, seed: int) -> TrainConfig:
    return TrainConfig(**{**spec.train, "seed": seed})


def _model_config(spec: ExperimentSpec, modes: list[str], vocab_size: int, max_seq_len: int,
                  gamma: float | None = None) -> ModelConfig:
    m = spec.model
    return ModelConfig.stack(
        modes, vocab_size=vocab_size, max_seq_len=max_seq_len, d_model=m["d_model"], n_heads=m["n_heads"],
        d_inner=m["d_inner"], gamma=m.get("gamma", 0.9) if gamma is None else gamma,
        remove_diagonal=m.get("remove_diagonal", True),
    )


def _toy_data(spec: ExperimentSpec, seed: int):
    d = spec.dataset
    cfg = ToyConfig(n=d["n"], k=d["k"], seed=seed, vocab_size=d["vocab_size"], n_values=d.get("n_values"))
    eval_cfg = ToyConfig(n=d["n"], k=d["k"], seed=seed + 1_000_003, vocab_size=d["vocab_size"],
                         n_values=d.get("n_values"))
    rows = [(np.array(s.tokens), np.array(s.targets), np.array(s.loss_mask))
            for s in toy_samples(eval_cfg, 0, d["eval_samples"])]
    bs = spec.train["batch_size"]

    def batch_fn(step: int):
        return toy_batch(cfg, sample_rng(seed, step), bs)

    return cfg, batch_fn, FixedDataset(rows)


def _stopper(spec: ExperimentSpec, metric: str = "token_accuracy"):
    if spec.stop_at_accuracy is None:
        return None
    return lambda rec: getattr(rec, metric) >= spec.stop_at_accuracy


def _run_toy(spec: ExperimentSpec, modes: list[str], seed: int, run_dir: Path, gamma: float | None = None) -> dict:
    cfg, batch_fn, eval_set = _toy_data(spec, seed)
    mcfg = _model_config(spec, modes, cfg.vocab_size, cfg.n, gamma)
    model = TransformerLM(mcfg, seed=seed)
    tcfg = _train_config(spec, seed)
    digest = config_hash({"model": mcfg.to_dict(), "train": asdict(tcfg), "dataset": spec.dataset})
    run_dir.mkdir(parents=True, exist_ok=True)
    write_sidecar(run_dir / "run.json", {"model": mcfg.to_dict(), "train": asdict(tcfg), "dataset": spec.dataset},
                  seed)
    t0 = time.perf_counter()
    status = "ok"
    try:
        records = train(model, batch_fn, eval_set, tcfg, out_dir=run_dir, config_digest=digest,
                        stop_when=_stopper(spec))
    except TrainingAborted as e:
        records, status = e.records, f"aborted: {e}"
    wall = time.perf_counter() - t0
    last = records[-1] if records else None
    interval = tcfg.eval_interval
    solved = next((r.step for r in records if r.token_accuracy >= 1.0), None)
    return {
        "params": model.num_parameters(),
        "final_loss": last.eval_loss if last else math.nan,
        "final_accuracy": last.token_accuracy if last else 0.0,
        "best_accuracy": max((r.token_accuracy for r in records), default=0.0),
        "steps": last.step if last else 0,
        "steps_to_solve": solved if solved is not None else math.inf,
        "epochs_to_solve": solved // interval if solved is not None else math.inf,
        "wall_clock": wall,
        "status": status,
        "config_hash": digest,
    }


def _stats(values: list[float]) -> dict:
    return {"mean": float(np.mean(values)), "min": float(np.min(values)), "max": float(np.max(values))}


# -- runners ---------------------------------------------------------------------------------------
def run_toy_sweep(spec: ExperimentSpec) -> Report:
    """Standard transformers with L in ``spec.layers`` against one ChaCAL layer."""
    report = Report(spec)
    out = Path(spec.out_dir)
    arch = [(STANDARD, L) for L in spec.layers] + [(CHACAL, 1)]
    for mode, L in arch:
        for r in range(spec.repeats):
            seed = spec.seed + r
            log.info("toy sweep: %s L=%d seed=%d", mode, L, seed)
            res = _run_toy(spec, [mode] * L, seed, out / f"{mode}_L{L}_s{seed}")
            report.rows.append({"architecture": mode, "layers": L, "seed": seed, **res})
    for mode, L in arch:
        accs = [r["final_accuracy"] for r in report.rows if r["architecture"] == mode and r["layers"] == L]
        report.summary[f"{mode}_L{L}"] = {"accuracy": _stats(accs)}
    depth = spec.dataset["n"] // spec.dataset["k"] - 1
    report.summary["depth"] = depth
    report.summary["l_min"] = graphs.l_min(depth)
    std_means = [report.summary[f"{STANDARD}_L{L}"]["accuracy"]["mean"] for L in spec.layers]
    report.checks["standard accuracy non-decreasing in L"] = all(
        b >= a - 1e-9 for a, b in zip(std_means, std_means[1:]))
    if 1 in spec.layers:
        by_seed = {r["seed"]: r["final_accuracy"] for r in report.rows if r["architecture"] == STANDARD and r["layers"] == 1}
        report.checks["chacal beats standard L=1 on every seed"] = all(
            r["final_accuracy"] > by_seed[r["seed"]] for r in report.rows if r["architecture"] == CHACAL)
    report.write()
    return report


def run_gamma_sweep(spec: ExperimentSpec) -> Report:
    report = Report(spec)
    out = Path(spec.out_dir)
    for g in spec.gammas:
        for r in range(spec.repeats):
            seed = spec.seed + r
            log.info("gamma sweep: gamma=%s seed=%d", g, seed)
            res = _run_toy(spec, [CHACAL], seed, out / f"gamma{g}_s{seed}", gamma=g)
            report.rows.append({"gamma": g, "seed": seed, **res})
    for g in spec.gammas:
        rows = [r for r in report.rows if r["gamma"] == g]
        report.summary[str(g)] = {
            "accuracy": _stats([r["final_accuracy"] for r in rows]),
            "epochs_to_solve": max(r["epochs_to_solve"] for r in rows),
        }
    report.write()
    return report


def _boxes_data(spec: ExperimentSpec, seed: int):
    d = spec.dataset
    kw = {k: d[k] for k in ("variant", "n_boxes", "n_ops", "max_ops", "max_initial_items") if k in d}
    vocab = BoxesVocab.for_variant(kw.get("variant", "default"))
    train_cfg = BoxesConfig(seed=seed, **kw)
    test_cfg = BoxesConfig(seed=seed + 1_000_003, **kw)

    def rows(cfg, count):
        out = []
        for s in boxes_samples(cfg, 0, count):
            ids, off = tokenize_boxes(s, vocab)
            out.append(lm_arrays(ids, off))
        return out

    train_rows = rows(train_cfg, d["train_samples"])
    test_rows = rows(test_cfg, d["test_samples"])
    max_len = max(len(r[0]) for r in train_rows + test_rows)
    return vocab, FixedDataset(train_rows, vocab.pad_id), FixedDataset(test_rows, vocab.pad_id), max_len


def _run_boxes_one(spec: ExperimentSpec, modes: list[str], seed: int, run_dir: Path, data) -> dict:
    vocab, train_set, test_set, max_len = data
    mcfg = _model_config(spec, modes, len(vocab), max_len)
    model = TransformerLM(mcfg, seed=seed)
    tcfg = _train_config(spec, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash({"model": mcfg.to_dict(), "train": asdict(tcfg), "dataset": spec.dataset})
    write_sidecar(run_dir / "run.json", {"model": mcfg.to_dict(), "train": asdict(tcfg), "dataset": spec.dataset},
                  seed)
    t0 = time.perf_counter()
    status = "ok"
    try:
        records = train(model, train_set.stream(tcfg.batch_size, seed), test_set, tcfg, out_dir=run_dir,
                        config_digest=digest, stop_when=None)
    except TrainingAborted as e:
        records, status = e.records, f"aborted: {e}"
    wall = time.perf_counter() - t0
    last = records[-1] if records else None
    return {
        "params": model.num_parameters(),
        "final_loss": last.eval_loss if last else math.nan,
        "exact_match": last.exact_match if last else 0.0,
        "token_accuracy": last.token_accuracy if last else 0.0,
        "wall_clock": wall, "status": status, "config_hash": digest,
    }


def run_boxes(spec: ExperimentSpec) -> Report:
    """Standard stacks of each depth in ``spec.layers`` against standard+ChaCAL (2 layers)."""
    report = Report(spec)
    out = Path(spec.out_dir)
    arch = [("standard", [STANDARD] * L) for L in spec.layers] + [("chacal", [STANDARD, CHACAL])]
    for r in range(spec.repeats):
        seed = spec.seed + r
        data = _boxes_data(spec, seed)
        for name, modes in arch:
            log.info("boxes: %s L=%d seed=%d", name, len(modes), seed)
            res = _run_boxes_one(spec, modes, seed, out / f"{name}_L{len(modes)}_s{seed}", data)
            report.rows.append({"architecture": name, "layers": len(modes), "seed": seed, **res})
    base = [r["wall_clock"] for r in report.rows if r["architecture"] == "standard" and r["layers"] == 2]
    base_t = float(np.mean(base)) if base else math.nan
    for row in report.rows:
        row["relative_time"] = row["wall_clock"] / base_t if base else math.nan
    for name, modes in arch:
        rows = [r for r in report.rows if r["architecture"] == name and r["layers"] == len(modes)]
        report.summary[f"{name}_L{len(modes)}"] = {
            "exact_match": _stats([r["exact_match"] for r in rows]),
            "loss": float(np.mean([r["final_loss"] for r in rows])),
            "relative_time": float(np.mean([r["relative_time"] for r in rows])),
        }
    report.checks["exact match within [0, 1]"] = all(0.0 <= r["exact_match"] <= 1.0 for r in report.rows)
    report.write()
    return report


def run_theorem_check(spec: ExperimentSpec) -> Report:
    report = Report(spec)
    passed, bad = graphs.theorem_check(spec.max_depth)
    for n in range(spec.max_depth + 1):
        report.rows.append({"depth": n, "l_min": graphs.l_min(n), "simulated": graphs.min_layers_by_simulation(n)})
    report.summary = {"max_depth": spec.max_depth, "result": "PASS" if passed else "FAIL",
                      "first_counterexample": bad}
    report.checks["simulated minimum equals l_min"] = passed
    report.write()
    return report


# -- language-model smoke test ----------------------------------------------------------------------
_FALLBACK_CORPUS = (
    "the quick brown fox jumps over the lazy dog. a stitch in time saves nine. "
    "all that glitters is not gold. the early bird catches the worm. "
    "actions speak louder than words. practice makes perfect. "
) * 40


def char_corpus(path: str | None) -> tuple[np.ndarray, list[str]]:
    text = Path(path).read_text(encoding="utf-8") if path else _FALLBACK_CORPUS
    chars = sorted(set(text))
    index = {c: i for i, c in enumerate(chars)}
    return np.array([index[c] for c in text], dtype=np.int64), chars


def run_lm_smoke(spec: ExperimentSpec) -> Report:
    """Brief character-level LM training of matched standard and ChaCAL models."""
    report = Report(spec)
    out = Path(spec.out_dir)
    data, chars = char_corpus(spec.dataset.get("corpus"))
    T = spec.dataset["seq_len"]
    split = int(len(data) * 0.9)
    train_ids, test_ids = data[:split], data[split:]
    if len(test_ids) <= T + 1:
        raise ValueError("corpus too small for the requested sequence length")
    test_rows = [(test_ids[i : i + T], test_ids[i + 1 : i + T + 1], np.ones(T, bool))
                 for i in range(0, len(test_ids) - T - 1, T)]
    test_set = FixedDataset(test_rows)
    n_layers = spec.model.get("n_layers", 1)
    for name in (STANDARD, CHACAL):
        for r in range(spec.repeats):
            seed = spec.seed + r
            mcfg = _model_config(spec, [name] * n_layers, len(chars), T)
            model = TransformerLM(mcfg, seed=seed)
            tcfg = _train_config(spec, seed)
            bs = tcfg.batch_size

            def batch_fn(step, seed=seed, bs=bs):
                starts = np.random.default_rng([seed, step]).integers(0, len(train_ids) - T - 1, size=bs)
                x = np.stack([train_ids[s : s + T] for s in starts])
                y = np.stack([train_ids[s + 1 : s + T + 1] for s in starts])
                return x, y, np.ones_like(x, dtype=bool)

            status = "ok"
            try:
                records = train(model, batch_fn, test_set, tcfg, out_dir=out / f"{name}_s{seed}")
            except TrainingAborted as e:
                records, status = e.records, f"aborted: {e}"
            ppl = math.exp(records[-1].eval_loss) if records else math.inf
            report.rows.append({
                "architecture": name, "seed": seed, "perplexity": ppl,
                "initial_train_loss": records[0].train_loss if records else math.nan,
                "final_train_loss": records[-1].train_loss if records else math.nan,
                "status": status,
            })
    vocab = len(chars)
    for name in (STANDARD, CHACAL):
        rows = [r for r in report.rows if r["architecture"] == name]
        report.summary[f"{name}_perplexity"] = float(np.mean([r["perplexity"] for r in rows]))
        report.checks[f"{name} perplexity finite and below uniform ({vocab})"] = all(
            math.isfinite(r["perplexity"]) and r["perplexity"] < vocab for r in rows)
        report.checks[f"{name} training loss decreased"] = all(
            r["final_train_loss"] < r["initial_train_loss"] for r in rows)
    report.summary["uniform_perplexity"] = vocab
    report.write()
    return report


RUNNERS = {
    "toy-sweep": run_toy_sweep,
    "boxes": run_boxes,
    "gamma-sweep": run_gamma_sweep,
    "theorem-check": run_theorem_check,
    "lm-smoke": run_lm_smoke,
}


def run(spec: ExperimentSpec) -> Report:
    return RUNNERS[spec.kind](spec)


def train_single(spec: ExperimentSpec, modes: list[str]) -> dict:
    """Train one architecture with one seed; the task follows ``spec.kind`` (toy or boxes)."""
    out = Path(spec.out_dir)
    if spec.kind == "boxes":
        res = _run_boxes_one(spec, modes, spec.seed, out, _boxes_data(spec, spec.seed))
    elif spec.kind in ("toy-sweep", "gamma-sweep"):
        res = _run_toy(spec, modes, spec.seed, out)
    else:
        raise ValueError(f"cannot train a single model for experiment kind {spec.kind!r}")
    (out / "result.json").write_text(json.dumps(res, indent=2, sort_keys=True, default=_json_default))
    return res
