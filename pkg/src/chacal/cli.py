"""Command-line entry point: ``chacal <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datasets.boxes import BoxesConfig, BoxesVocab, boxes_samples, lm_arrays, tokenize_boxes
from .datasets.io import read_dataset, write_dataset
from .datasets.toy import ToyConfig, ToySample, toy_samples
from .experiments import ExperimentSpec, run, train_single
from .model import TransformerLM
from .training import FixedDataset, evaluate

VERB_KIND = {
    "sweep-toy": "toy-sweep",
    "sweep-gamma": "gamma-sweep",
    "boxes": "boxes",
    "theorem-check": "theorem-check",
    "lm-smoke": "lm-smoke",
}


def _spec(args, kind: str) -> ExperimentSpec:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        d.setdefault("kind", kind)
        spec = ExperimentSpec(**d)
    else:
        spec = ExperimentSpec.preset(kind, args.scale)
    if args.seed is not None:
        spec.seed = args.seed
    if args.repeats is not None:
        spec.repeats = args.repeats
    if args.out is not None:
        spec.out_dir = args.out
    return spec


def cmd_experiment(args) -> int:
    spec = _spec(args, VERB_KIND[args.verb])
    if getattr(args, "corpus", None):
        spec.dataset["corpus"] = args.corpus
    report = run(spec)
    print(json.dumps({"summary": report.summary, "checks": report.checks, "out": spec.out_dir}, indent=2,
                     default=str))
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    spec = _spec(args, "boxes" if args.task == "boxes" else "toy-sweep")
    modes = [m.strip() for m in args.modes.split(",")]
    res = train_single(spec, modes)
    print(json.dumps(res, indent=2, default=str))
    return 0 if res["status"] == "ok" else 1


def cmd_gen_data(args) -> int:
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    if args.task == "toy":
        cfg = ToyConfig(n=args.n, k=args.k, seed=seed)
        write_dataset(toy_samples(cfg, 0, args.count), out / "toy.jsonl", {"seed": seed, "config": cfg.digest()})
    else:
        variant = args.task.split("-", 1)[1]
        cfg = BoxesConfig(variant=variant, n_boxes=args.n_boxes, seed=seed)
        write_dataset(boxes_samples(cfg, 0, args.count), out / f"boxes_{variant}.jsonl")
        BoxesVocab.for_variant(variant).write(out / f"vocab_{variant}.txt")
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    model = TransformerLM.load(args.checkpoint)
    samples = read_dataset(args.data)
    rows = []
    for s in samples:
        if isinstance(s, ToySample):
            rows.append((np.array(s.tokens), np.array(s.targets), np.array(s.loss_mask)))
        else:
            vocab = BoxesVocab.for_variant(s.variant)
            rows.append(lm_arrays(*tokenize_boxes(s, vocab)))
    print(json.dumps(evaluate(model, FixedDataset(rows)), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chacal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment spec as a JSON file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--scale", choices=("desk", "paper"), default="desk")
        sp.add_argument("--repeats", type=int)

    for verb in ("sweep-toy", "sweep-gamma", "boxes", "theorem-check", "lm-smoke"):
        sp = sub.add_parser(verb)
        common(sp)
        if verb == "lm-smoke":
            sp.add_argument("--corpus", help="UTF-8 text file (character-level)")
        sp.set_defaults(func=cmd_experiment)

    t = sub.add_parser("train", help="train a single model and keep its checkpoints")
    common(t)
    t.add_argument("--task", choices=("toy", "boxes"), default="toy")
    t.add_argument("--modes", default="chacal", help="comma-separated attention mode per layer")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gen-data")
    common(g)
    g.add_argument("--task", choices=("toy", "boxes-default", "boxes-advanced"), default="toy")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--n-boxes", type=int, help="default: 7 (default variant) or 8 (advanced)")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
