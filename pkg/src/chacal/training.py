"""Deterministic training loop, Adam/AdamW, warmup schedule and metrics."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .model import TransformerLM

log = logging.getLogger(__name__)

Batch = tuple[np.ndarray, np.ndarray, np.ndarray]  # tokens, targets, loss_mask


class NonFiniteError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 2000
    warmup_steps: int = 100
    eval_interval: int = 250
    seed: int = 0
    precision: str = "float32"
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def digest(self) -> str:
        return config_hash(asdict(self))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    step: int
    train_loss: float
    eval_loss: float
    token_accuracy: float
    exact_match: float
    wall_clock: float
    config_hash: str
    seed: int

    def metrics(self) -> tuple:
        """Everything except wall-clock time, for determinism checks."""
        return (self.step, self.train_loss, self.eval_loss, self.token_accuracy, self.exact_match)


RUN_RECORD_COLUMNS = [f.name for f in fields(RunRecord)]


# -- optimiser ----------------------------------------------------------------------
def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return cfg.lr
    return cfg.lr * step / cfg.warmup_steps


class AdamState:
    def __init__(self, params: Sequence[nc.Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[nc.Tensor], grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig,
              step: int, lr: float | None = None) -> None:
    """One bias-corrected Adam update in place; AdamW-style decoupled decay on matrices."""
    if step < 1:
        raise ValueError("adam steps are numbered from 1")
    lr = lr_at(step, cfg) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {i} with shape {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay > 0 and p.data.ndim >= 2:
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


# -- data ------------------------------------------------------------------------------
def pad_batch(rows: Sequence[Batch], pad_id: int = 0) -> Batch:
    n = max(len(r[0]) for r in rows)
    x = np.full((len(rows), n), pad_id, dtype=np.int64)
    y = np.full((len(rows), n), pad_id, dtype=np.int64)
    m = np.zeros((len(rows), n), dtype=bool)
    for i, (a, b, c) in enumerate(rows):
        x[i, : len(a)], y[i, : len(b)], m[i, : len(c)] = a, b, c
    return x, y, m


class FixedDataset:
    """A finite list of (tokens, targets, loss_mask) rows, batched with padding."""

    def __init__(self, rows: Sequence[Batch], pad_id: int = 0):
        self.rows = list(rows)
        self.pad_id = pad_id

    def __len__(self) -> int:
        return len(self.rows)

    def batches(self, batch_size: int, sort_by_length: bool = True) -> Iterable[Batch]:
        order = np.argsort([len(r[0]) for r in self.rows], kind="stable") if sort_by_length else range(len(self.rows))
        order = list(order)
        for i in range(0, len(order), batch_size):
            yield pad_batch([self.rows[j] for j in order[i : i + batch_size]], self.pad_id)

    def stream(self, batch_size: int, seed: int) -> Callable[[int], Batch]:
        """Seeded epoch-shuffled batch for each step (step numbering from 1)."""
        n = len(self.rows)
        per_epoch = max(1, n // batch_size)
        perms: dict[int, np.ndarray] = {}

        def batch(step: int) -> Batch:
            epoch, j = divmod(step - 1, per_epoch)
            if epoch not in perms:
                perms.clear()
                perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
            idx = perms[epoch][j * batch_size : (j + 1) * batch_size]
            return pad_batch([self.rows[i] for i in idx], self.pad_id)

        return batch


# -- evaluation -----------------------------------------------------------------------------
def evaluate(model: TransformerLM, dataset: FixedDataset, batch_size: int = 128) -> dict:
    """Teacher-forced loss, token accuracy and exact match over a dataset.

    A sample counts as an exact match when the argmax is right at every
    unmasked position. Under teacher forcing this is the same event as greedy
    generation reproducing the reference, because each greedy step then sees
    exactly the reference prefix.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_nll = 0.0
    total_tok = 0
    correct_tok = 0
    exact = 0
    with nc.no_grad():
        for x, y, m in dataset.batches(batch_size):
            logits = model.forward(x).data.astype(np.float64)
            z = logits - logits.max(-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
            nll = -np.take_along_axis(logp, y[..., None], -1)[..., 0]
            total_nll += float((nll * m).sum())
            total_tok += int(m.sum())
            hit = (logits.argmax(-1) == y) | ~m
            correct_tok += int((hit & m).sum())
            exact += int(hit.all(-1).sum())
    loss = total_nll / total_tok
    return {
        "loss": loss,
        "token_accuracy": correct_tok / total_tok,
        "exact_match": exact / len(dataset),
        "perplexity": math.exp(loss),
    }


def exact_match_by_generation(model: TransformerLM, prompts: Sequence[Sequence[int]],
                              references: Sequence[Sequence[int]], stop_token: int) -> float:
    """Fraction of prompts whose greedy continuation equals the reference token for token."""
    hits = 0
    for p, ref in zip(prompts, references):
        hits += model.generate(p, max_new=len(ref), stop_token=stop_token) == list(ref)
    return hits / len(prompts)


# -- training --------------------------------------------------------------------------------
def train(model: TransformerLM, batch_fn: Callable[[int], Batch], eval_set: FixedDataset, cfg: TrainConfig,
          out_dir: Path | str | None = None, config_digest: str | None = None,
          stop_when: Callable[[RunRecord], bool] | None = None) -> list[RunRecord]:
    """Train for ``cfg.total_steps`` steps and return one record per evaluation.

    ``batch_fn(step)`` must be a pure function of the step so runs replay
    exactly. With ``out_dir`` the best-eval, last-good and final checkpoints
    plus ``metrics.csv`` are written there. ``stop_when`` may end training
    early after an evaluation.
    """
    digest = config_digest or cfg.digest()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    state = AdamState(params)
    records: list[RunRecord] = []
    best = math.inf
    t0 = time.perf_counter()
    window: list[float] = []
    last_good = {k: v.copy() for k, v in model.state_dict().items()}

    def abort(msg: str):
        model.load_state_dict(last_good)
        if out is not None:
            model.save(out / "last_good.ckpt")
        raise TrainingAborted(msg, records)

    for step in range(1, cfg.total_steps + 1):
        x, y, m = batch_fn(step)
        model.zero_grad()
        loss = nc.cross_entropy(model.forward(x), y, m)
        lval = float(loss.data)
        if not math.isfinite(lval):
            abort(f"non-finite loss at step {step}")
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        if cfg.grad_clip is not None:
            clip_by_global_norm(grads, cfg.grad_clip)
        try:
            adam_step(params, grads, state, cfg, step)
        except NonFiniteError as e:
            abort(str(e))
        window.append(lval)
        if step % cfg.eval_interval == 0 or step == cfg.total_steps:
            ev = evaluate(model, eval_set)
            rec = RunRecord(step, float(np.mean(window)), ev["loss"], ev["token_accuracy"], ev["exact_match"],
                            time.perf_counter() - t0, digest, cfg.seed)
            window = []
            records.append(rec)
            last_good = {k: v.copy() for k, v in model.state_dict().items()}
            log.info("step %d train %.4f eval %.4f acc %.4f em %.4f", step, rec.train_loss, rec.eval_loss,
                     rec.token_accuracy, rec.exact_match)
            if out is not None:
                append_records(out / "metrics.csv", [rec])
                if rec.eval_loss < best:
                    best = rec.eval_loss
                    model.save(out / "best.ckpt", {"step": step})
            if stop_when is not None and stop_when(rec):
                break
    if out is not None:
        model.save(out / "final.ckpt", {"step": records[-1].step if records else 0})
    return records


# -- logging ---------------------------------------------------------------------------------
def append_records(path, records: Iterable[RunRecord]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RUN_RECORD_COLUMNS)
        if new:
            w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def git_revision() -> str:
    try:
        return subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, check=True,
                              cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def write_sidecar(path, config: dict, seed: int) -> None:
    Path(path).write_text(json.dumps({"config": config, "git_revision": git_revision(), "seed": seed},
                                     indent=2, sort_keys=True, default=str))
