"""Permutation-chain toy task.

Block 0 holds random values; every later block of ``k`` tokens holds a
shuffled list of the absolute positions of the previous block. The target at
an index position is the block-0 value reached by following its references.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .seeding import sample_rng


@dataclass(frozen=True)
class ToyConfig:
    n: int = 64
    k: int = 8
    seed: int = 0
    vocab_size: int = 128
    n_values: int | None = None  # defaults to vocab_size

    def __post_init__(self):
        if self.k < 1 or self.n % self.k:
            raise ValueError(f"block size k={self.k} must divide n={self.n}")
        if self.n // self.k < 2:
            raise ValueError("the toy task needs at least two blocks")
        if self.n > self.vocab_size or self.values > self.vocab_size:
            raise ValueError("positions and values must fit in the vocabulary")

    @property
    def values(self) -> int:
        return self.vocab_size if self.n_values is None else self.n_values

    @property
    def n_blocks(self) -> int:
        return self.n // self.k

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ToySample:
    tokens: list[int]
    targets: list[int]
    loss_mask: list[bool]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "targets": self.targets, "loss_mask": self.loss_mask}

    @classmethod
    def from_dict(cls, d: dict) -> "ToySample":
        return cls(list(d["tokens"]), list(d["targets"]), [bool(b) for b in d["loss_mask"]])


def resolve_chains(tokens: np.ndarray, k: int) -> np.ndarray:
    """Block-0 value reached from every position (vectorised, block by block)."""
    out = np.array(tokens)
    for start in range(k, len(tokens), k):
        out[start : start + k] = out[tokens[start : start + k]]
    return out


def gen_toy_sample(cfg: ToyConfig, rng: np.random.Generator) -> ToySample:
    n, k = cfg.n, cfg.k
    tokens = np.empty(n, dtype=np.int64)
    tokens[:k] = rng.integers(0, cfg.values, size=k)
    for b in range(1, cfg.n_blocks):
        tokens[b * k : (b + 1) * k] = (b - 1) * k + rng.permutation(k)
    targets = resolve_chains(tokens, k)
    mask = np.arange(n) >= k
    return ToySample(tokens.tolist(), targets.tolist(), mask.tolist())


def toy_samples(cfg: ToyConfig, start: int, count: int) -> list[ToySample]:
    return [gen_toy_sample(cfg, sample_rng(cfg.seed, i)) for i in range(start, start + count)]


def toy_batch(cfg: ToyConfig, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A (tokens, targets, loss_mask) batch drawn from one generator; fast path for training."""
    n, k = cfg.n, cfg.k
    tokens = np.empty((batch_size, n), dtype=np.int64)
    tokens[:, :k] = rng.integers(0, cfg.values, size=(batch_size, k))
    for b in range(1, cfg.n_blocks):
        tokens[:, b * k : (b + 1) * k] = (b - 1) * k + rng.permuted(np.tile(np.arange(k), (batch_size, 1)), axis=1)
    targets = tokens.copy()
    for start in range(k, n, k):
        targets[:, start : start + k] = np.take_along_axis(targets, tokens[:, start : start + k], axis=1)
    mask = np.broadcast_to(np.arange(n) >= k, (batch_size, n)).copy()
    return tokens, targets, mask
