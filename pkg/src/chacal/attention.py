"""Causal multi-head attention with an optional chain-summing (ChaCAL) head.

Standard heads return ``A @ V``. ChaCAL heads return the solution ``Y`` of
``(I - gamma * A_hat) Y = (1 - gamma) A V`` where ``A_hat`` is ``A`` with
its diagonal zeroed (by default). Expanding the inverse as a geometric series
shows ``Y`` sums attention paths of every length with weight ``gamma**(p-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

STANDARD = "standard"
CHACAL = "chacal"


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    mode: str = STANDARD
    gamma: float = 0.9
    remove_diagonal: bool = True

    def __post_init__(self):
        if self.mode not in (STANDARD, CHACAL):
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.mode == CHACAL else 0.0

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "mode": self.mode,
            "gamma": self.gamma,
            "remove_diagonal": self.remove_diagonal,
        }


@dataclass
class AttentionWeights:
    """Fused per-head projections: head ``h`` uses columns ``h*d_head:(h+1)*d_head``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None = None
    b_k: Tensor | None = None
    b_v: Tensor | None = None
    b_o: Tensor | None = None

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator, std: float = 0.02, out_std: float | None = None,
             bias: bool = True) -> "AttentionWeights":
        d = cfg.d_model
        out_std = std if out_std is None else out_std

        def w(s):
            return Tensor(rng.normal(0.0, s, (d, d)), requires_grad=True)

        def b():
            return Tensor(np.zeros(d), requires_grad=True) if bias else None

        return cls(w(std), w(std), w(std), w(out_std), b(), b(), b(), b())

    def tensors(self) -> dict[str, Tensor]:
        names = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def causal_mask(n: int) -> Tensor:
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    return Tensor(np.triu(np.full((n, n), nc.MASK_VALUE), k=1))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., n, d) -> (..., h, n, d_head)
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, n_heads, d // n_heads)
    nd = len(lead)
    axes = list(range(nd)) + [nd + 1, nd, nd + 2]
    return nc.permute(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    axes = list(range(nd)) + [nd + 1, nd, nd + 2]
    return nc.permute(x, axes).reshape(*lead, n, h * dh)


def project_qkv(x: Tensor, w: AttentionWeights, n_heads: int) -> tuple[Tensor, Tensor, Tensor]:
    q = _split_heads(nc.linear(x, w.w_q, w.b_q), n_heads)
    k = _split_heads(nc.linear(x, w.w_k, w.b_k), n_heads)
    v = _split_heads(nc.linear(x, w.w_v, w.b_v), n_heads)
    return q, k, v


def attention_probs(q: Tensor, k: Tensor) -> Tensor:
    """Causal softmax attention for (..., n, d_k) queries and keys."""
    n, dk = q.shape[-2], q.shape[-1]
    scores = nc.matmul(q, k.T) * (1.0 / math.sqrt(dk))
    return nc.softmax_rows(scores, causal_mask(n))


def attention_matrix(x: Tensor, w: AttentionWeights, head: int, cfg: AttentionConfig) -> Tensor:
    """Row-stochastic lower-triangular attention matrix of one head."""
    if not 0 <= head < cfg.n_heads:
        raise IndexError(f"head {head} out of range for {cfg.n_heads} heads")
    q, k, _ = project_qkv(x, w, cfg.n_heads)
    return attention_probs(q[..., head, :, :], k[..., head, :, :])


def _offdiag(n: int, dtype) -> np.ndarray:
    return (1.0 - np.eye(n)).astype(dtype)


def chain_matrix(a: Tensor, cfg: AttentionConfig) -> Tensor:
    """``B = I - gamma * A_hat``."""
    n = a.shape[-1]
    a_hat = nc.mul(a, _offdiag(n, a.dtype)) if cfg.remove_diagonal else a
    return nc.sub(np.eye(n, dtype=a.dtype), nc.mul(a_hat, cfg.gamma))


def head_output(a: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    av = nc.matmul(a, v)
    if cfg.mode == STANDARD:
        return av
    b = chain_matrix(a, cfg)
    diag = np.diagonal(b.data, axis1=-2, axis2=-1)
    assert np.all(np.abs(diag) >= 1.0 - cfg.gamma - 1e-6), "I - gamma*A_hat lost its diagonal bound"
    c = nc.mul(av, 1.0 - cfg.gamma)
    return nc.solve_lower_triangular(b, c)


def multi_head_forward(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, capture: dict | None = None) -> Tensor:
    """Attention sublayer for (..., n, d_model) input.

    If ``capture`` is a dict, the per-head keys, values and head outputs
    (plain arrays) are stored in it for incremental decoding.
    """
    q, k, v = project_qkv(x, w, cfg.n_heads)
    a = attention_probs(q, k)
    y = head_output(a, v, cfg)
    if capture is not None:
        capture.update(k=k.data, v=v.data, y=y.data, a=a.data)
    return nc.linear(_merge_heads(y), w.w_o, w.b_o)


def fixed_point_residual(a, v, y, gamma: float) -> float:
    """Relative sup-norm residual of ``Z -> A (gamma Z + (1 - gamma) V)`` at ``y``."""
    a, v, y = (np.asarray(getattr(t, "data", t), dtype=np.float64) for t in (a, v, y))
    fy = a @ (gamma * y + (1.0 - gamma) * v)
    return float(np.max(np.abs(fy - y)) / (1.0 + np.max(np.abs(y))))
