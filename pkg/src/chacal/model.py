"""GPT-2 style decoder stack with per-layer attention mode and cached decoding."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attention import CHACAL, STANDARD, AttentionConfig, AttentionWeights, multi_head_forward
from .numcore import Tensor

CHECKPOINT_MAGIC = b"CHACALCK"


class SequenceTooLongError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    max_seq_len: int
    d_model: int = 128
    n_heads: int = 4
    d_inner: int = 512
    attention: list[AttentionConfig] = field(default_factory=list)
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be >= 1")
        self.attention = [a if isinstance(a, AttentionConfig) else AttentionConfig(**a) for a in self.attention]
        if not self.attention:
            raise ValueError("a model needs at least one layer")
        for a in self.attention:
            if a.d_model != self.d_model:
                raise ValueError("attention d_model does not match model d_model")

    @property
    def n_layers(self) -> int:
        return len(self.attention)

    @classmethod
    def stack(cls, modes: list[str], *, vocab_size: int, max_seq_len: int, d_model: int = 128, n_heads: int = 4,
              d_inner: int = 512, gamma: float = 0.9, remove_diagonal: bool = True,
              tie_embeddings: bool = True) -> "ModelConfig":
        att = [AttentionConfig(d_model, n_heads, m, gamma, remove_diagonal) for m in modes]
        return cls(vocab_size, max_seq_len, d_model, n_heads, d_inner, att, tie_embeddings)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_inner": self.d_inner,
            "attention": [a.to_dict() for a in self.attention],
            "tie_embeddings": self.tie_embeddings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerCache:
    k: np.ndarray  # (h, t, d_head)
    v: np.ndarray
    y: np.ndarray | None = None  # ChaCAL layers only


@dataclass
class DecodeState:
    layers: list[LayerCache]
    length: int
    # multiply-adds spent in the attention rows of the last step, per ChaCAL head
    last_step_ops: int = 0

    def check(self, model: "TransformerLM") -> None:
        """Assert the cache covers ``length`` positions in every layer (debug aid)."""
        for cfg, cache in zip(model.config.attention, self.layers):
            assert cache.k.shape[1] == self.length and cache.v.shape[1] == self.length
            if cfg.mode != CHACAL:
                continue
            assert cache.y is not None and cache.y.shape[1] == self.length


class TransformerLM:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        std = 0.02
        out_std = std / math.sqrt(2 * c.n_layers)
        self.params["wte"] = Tensor(rng.normal(0, std, (c.vocab_size, c.d_model)), requires_grad=True)
        self.params["wpe"] = Tensor(rng.normal(0, 0.01, (c.max_seq_len, c.d_model)), requires_grad=True)
        self.attn: list[AttentionWeights] = []
        for i, acfg in enumerate(c.attention):
            p = f"h{i}."
            self.params[p + "ln1.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
            self.params[p + "ln1.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            w = AttentionWeights.init(acfg, rng, std, out_std)
            self.attn.append(w)
            for n, t in w.tensors().items():
                self.params[p + "attn." + n] = t
            self.params[p + "ln2.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
            self.params[p + "ln2.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
            self.params[p + "mlp.w1"] = Tensor(rng.normal(0, std, (c.d_model, c.d_inner)), requires_grad=True)
            self.params[p + "mlp.b1"] = Tensor(np.zeros(c.d_inner), requires_grad=True)
            self.params[p + "mlp.w2"] = Tensor(rng.normal(0, out_std, (c.d_inner, c.d_model)), requires_grad=True)
            self.params[p + "mlp.b2"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        self.params["lnf.g"] = Tensor(np.ones(c.d_model), requires_grad=True)
        self.params["lnf.b"] = Tensor(np.zeros(c.d_model), requires_grad=True)
        if not c.tie_embeddings:
            self.params["head"] = Tensor(rng.normal(0, std, (c.d_model, c.vocab_size)), requires_grad=True)

    # -- parameters ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict mismatch: {sorted(missing)}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr)

    def astype(self, dtype) -> "TransformerLM":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    # -- forward ------------------------------------------------------------
    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        n = ids.shape[-1]
        if n < 1:
            raise ValueError("empty token sequence")
        if n > self.config.max_seq_len:
            raise SequenceTooLongError(f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return ids

    def block_forward(self, x: Tensor, layer: int, capture: dict | None = None) -> Tensor:
        n = x.shape[-2]
        if n > self.config.max_seq_len:
            raise SequenceTooLongError(f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}")
        p = self.params
        pre = f"h{layer}."
        h = nc.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = x + multi_head_forward(h, self.attn[layer], self.config.attention[layer], capture)
        h = nc.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = nc.gelu(nc.linear(h, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
        return x + nc.linear(h, p[pre + "mlp.w2"], p[pre + "mlp.b2"])

    def _logits(self, x: Tensor) -> Tensor:
        x = nc.layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])
        head = self.params["wte"].T if self.config.tie_embeddings else self.params["head"]
        return nc.matmul(x, head)

    def forward(self, tokens, captures: list | None = None) -> Tensor:
        """Logits of shape (..., n, vocab) for token ids of shape (..., n)."""
        ids = self._check_tokens(tokens)
        n = ids.shape[-1]
        x = nc.embedding(self.params["wte"], ids) + self.params["wpe"][:n]
        for i in range(self.config.n_layers):
            cap = None
            if captures is not None:
                cap = {}
                captures.append(cap)
            x = self.block_forward(x, i, cap)
        return self._logits(x)

    __call__ = forward

    # -- incremental decoding -------------------------------------------------
    def prefill(self, tokens) -> tuple[np.ndarray, DecodeState]:
        ids = self._check_tokens(tokens)
        if ids.ndim != 1:
            raise ValueError("prefill takes a single sequence")
        caps: list[dict] = []
        with nc.no_grad():
            logits = self.forward(ids, caps)
        layers = []
        for cfg, cap in zip(self.config.attention, caps):
            layers.append(LayerCache(cap["k"].copy(), cap["v"].copy(), cap["y"].copy() if cfg.mode == CHACAL else None))
        return logits.data[-1], DecodeState(layers, len(ids))

    def _attend_step(self, cfg: AttentionConfig, cache: LayerCache, q, k, v) -> tuple[np.ndarray, LayerCache, int]:
        # q, k, v: (h, d_head) for the new position t
        keys = np.concatenate([cache.k, k[:, None, :]], axis=1)
        vals = np.concatenate([cache.v, v[:, None, :]], axis=1)
        t = keys.shape[1] - 1
        scores = np.einsum("hd,htd->ht", q, keys) / math.sqrt(q.shape[-1])
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        av = np.einsum("ht,htd->hd", a, vals)
        ops = (t + 1) * q.shape[-1] * 2
        if cfg.mode == STANDARD:
            return av, LayerCache(keys, vals), ops
        g = cfg.gamma
        c_t = (1.0 - g) * av
        a_hat = a.copy()
        if cfg.remove_diagonal:
            a_hat[:, t] = 0.0
        b_row = -g * a_hat[:, :t]  # B[t, i] for i < t
        b_tt = 1.0 - g * a_hat[:, t]
        y_t = (c_t - np.einsum("ht,htd->hd", b_row, cache.y)) / b_tt[:, None]
        ops += t * q.shape[-1]
        y = np.concatenate([cache.y, y_t[:, None, :]], axis=1)
        return y_t, LayerCache(keys, vals, y), ops

    def decode_step(self, state: DecodeState, token: int) -> tuple[np.ndarray, DecodeState]:
        """Advance one token. ChaCAL rows use one forward-substitution step."""
        c = self.config
        t = state.length
        if t >= c.max_seq_len:
            raise SequenceTooLongError(f"decode position {t} exceeds max_seq_len={c.max_seq_len}")
        if not 0 <= token < c.vocab_size:
            raise ValueError(f"token id {token} out of range")
        p = {k: v.data for k, v in self.params.items()}
        x = p["wte"][token] + p["wpe"][t]
        new_layers = []
        chacal_ops = 0
        for i, (acfg, cache, w) in enumerate(zip(c.attention, state.layers, self.attn)):
            pre = f"h{i}."
            h = _ln(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            dh = acfg.d_head
            q = (h @ w.w_q.data + _b(w.b_q)).reshape(acfg.n_heads, dh)
            k = (h @ w.w_k.data + _b(w.b_k)).reshape(acfg.n_heads, dh)
            v = (h @ w.w_v.data + _b(w.b_v)).reshape(acfg.n_heads, dh)
            y, cache, ops = self._attend_step(acfg, cache, q, k, v)
            if acfg.mode == CHACAL:
                chacal_ops = max(chacal_ops, ops)
            new_layers.append(cache)
            x = x + y.reshape(-1) @ w.w_o.data + _b(w.b_o)
            h = _ln(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = nc.gelu(Tensor(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"], dtype=h.dtype)).data
            x = x + h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        x = _ln(x, p["lnf.g"], p["lnf.b"])
        logits = x @ (p["wte"].T if c.tie_embeddings else p["head"])
        return logits, DecodeState(new_layers, t + 1, chacal_ops)

    def generate(self, prompt, max_new: int, stop_token: int | None = None) -> list[int]:
        """Greedy continuation; the stop token is included when produced."""
        prompt = list(prompt)
        if not prompt:
            raise ValueError("prompt must be non-empty")
        max_new = min(max_new, self.config.max_seq_len - len(prompt) + 1)
        out: list[int] = []
        if max_new <= 0:
            return out
        logits, state = self.prefill(prompt)
        while True:
            tok = int(np.argmax(logits))
            out.append(tok)
            if tok == stop_token or len(out) >= max_new or state.length >= self.config.max_seq_len:
                return out
            logits, state = self.decode_step(state, tok)

    # -- checkpoints --------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.config, self.state_dict(), extra)

    @classmethod
    def load(cls, path) -> "TransformerLM":
        config, state, _ = load_checkpoint(path)
        model = cls(config)
        model.load_state_dict(state)
        return model


def _b(t: Tensor | None):
    return 0.0 if t is None else t.data


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + nc.LN_EPS) * g + b


def save_checkpoint(path, config: ModelConfig, state: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Magic, u64 header length, JSON header, then raw little-endian tensors."""
    table = {}
    offset = 0
    blobs = []
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        table[name] = {"offset": offset, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|=")}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config.to_dict(), "tensors": table, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    base = 16 + hlen
    state = {}
    for name, info in header["tensors"].items():
        dt = np.dtype("<" + info["dtype"])
        count = int(np.prod(info["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=base + info["offset"])
        state[name] = arr.reshape(info["shape"]).astype(dt.newbyteorder("="))
    return ModelConfig.from_dict(header["config"]), state, header["extra"]
