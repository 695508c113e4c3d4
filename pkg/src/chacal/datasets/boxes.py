"""Boxes entity-tracking task: Put / Remove / Move operations over labelled boxes.

Two variants:

* ``default`` -- every box starts with 0-3 items, moves are either explicit
  ("Move the shirt from Box H to Box F.") or implicit ("Move the contents of
  Box H to Box F."), 32 operations; the answer lists every box.
* ``advanced`` -- half the boxes start with one item, moves are always
  implicit, the op count is log-uniform on [1, max_ops]; the answer lists only
  non-empty boxes.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import string
from dataclasses import asdict, dataclass, field

import numpy as np

from ..graphs import ComputationGraph
from .seeding import sample_rng

PAD, ANS, EOS = "<pad>", "<ans>", "<eos>"
SPECIALS = (PAD, ANS, EOS)
TEMPLATE_WORDS = (
    "The", "the", "There", "there", "is", "in", "Box", "and", "are", "nothing",
    "Put", "into", "Remove", "from", "Move", "to", "contents", "of", "contains",
    "empty", "All", "boxes", ",", ".",
)
LABELS = tuple(string.ascii_uppercase)
# The first 28 appear in the worked examples this task is modelled on.
NOUNS = (
    "radio", "bone", "clock", "television", "bill", "computer", "tea", "ice",
    "plant", "game", "milk", "cake", "drug", "map", "disk", "bell", "stone",
    "magazine", "cigarette", "machine", "cream", "sheet", "coat", "camera",
    "gift", "shirt", "apple", "book",
    "boat", "bag", "ball", "bottle", "bread", "brick", "brush", "candle",
    "card", "chair", "coin", "cup", "dish", "doll", "drum", "egg", "fan",
    "flag", "flower", "fork", "glass", "glove", "hat", "horn", "jar", "key",
    "kite", "lamp", "leaf", "letter", "lock", "mirror", "mug", "nail", "pen",
    "pencil", "phone", "pillow", "plate", "ring", "rope", "shoe", "sock",
    "spoon", "stamp", "string", "ticket", "towel", "toy", "watch", "wheel",
)
VOCAB_SIZES = {"default": 128, "advanced": 132}
DEFAULT_BOXES = {"default": 7, "advanced": 8}

PUT, REMOVE, MOVE, MOVE_CONTENTS = "put", "remove", "move", "move_contents"

WorldState = dict  # box label -> frozenset of item names


class TraceError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"op {index}: {message}")
        self.index = index


class GenerationError(RuntimeError):
    pass


class OutOfVocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class BoxesConfig:
    variant: str = "default"
    n_boxes: int | None = None  # 7 for default, 8 for advanced
    n_ops: int = 32  # default variant: fixed count
    max_ops: int = 31  # advanced variant: log-uniform on [1, max_ops]
    max_initial_items: int = 3  # default variant: per box
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VOCAB_SIZES:
            raise ValueError(f"unknown boxes variant {self.variant!r}")
        if self.n_boxes is None:
            object.__setattr__(self, "n_boxes", DEFAULT_BOXES[self.variant])
        if not 2 <= self.n_boxes <= len(LABELS):
            raise ValueError("n_boxes must lie in [2, 26]")
        if self.n_ops < 0 or self.max_ops < 1:
            raise ValueError("operation counts must be positive")

    @property
    def labels(self) -> tuple[str, ...]:
        return LABELS[: self.n_boxes]

    @property
    def items(self) -> tuple[str, ...]:
        return NOUNS[: len(NOUNS) - (VOCAB_SIZES["advanced"] - VOCAB_SIZES[self.variant])]

    @property
    def n_filled(self) -> int:
        return self.n_boxes // 2

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Op:
    kind: str
    items: tuple[str, ...] = ()
    src: str | None = None
    dst: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "items": list(self.items), "src": self.src, "dst": self.dst}

    @classmethod
    def from_dict(cls, d: dict) -> "Op":
        return cls(d["kind"], tuple(d["items"]), d["src"], d["dst"])


@dataclass
class BoxesSample:
    variant: str
    prompt: str
    answer: str
    initial: WorldState
    ops: list[Op]
    final: WorldState
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "prompt": self.prompt,
            "answer": self.answer,
            "initial": _state_to_json(self.initial),
            "ops": [o.to_dict() for o in self.ops],
            "final": _state_to_json(self.final),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoxesSample":
        return cls(
            d["variant"], d["prompt"], d["answer"], _state_from_json(d["initial"]),
            [Op.from_dict(o) for o in d["ops"]], _state_from_json(d["final"]), dict(d.get("meta", {})),
        )


def _state_to_json(state: WorldState) -> dict:
    return {b: sorted(items) for b, items in sorted(state.items())}


def _state_from_json(d: dict) -> WorldState:
    return {b: frozenset(items) for b, items in d.items()}


# -- oracle -------------------------------------------------------------------
def boxes_oracle(initial: WorldState, ops: list[Op]) -> WorldState:
    """Apply ``ops`` in order; raises ``TraceError`` on the first illegal op."""
    state = {b: frozenset(items) for b, items in initial.items()}
    location = {}
    for b, items in state.items():
        for it in items:
            if it in location:
                raise TraceError(-1, f"{it!r} is in both Box {location[it]} and Box {b}")
            location[it] = b
    for i, op in enumerate(ops):
        for box in (op.src, op.dst):
            if box is not None and box not in state:
                raise TraceError(i, f"unknown Box {box}")
        if op.kind == PUT:
            for it in op.items:
                if it in location:
                    raise TraceError(i, f"cannot put {it!r}: already in Box {location[it]}")
                location[it] = op.dst
            state[op.dst] = state[op.dst] | set(op.items)
        elif op.kind == REMOVE:
            missing = set(op.items) - state[op.src]
            if missing:
                raise TraceError(i, f"cannot remove {sorted(missing)} from Box {op.src}")
            state[op.src] = state[op.src] - set(op.items)
            for it in op.items:
                del location[it]
        elif op.kind == MOVE:
            missing = set(op.items) - state[op.src]
            if missing or op.src == op.dst:
                raise TraceError(i, f"cannot move {sorted(op.items)} from Box {op.src} to Box {op.dst}")
            state[op.src] = state[op.src] - set(op.items)
            state[op.dst] = state[op.dst] | set(op.items)
            for it in op.items:
                location[it] = op.dst
        elif op.kind == MOVE_CONTENTS:
            if op.src == op.dst:
                raise TraceError(i, "cannot move a box into itself")
            for it in state[op.src]:
                location[it] = op.dst
            state[op.dst] = state[op.dst] | state[op.src]
            state[op.src] = frozenset()
        else:
            raise TraceError(i, f"unknown op kind {op.kind!r}")
    return state


# -- rendering ------------------------------------------------------------------
def _items_phrase(items) -> str:
    return " and ".join(f"the {it}" for it in sorted(items))


def render_initial(state: WorldState, order: list[str], variant: str) -> str:
    clauses = []
    for b in order:
        items = state[b]
        if items:
            verb = "is" if len(items) == 1 else "are"
            clauses.append(f"{_items_phrase(items)} {verb} in Box {b}")
        elif variant == "default":
            clauses.append(f"there is nothing in Box {b}")
    text = ", ".join(clauses)
    return text[:1].upper() + text[1:] + "."


def render_op(op: Op) -> str:
    if op.kind == PUT:
        return f"Put {_items_phrase(op.items)} into Box {op.dst}."
    if op.kind == REMOVE:
        return f"Remove {_items_phrase(op.items)} from Box {op.src}."
    if op.kind == MOVE:
        return f"Move {_items_phrase(op.items)} from Box {op.src} to Box {op.dst}."
    if op.kind == MOVE_CONTENTS:
        return f"Move the contents of Box {op.src} to Box {op.dst}."
    raise ValueError(f"unknown op kind {op.kind!r}")


def render_answer(state: WorldState, variant: str) -> str:
    parts = []
    for b in sorted(state):
        if state[b]:
            parts.append(f"Box {b} contains {_items_phrase(state[b])}")
        elif variant == "default":
            parts.append(f"Box {b} is empty")
    if not parts:
        return "All boxes are empty."
    return ", ".join(parts) + "."


# -- parsing ----------------------------------------------------------------------
_INIT_CLAUSE = re.compile(r"^(?:(?P<items>the \w+(?: and the \w+)*) (?:is|are)|there is nothing) in Box (?P<box>[A-Z])$")
_PUT = re.compile(r"^Put (?P<items>the \w+(?: and the \w+)*) into Box (?P<dst>[A-Z])$")
_REMOVE = re.compile(r"^Remove (?P<items>the \w+(?: and the \w+)*) from Box (?P<src>[A-Z])$")
_MOVE = re.compile(r"^Move (?P<items>the \w+(?: and the \w+)*) from Box (?P<src>[A-Z]) to Box (?P<dst>[A-Z])$")
_MOVE_C = re.compile(r"^Move the contents of Box (?P<src>[A-Z]) to Box (?P<dst>[A-Z])$")
_ANSWER_CLAUSE = re.compile(r"^Box (?P<box>[A-Z]) (?:contains (?P<items>the \w+(?: and the \w+)*)|is empty)$")


def _parse_items(s: str | None) -> tuple[str, ...]:
    return () if not s else tuple(w[len("the "):] for w in s.split(" and "))


def parse_prompt(prompt: str, labels=None) -> tuple[WorldState, list[Op]]:
    """Inverse of the prompt renderer. Boxes absent from the first sentence start empty."""
    sentences = [s.strip() for s in prompt.strip().split(".") if s.strip()]
    if not sentences:
        raise ValueError("empty prompt")
    state: dict[str, frozenset] = {}
    first = sentences[0]
    for clause in first.split(", "):
        clause = clause[:1].lower() + clause[1:]
        m = _INIT_CLAUSE.match(clause)
        if not m:
            raise ValueError(f"cannot parse initial clause {clause!r}")
        state[m["box"]] = frozenset(_parse_items(m["items"]))
    ops = []
    for s in sentences[1:]:
        if m := _MOVE_C.match(s):
            ops.append(Op(MOVE_CONTENTS, (), m["src"], m["dst"]))
        elif m := _MOVE.match(s):
            ops.append(Op(MOVE, _parse_items(m["items"]), m["src"], m["dst"]))
        elif m := _PUT.match(s):
            ops.append(Op(PUT, _parse_items(m["items"]), None, m["dst"]))
        elif m := _REMOVE.match(s):
            ops.append(Op(REMOVE, _parse_items(m["items"]), m["src"], None))
        else:
            raise ValueError(f"cannot parse operation {s!r}")
    mentioned = set(state)
    for op in ops:
        mentioned |= {b for b in (op.src, op.dst) if b}
    for b in set(labels or ()) | mentioned:
        state.setdefault(b, frozenset())
    return state, ops


def parse_answer(answer: str) -> WorldState:
    text = answer.strip()
    if text == "All boxes are empty.":
        return {}
    state = {}
    for clause in text.rstrip(".").split(", "):
        m = _ANSWER_CLAUSE.match(clause)
        if not m:
            raise ValueError(f"cannot parse answer clause {clause!r}")
        state[m["box"]] = frozenset(_parse_items(m["items"]))
    return state


def nonempty(state: WorldState) -> WorldState:
    return {b: items for b, items in state.items() if items}


# -- generation ---------------------------------------------------------------------
def _sample_count(rng: np.random.Generator, cfg: BoxesConfig) -> int:
    if cfg.variant == "default":
        return cfg.n_ops
    # log-uniform on [1, max_ops], rounded to an integer
    return int(min(cfg.max_ops, max(1, math.floor(math.exp(rng.uniform(0.0, math.log(cfg.max_ops + 1)))))))


def _initial_state(rng: np.random.Generator, cfg: BoxesConfig) -> WorldState:
    labels = cfg.labels
    pool = list(rng.permutation(cfg.items))
    state = {b: frozenset() for b in labels}
    if cfg.variant == "default":
        for b in labels:
            k = int(rng.integers(0, cfg.max_initial_items + 1))
            state[b] = frozenset(pool.pop() for _ in range(k))
    else:
        for b in rng.choice(labels, size=cfg.n_filled, replace=False):
            state[str(b)] = frozenset([pool.pop()])
    return state


def _pick_items(rng, items, max_k: int) -> tuple[str, ...]:
    items = sorted(items)
    k = int(rng.integers(1, min(max_k, len(items)) + 1))
    return tuple(sorted(str(x) for x in rng.choice(items, size=k, replace=False)))


def _legal_op(rng: np.random.Generator, cfg: BoxesConfig, state: WorldState) -> Op:
    if cfg.variant == "advanced":
        return _legal_op_advanced(rng, cfg, state)
    labels = list(cfg.labels)
    used = set().union(*state.values())
    free = [it for it in cfg.items if it not in used]
    filled = [b for b in labels if state[b]]
    kinds = []
    if free:
        kinds.append(PUT)
    if filled:
        kinds += [REMOVE, MOVE, MOVE_CONTENTS]
    if not kinds:
        raise GenerationError("no legal operation in the current state")
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == PUT:
        return Op(PUT, _pick_items(rng, free, 2), None, str(rng.choice(labels)))
    src = str(rng.choice(filled))
    if kind == REMOVE:
        return Op(REMOVE, _pick_items(rng, state[src], 2), src, None)
    dst = str(rng.choice([b for b in labels if b != src]))
    if kind == MOVE:
        return Op(MOVE, _pick_items(rng, state[src], 2), src, dst)
    return Op(MOVE_CONTENTS, (), src, dst)


# relative odds of op kinds in the advanced variant; contents moves dominate
ADVANCED_WEIGHTS = {MOVE_CONTENTS: 2.0, PUT: 1.0, REMOVE: 1.0}


def _legal_op_advanced(rng: np.random.Generator, cfg: BoxesConfig, state: WorldState) -> Op:
    """Ops that keep exactly half of the boxes non-empty at every step."""
    labels = list(cfg.labels)
    used = set().union(*state.values())
    free = [it for it in cfg.items if it not in used]
    filled = [b for b in labels if state[b]]
    empty = [b for b in labels if not state[b]]
    removable = [b for b in filled if len(state[b]) > 1]
    kinds = [MOVE_CONTENTS] if filled and empty else []
    if free and filled:
        kinds.append(PUT)
    if removable:
        kinds.append(REMOVE)
    if not kinds:
        raise GenerationError("no legal operation in the current state")
    w = np.array([ADVANCED_WEIGHTS[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
    if kind == PUT:
        return Op(PUT, _pick_items(rng, free, 1), None, str(rng.choice(filled)))
    if kind == REMOVE:
        src = str(rng.choice(removable))
        return Op(REMOVE, _pick_items(rng, state[src], 1), src, None)
    return Op(MOVE_CONTENTS, (), str(rng.choice(filled)), str(rng.choice(empty)))


def gen_boxes_sample(cfg: BoxesConfig, rng: np.random.Generator, n_ops: int | None = None) -> BoxesSample:
    state = _initial_state(rng, cfg)
    initial = dict(state)
    order = [str(b) for b in rng.permutation(list(cfg.labels))]
    count = _sample_count(rng, cfg) if n_ops is None else n_ops
    ops = []
    for _ in range(count):
        op = _legal_op(rng, cfg, state)
        ops.append(op)
        state = boxes_oracle(state, [op])
    final = boxes_oracle(initial, ops)
    prompt = " ".join([render_initial(initial, order, cfg.variant)] + [render_op(o) for o in ops])
    return BoxesSample(cfg.variant, prompt, render_answer(final, cfg.variant), initial, ops, final)


def boxes_samples(cfg: BoxesConfig, start: int, count: int) -> list[BoxesSample]:
    out = []
    for i in range(start, start + count):
        s = gen_boxes_sample(cfg, sample_rng(cfg.seed, i))
        s.meta = {"seed": cfg.seed, "index": i, "config": cfg.digest()}
        out.append(s)
    return out


# -- dependency graph -------------------------------------------------------------------
def boxes_sample_graph(initial: WorldState, ops: list[Op]) -> ComputationGraph:
    """Item-dependency graph: one node per (item, location) state.

    Put and explicit moves name the item and its destination, so the new state
    is read straight off the sentence and starts a fresh node. Moving a box's
    contents relocates items without naming them; each such item's new state
    depends on where it was before.
    """
    node: dict[str, int] = {}
    edges = []
    n = 0
    for b in sorted(initial):
        for it in sorted(initial[b]):
            node[it] = n
            n += 1
    state = {b: set(items) for b, items in initial.items()}
    for op in ops:
        if op.kind == MOVE_CONTENTS:
            for it in sorted(state[op.src]):
                edges.append((node[it], n))
                node[it] = n
                n += 1
            state[op.dst] |= state[op.src]
            state[op.src] = set()
        elif op.kind == REMOVE:
            state[op.src] -= set(op.items)
            for it in op.items:
                del node[it]
        else:
            if op.src is not None:
                state[op.src] -= set(op.items)
            state[op.dst] |= set(op.items)
            for it in op.items:
                node[it] = n
                n += 1
    return ComputationGraph(n, tuple(edges))


# -- tokenisation ---------------------------------------------------------------------
_WORD = re.compile(r"\w+|[^\w\s]")


class BoxesVocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def for_variant(cls, variant: str) -> "BoxesVocab":
        n_nouns = len(NOUNS) - (VOCAB_SIZES["advanced"] - VOCAB_SIZES[variant])
        return cls(list(SPECIALS) + list(TEMPLATE_WORDS) + list(LABELS) + list(NOUNS[:n_nouns]))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def ans_id(self) -> int:
        return self.index[ANS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode_text(self, text: str) -> list[int]:
        out = []
        for w in _WORD.findall(text):
            if w not in self.index:
                raise OutOfVocabularyError(f"word {w!r} is not in the vocabulary")
            out.append(self.index[w])
        return out

    def decode_text(self, ids) -> str:
        text = " ".join(self.tokens[i] for i in ids)
        return re.sub(r" ([,.])", r"\1", text)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def read(cls, path) -> "BoxesVocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def tokenize_boxes(sample: BoxesSample, vocab: BoxesVocab) -> tuple[list[int], int]:
    """Token ids of ``prompt <ans> answer <eos>`` and the index where the answer starts."""
    prompt = vocab.encode_text(sample.prompt)
    answer = vocab.encode_text(sample.answer)
    ids = prompt + [vocab.ans_id] + answer + [vocab.eos_id]
    return ids, len(prompt) + 1


def detokenize_boxes(ids, vocab: BoxesVocab) -> tuple[str, str]:
    ids = list(ids)
    if ids.count(vocab.eos_id) != 1 or ids[-1] != vocab.eos_id:
        raise ValueError("encoded sample must end with exactly one stop token")
    a = ids.index(vocab.ans_id)
    return vocab.decode_text(ids[:a]), vocab.decode_text(ids[a + 1 : -1])


def lm_arrays(ids: list[int], answer_offset: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Next-token (inputs, targets, loss_mask) with loss on the answer tokens only."""
    ids = np.asarray(ids, dtype=np.int64)
    x, y = ids[:-1], ids[1:]
    mask = np.arange(len(y)) >= answer_offset - 1
    return x, y, mask
