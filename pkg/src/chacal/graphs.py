"""Dependency graphs of entity-tracking instances and the layer-count bound.

Nodes are state variables in creation order; an edge ``i -> j`` means state
``i`` was used directly to compute state ``j``, so every edge points forward
and the graph is acyclic by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ComputationGraph:
    n_nodes: int
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        for i, j in self.edges:
            if not (0 <= i < j < self.n_nodes):
                raise GraphError(f"edge ({i}, {j}) must satisfy 0 <= i < j < {self.n_nodes}")

    def predecessors(self) -> list[list[int]]:
        preds: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            preds[j].append(i)
        return preds

    def to_json(self) -> str:
        return json.dumps({"n_nodes": self.n_nodes, "edges": [list(e) for e in self.edges]})

    @classmethod
    def from_json(cls, text: str) -> "ComputationGraph":
        d = json.loads(text)
        return cls(d["n_nodes"], tuple(tuple(e) for e in d["edges"]))

    @classmethod
    def chain(cls, n_nodes: int) -> "ComputationGraph":
        return cls(n_nodes, tuple((i, i + 1) for i in range(n_nodes - 1)))


def depth(g: ComputationGraph) -> int:
    """Edge count of the longest directed path; node index order is topological."""
    longest = [0] * g.n_nodes
    for j, preds in enumerate(g.predecessors()):
        if preds:
            longest[j] = 1 + max(longest[i] for i in preds)
    return max(longest, default=0)


def l_min(g_or_depth) -> int:
    """ceil(log2(depth + 1)), computed exactly on integers."""
    d = g_or_depth if isinstance(g_or_depth, (int, np.integer)) else depth(g_or_depth)
    if d < 0:
        raise ValueError("depth must be non-negative")
    return int(d).bit_length()


def simulate_receptive_field(chain_depth: int, layers: int) -> int:
    """How far along a chain of ``chain_depth`` edges its head can see after ``layers`` layers.

    Node ``i`` starts knowing only its own content, i.e. nodes ``i..i+r_i``
    with ``r_i = 0``. In one layer a node may only query the first node it
    holds a reference to but has not absorbed (``i + r_i + 1``) and merges
    that node's knowledge. All nodes update in parallel.
    """
    if chain_depth < 0 or layers < 0:
        raise ValueError("chain_depth and layers must be non-negative")
    n = chain_depth
    idx = np.arange(n + 1)
    r = np.zeros(n + 1, dtype=np.int64)
    for _ in range(layers):
        nxt = idx + r + 1
        ok = nxt <= n
        new = r.copy()
        new[ok] = r[ok] + 1 + r[nxt[ok]]
        r = np.minimum(new, n - idx)
    return int(r[0])


def min_layers_by_simulation(chain_depth: int) -> int:
    layers = 0
    while simulate_receptive_field(chain_depth, layers) < chain_depth:
        layers += 1
    return layers


def theorem_check(max_depth: int = 200) -> tuple[bool, int | None]:
    """Compare the simulated minimum with ``l_min`` for every chain depth up to ``max_depth``.

    Returns (passed, first failing depth or None).
    """
    for n in range(max_depth + 1):
        if min_layers_by_simulation(n) != l_min(n):
            return False, n
    return True, None


def toy_sample_graph(sample, k: int) -> ComputationGraph:
    """Dependency graph of a toy sample: an edge from each referenced position to the referring index token."""
    tokens = list(sample.tokens)
    n = len(tokens)
    if k < 1 or n % k:
        raise GraphError(f"block size {k} does not divide sequence length {n}")
    edges = []
    for p in range(k, n):
        ref = tokens[p]
        block = p // k
        if not (block - 1) * k <= ref < block * k:
            raise GraphError(f"position {p} references {ref}, outside the preceding block")
        edges.append((ref, p))
    return ComputationGraph(n, tuple(edges))
