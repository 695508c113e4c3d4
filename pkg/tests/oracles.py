"""Independent reference computations used by the tests (plain Python loops, no library solvers)."""
from __future__ import annotations

import numpy as np


def triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i, j] = s
    return out


def gauss_jordan_inverse(m):
    n = len(m)
    aug = [list(map(float, m[i])) + [1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(aug[r][col]))
        aug[col], aug[piv] = aug[piv], aug[col]
        p = aug[col][col]
        aug[col] = [v / p for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0.0:
                f = aug[r][col]
                aug[r] = [v - f * w for v, w in zip(aug[r], aug[col])]
    return np.array([row[n:] for row in aug])


def longest_path_by_enumeration(n_nodes, edges):
    """Length of the longest path, enumerating every path from every node."""
    succ = {i: [] for i in range(n_nodes)}
    for i, j in edges:
        succ[i].append(j)
    best = 0

    def walk(node, length):
        nonlocal best
        best = max(best, length)
        for nxt in succ[node]:
            walk(nxt, length + 1)

    for s in range(n_nodes):
        walk(s, 0)
    return best


def chain_walk(tokens, k, p):
    """Follow references from position ``p`` one hop at a time until block 0."""
    hops = 0
    while p >= k:
        p = tokens[p]
        hops += 1
    return tokens[p], hops


def fold_simulator(initial, ops):
    """Second boxes simulator: tracks item -> box, folding ops over that map."""
    where = {it: b for b, items in initial.items() for it in items}
    boxes = set(initial)
    for op in ops:
        boxes |= {b for b in (op.src, op.dst) if b}
        if op.kind == "put":
            where.update({it: op.dst for it in op.items})
        elif op.kind == "remove":
            for it in op.items:
                assert where.get(it) == op.src
                del where[it]
        elif op.kind == "move":
            for it in op.items:
                assert where.get(it) == op.src
                where[it] = op.dst
        elif op.kind == "move_contents":
            where = {it: (op.dst if b == op.src else b) for it, b in where.items()}
    out = {b: set() for b in boxes}
    for it, b in where.items():
        out[b].add(it)
    return {b: frozenset(v) for b, v in out.items()}
