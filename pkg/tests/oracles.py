"""Brute-force reference implementations used as test oracles."""

from itertools import combinations

import numpy as np


def all_itemsets(m: int):
    for k in range(1, m + 1):
        yield from combinations(range(m), k)


def all_supports(matrix: np.ndarray) -> dict[frozenset, float]:
    return {frozenset(items): float(matrix[:, list(items)].all(axis=1).mean()) for items in all_itemsets(matrix.shape[1])}


def brute_frequent(matrix: np.ndarray, min_s: float, supports=None) -> dict[frozenset, float]:
    supports = all_supports(matrix) if supports is None else supports
    return {f: v for f, v in supports.items() if v > min_s}


def brute_maximal(matrix: np.ndarray, min_s: float, supports=None) -> set[frozenset]:
    freq = brute_frequent(matrix, min_s, supports)
    m = matrix.shape[1]
    # support is antimonotone, so a frequent set with no frequent one-item extension has no frequent superset
    return {f for f in freq if not any(f | {j} in freq for j in range(m) if j not in f)}


def brute_rules(matrix: np.ndarray, min_s: float, min_c: float, maximal=None) -> set[tuple[frozenset, frozenset]]:
    """Every (A, B) with A, B disjoint and non-empty, A | B maximal frequent, confidence above min_c."""
    maximal = brute_maximal(matrix, min_s) if maximal is None else maximal
    cache: dict = {}

    def sup(s):
        if s not in cache:
            cache[s] = float(matrix[:, sorted(s)].all(axis=1).mean())
        return cache[s]

    rules = set()
    for union in all_itemsets(matrix.shape[1]):
        u = frozenset(union)
        if u not in maximal:
            continue
        for a in all_itemsets(len(union)):
            a_set = frozenset(union[i] for i in a)
            b_set = u - a_set
            if b_set and sup(u) / sup(a_set) > min_c:
                rules.add((a_set, b_set))
    return rules


def brute_far(real: np.ndarray, synth: np.ndarray, s_grid, c_grid):
    prec, rec = [], []
    sup_r, sup_s = all_supports(real), all_supports(synth)
    for s in s_grid:
        max_r, max_s = brute_maximal(real, s, sup_r), brute_maximal(synth, s, sup_s)
        rp, rr = [], []
        for c in c_grid:
            a, b = brute_rules(real, s, c, max_r), brute_rules(synth, s, c, max_s)
            if not a or not b:
                rp.append(None)
                rr.append(None)
            else:
                rp.append(len(a & b) / len(b))
                rr.append(len(a & b) / len(a))
        prec.append(rp)
        rec.append(rr)
    return prec, rec


def brute_hamming_knn(d_row: np.ndarray, k: int) -> list[int]:
    """k nearest indices, ties broken by lower index."""
    return sorted(range(len(d_row)), key=lambda j: (d_row[j], j))[:k]
