"""Brute-force reference implementations used to cross-check the package.

These deliberately avoid the package's algorithms: substrings are
enumerated exhaustively, subsets are enumerated exhaustively, and LCS is a
memoised recursion rather than a table.
"""

from __future__ import annotations

import itertools
import math
import re
import string
from functools import lru_cache


def word_boundary_hits(text: str, needle: str) -> list[tuple[int, int]]:
    """Every (start, end) where text[start:end] == needle with non-alphanumeric neighbours."""
    hits = []
    for start in range(len(text)):
        for end in range(start + 1, len(text) + 1):
            if text[start:end] != needle:
                continue
            left_ok = start == 0 or not text[start - 1].isalnum()
            right_ok = end == len(text) or not text[end].isalnum()
            if left_ok and right_ok:
                hits.append((start, end))
    return hits


def overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def stable_selection(spans: list[tuple[int, int, int]]) -> list[set[int]]:
    """All index subsets that are pairwise disjoint and where every excluded
    span overlaps a kept span of strictly higher priority.

    ``spans`` holds (start, end, category_rank). Priority: longer first, then
    leftmost, then lower category rank.
    """

    def priority(i: int) -> tuple:
        s, e, r = spans[i]
        return (-(e - s), s, r)

    found = []
    n = len(spans)
    for size in range(n + 1):
        for kept in itertools.combinations(range(n), size):
            kept_set = set(kept)
            if any(overlap(spans[i][:2], spans[j][:2]) for i, j in itertools.combinations(kept, 2)):
                continue
            dominated = all(
                any(overlap(spans[x][:2], spans[k][:2]) and priority(k) < priority(x) for k in kept_set)
                for x in range(n)
                if x not in kept_set
            )
            if dominated:
                found.append(kept_set)
    return found


def ngram_list(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def clipped_overlap(cand: list[tuple], ref: list[tuple]) -> int:
    """Greedy one-to-one matching of n-grams, consuming reference items."""
    pool = list(ref)
    hits = 0
    for gram in cand:
        if gram in pool:
            pool.remove(gram)
            hits += 1
    return hits


def f1(overlap_count: int, cand_total: int, ref_total: int) -> float:
    if overlap_count == 0:
        return 0.0
    p = overlap_count / cand_total
    r = overlap_count / ref_total
    return 2 * p * r / (p + r)


def lcs(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge(candidate: str, reference: str) -> dict[str, float]:
    c, r = candidate.lower().split(), reference.lower().split()
    out = {}
    for n in (1, 2):
        cg, rg = ngram_list(c, n), ngram_list(r, n)
        out[f"rouge{n}"] = f1(clipped_overlap(cg, rg), len(cg), len(rg))
    out["rougeL"] = f1(lcs(tuple(c), tuple(r)), len(c), len(r))
    return out


def bleu4(candidate: str, references: list[str], eps: float = 1e-9) -> float:
    c = candidate.split()
    refs = [r.split() for r in references]
    if not c:
        return 0.0
    logs = []
    for n in range(1, 5):
        cg = ngram_list(c, n)
        if not cg:
            return 0.0
        matched = 0
        for gram in set(cg):
            matched += min(cg.count(gram), max(ngram_list(r, n).count(gram) for r in refs))
        logs.append(math.log((matched or eps) / len(cg)))
    closest = sorted(refs, key=lambda r: (abs(len(r) - len(c)), len(r)))[0]
    bp = 1.0 if len(c) > len(closest) else math.exp(1 - len(closest) / len(c))
    return 100 * bp * math.exp(sum(logs) / 4)


def squad_tokens(text: str) -> list[str]:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in set(string.punctuation))
    text = re.sub(r"\b(a|an|the)\b", " ", text)
    return text.split()


def qa(prediction: str, golds: list[str]) -> tuple[float, float]:
    p = squad_tokens(prediction)
    best_f1 = 0.0
    em = 0.0
    for g in golds:
        gt = squad_tokens(g)
        if p == gt:
            em = 1.0
        best_f1 = max(best_f1, f1(clipped_overlap([(t,) for t in p], [(t,) for t in gt]), len(p), len(gt)))
    return best_f1, em
