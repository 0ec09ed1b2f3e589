"""Lexical correctness / faithfulness metrics, paired significance and cost
accounting for comparing decoding strategies."""
from __future__ import annotations

import math
import statistics
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InsufficientData, MissingBaseline

EXACT_MAX_N = 12
MIN_PAIRS = 5


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


def ngrams(tokens: Sequence[Hashable], n: int) -> list[tuple]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def context_coverage(generated: Sequence[Hashable], context: Sequence[Hashable], n: int = 4) -> float:
    """Fraction of generated n-grams found verbatim in the context.

    A generation shorter than ``n`` has no n-grams and scores 0.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grams = ngrams(generated, n)
    if not grams:
        return 0.0
    available = set(ngrams(context, n))
    return sum(g in available for g in grams) / len(grams)


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(
    paired_a: Sequence[float], paired_b: Sequence[float], method: str = "auto"
) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on ``a - b``.

    Zero differences are dropped.  ``method="auto"`` enumerates all sign
    assignments for up to 12 pairs and otherwise uses the normal
    approximation with continuity and tie corrections.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n < MIN_PAIRS:
        raise InsufficientData(f"need >= {MIN_PAIRS} non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"

    if method == "exact":
        if n > 20:
            raise ValueError(f"exact enumeration limited to 20 pairs, got {n}")
        signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
        null = signs @ ranks
        eps = 1e-9
        lower = float(np.mean(null <= w_plus + eps))
        upper = float(np.mean(null >= w_plus - eps))
        return min(1.0, 2.0 * min(lower, upper))
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")

    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((counts**3 - counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, 2.0 * _normal_sf(z))


def summarize(values: Sequence[float]) -> dict[str, float]:
    vals = list(values)
    return {
        "mean": statistics.fmean(vals) if vals else 0.0,
        "stddev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
        "n": len(vals),
    }


def timing_report(
    results: Mapping[str, Sequence[Mapping[str, float]]], baseline: str = "regular"
) -> dict[str, dict[str, float | None]]:
    """Per-strategy cost relative to ``baseline``.

    ``results[strategy]`` is a list of per-instance rows with
    ``tokens_generated``, ``model_calls`` and ``decode_seconds``.  Times are
    pooled (total seconds / total tokens) before taking the ratio; model-call
    ratios are exact rationals of the trace counts.
    """
    if baseline not in results:
        raise MissingBaseline(f"no results for baseline strategy {baseline!r}")

    def per_token(rows, key):
        tokens = sum(r["tokens_generated"] for r in rows)
        return sum(r[key] for r in rows) / tokens if tokens else 0.0

    base_time = per_token(results[baseline], "decode_seconds")
    base_calls = per_token(results[baseline], "model_calls")
    report = {}
    for strategy, rows in results.items():
        spt = per_token(rows, "decode_seconds")
        calls = per_token(rows, "model_calls")
        report[strategy] = {
            "seconds_per_token": spt,
            "relative_seconds_per_token": spt / base_time if base_time > 0 else None,
            "model_calls_per_token": calls,
            "model_call_ratio": calls / base_calls if base_calls > 0 else None,
            "index_build_seconds": sum(r.get("index_build_seconds", 0.0) for r in rows),
        }
    return report
