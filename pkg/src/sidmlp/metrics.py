"""Ranking metrics, teacher-recovery ratios, and the seed-stability test.

All metrics assume leave-one-out evaluation: a single relevant target per
case, so NDCG reduces to 1/log2(rank+1) when the target is ranked within
the cutoff and 0 otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass
class EvalReport:
    recall5: float
    recall10: float
    ndcg5: float
    ndcg10: float
    n: int
    empty_rankings: int = 0
    recovery: float | None = None
    per_digit_acc: tuple[float, ...] | None = None

    def as_dict(self) -> dict:
        out = {"recall@5": self.recall5, "recall@10": self.recall10,
               "ndcg@5": self.ndcg5, "ndcg@10": self.ndcg10, "n": self.n}
        if self.recovery is not None:
            out["recovery"] = self.recovery
        if self.per_digit_acc is not None:
            for i, a in enumerate(self.per_digit_acc, 1):
                out[f"digit{i}_top1"] = a
        return out


def recall_at_k(ranked_items, target, k: int) -> float:
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    return 1.0 if target in list(ranked_items)[:k] else 0.0


def ndcg_at_k(ranked_items, target, k: int) -> float:
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    ranked = list(ranked_items)[:k]
    for rank, item in enumerate(ranked, start=1):
        if item == target:
            return 1.0 / math.log2(rank + 1)
    return 0.0


def evaluate_rankings(rankings, targets, ks=(5, 10)) -> EvalReport:
    """Mean Recall@K / NDCG@K over test cases; empty rankings score zero."""
    if len(rankings) != len(targets):
        raise ValueError(f"{len(rankings)} rankings for {len(targets)} targets")
    acc = {k: [0.0, 0.0] for k in ks}
    empty = 0
    for items, target in zip(rankings, targets):
        if not items:
            empty += 1
            continue
        for k in ks:
            acc[k][0] += recall_at_k(items, target, k)
            acc[k][1] += ndcg_at_k(items, target, k)
    n = len(targets)
    means = {k: (v[0] / n, v[1] / n) if n else (0.0, 0.0) for k, v in acc.items()}
    return EvalReport(recall5=means[5][0], recall10=means[10][0],
                      ndcg5=means[5][1], ndcg10=means[10][1],
                      n=n, empty_rankings=empty)


def recovery_ratio(student_ndcg10: float, teacher_ndcg10: float) -> float:
    if teacher_ndcg10 <= 0:
        raise ValueError("teacher NDCG@10 must be positive for a recovery ratio")
    return student_ndcg10 / teacher_ndcg10


def per_digit_accuracy(logits_fn, samples, trie, sid_len: int) -> tuple[float, ...]:
    """Teacher-forced top-1 accuracy per digit position.

    `logits_fn(sample, t, prefix_digits) -> (C,)` returns raw logits for
    digit t given the ground-truth prefix; the argmax is taken over the
    trie-masked logits.
    """
    hits = np.zeros(sid_len)
    for s in samples:
        sid = tuple(trie.sid_of_item(s.target))
        for t in range(1, sid_len + 1):
            prefix = sid[: t - 1]
            logits = np.asarray(logits_fn(s, t, prefix), dtype=np.float64)
            masked = np.where(trie.mask_vector(prefix), logits, -np.inf)
            hits[t - 1] += int(np.argmax(masked)) == sid[t - 1]
    return tuple(hits / max(len(samples), 1))


# ---------------------------------------------------------------------------
# seed-stability non-inferiority test

@dataclass(frozen=True)
class TTestInput:
    values: tuple[float, ...]        # per-seed student metric
    baseline: float                  # deterministic teacher metric
    margin_rel: float = 0.01         # relative non-inferiority margin

    def __post_init__(self):
        if len(self.values) < 2:
            raise ValueError("need at least two seed values")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if self.margin_rel < 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p_value: float
    passed: bool
    margin: float
    df: int


def noninferiority_test(inp: TTestInput, alpha: float = 0.05) -> TTestResult:
    """One-sided test of H1: mean(values) - baseline > -margin.

    t = (mean - baseline + margin) / (s / sqrt(n)) with df = n-1; the
    p-value is the survival function of the t distribution. A zero sample
    standard deviation degenerates to the sign of the numerator.
    """
    x = np.asarray(inp.values, dtype=np.float64)
    n = len(x)
    margin = inp.margin_rel * inp.baseline
    shift = float(x.mean() - inp.baseline + margin)
    s = float(x.std(ddof=1))
    if s == 0.0:
        passed = shift > 0
        return TTestResult(t_stat=math.inf if passed else -math.inf,
                           p_value=0.0 if passed else 1.0,
                           passed=passed, margin=margin, df=n - 1)
    t = shift / (s / math.sqrt(n))
    p = float(stats.t.sf(t, df=n - 1))
    return TTestResult(t_stat=t, p_value=p, passed=p < alpha, margin=margin, df=n - 1)
