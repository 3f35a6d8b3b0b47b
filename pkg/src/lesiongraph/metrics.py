"""ROC AUC, balanced evaluation subsets and Welch's t-test."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata


class ProtocolError(ValueError):
    pass


class UndefinedAUCError(ProtocolError):
    pass


class DegenerateTestError(ProtocolError):
    pass


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC AUC needs both classes present")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_subsets(ids: Sequence[str], labels, k: int, rng: np.random.Generator) -> list[list[str]]:
    """k subsets, each holding every positive plus one part of a random k-way split of negatives."""
    ids = list(ids)
    y = np.asarray(labels).astype(int)
    pos = [i for i, lab in zip(ids, y) if lab == 1]
    neg = [i for i, lab in zip(ids, y) if lab == 0]
    if k < 1:
        raise ProtocolError("k must be positive")
    if not pos:
        raise ProtocolError("balanced subsets need at least one positive")
    if len(neg) < k:
        raise ProtocolError(f"need at least {k} negatives for {k} balanced subsets, got {len(neg)}")
    if k == 1:
        return [ids]
    perm = rng.permutation(len(neg))
    parts = np.array_split(perm, k)
    return [pos + [neg[j] for j in part] for part in parts]


def balanced_auc(scores: dict[str, float], labels: dict[str, int], subsets: list[list[str]]) -> float:
    return float(np.mean([roc_auc([scores[i] for i in s], [labels[i] for i in s]) for s in subsets]))


def welch_ttest(a, b) -> tuple[float, float, float]:
    """Two-sided Welch test. Returns (t, degrees of freedom, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateTestError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        raise DegenerateTestError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), float(df), min(p, 1.0)
