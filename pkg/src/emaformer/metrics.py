"""Rank-based ROC AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedAUC(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores.

    ``(sum of positive ranks - n_pos (n_pos + 1) / 2) / (n_pos n_neg)``
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"roc_auc: {s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("roc_auc: labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
