"""Evaluation metrics."""

from __future__ import annotations

import numpy as np


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum identity.

    Ties get average ranks, so exchanging scores and drawing thresholds at
    random agree: a fully tied column scores exactly 0.5. O(n log n);
    requires both classes present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0/1)")
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both a positive and a negative")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # average rank (1-based) per tie group: group spanning sorted positions
    # [i, j) gets rank (i + 1 + j) / 2
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [scores.size]])
    group_rank = (starts + 1 + ends) / 2.0
    group_of = np.repeat(np.arange(starts.size), ends - starts)
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = group_rank[group_of]

    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
