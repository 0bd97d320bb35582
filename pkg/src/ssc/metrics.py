"""Instance-based mean average precision over per-image category rankings."""

from __future__ import annotations

import numpy as np


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Per-image AP: mean precision at each positive's rank.

    Categories are ranked by descending score, ties broken toward the lower
    category index.  Returns None when the image has no positive labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be "
                         "equal-length vectors")
    if labels.sum() == 0:
        return None
    s = scores.shape[0]
    order = np.lexsort((np.arange(s), -scores))
    ranked = labels[order].astype(np.float64)
    cum_pos = np.cumsum(ranked)
    ranks = np.arange(1, s + 1)
    precisions = cum_pos[ranked > 0] / ranks[ranked > 0]
    return float(precisions.mean())


def instance_map(score_rows: np.ndarray, label_rows: np.ndarray) -> tuple[float, int]:
    """Mean of per-image APs; returns (mAP, number of zero-positive images skipped)."""
    aps = []
    skipped = 0
    for scores, labels in zip(score_rows, label_rows):
        ap = average_precision(scores, labels)
        if ap is None:
            skipped += 1
        else:
            aps.append(ap)
    if not aps:
        raise ValueError("no image with positive labels")
    return float(np.mean(aps)), skipped
