"""Canonical task metrics: AUROC, balanced accuracy, QWK, Harrell's C."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..errors import (
    DegenerateMarginalsError,
    EmptyClassError,
    NoComparablePairsError,
    SingleClassError,
    ValidationError,
)


def _binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both classes present")
    # Mann-Whitney U from average ranks; ties contribute one half
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_auroc(scores, labels) -> float:
    """Binary AUROC, or macro one-vs-rest AUROC when ``scores`` is ``(n, k)``.

    For the multiclass form, column ``c`` scores class ``c`` and ``labels`` hold
    integer class indices; classes absent from ``labels`` are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        uniq = np.unique(labels)
        if len(uniq) != 2:
            if len(uniq) < 2:
                raise SingleClassError("AUROC needs both classes present")
            raise ValidationError("binary AUROC got more than two label values; pass (n, k) scores")
        return _binary_auroc(scores, labels == uniq[1])
    if scores.shape[0] != len(labels):
        raise ValidationError("scores and labels differ in length")
    present = np.unique(labels)
    if len(present) < 2:
        raise SingleClassError("AUROC needs at least two classes present")
    return float(np.mean([_binary_auroc(scores[:, int(c)], labels == c) for c in present]))


def metric_balanced_accuracy(pred, labels, classes=None) -> float:
    """Mean per-class recall over ``classes`` (default: classes seen in ``labels``)."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    recalls = []
    for c in classes:
        true_c = labels == c
        if not true_c.any():
            raise EmptyClassError(f"class {c!r} has no true samples")
        recalls.append(np.mean(pred[true_c] == c))
    return float(np.mean(recalls))


def confusion_matrix(pred, labels, k: int) -> np.ndarray:
    """``O[i, j]`` counts items with true rating ``i`` and predicted rating ``j``."""
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (np.asarray(labels, dtype=int), np.asarray(pred, dtype=int)), 1)
    return out


def metric_qwk(pred, labels, k_classes: int) -> float:
    pred = np.asarray(pred, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if k_classes < 2:
        raise ValidationError("QWK needs k_classes >= 2")
    if len(pred) != len(labels) or not len(pred):
        raise ValidationError("pred and labels must be non-empty and equally long")
    for arr in (pred, labels):
        if arr.min() < 0 or arr.max() >= k_classes:
            raise ValidationError(f"ratings must lie in [0, {k_classes})")
    observed = confusion_matrix(pred, labels, k_classes).astype(np.float64)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    i, j = np.indices((k_classes, k_classes))
    weights = (i - j) ** 2 / (k_classes - 1) ** 2
    denom = (weights * expected).sum()
    if denom == 0:
        raise DegenerateMarginalsError("both raters are constant and agree; kappa undefined")
    return float(1.0 - (weights * observed).sum() / denom)


def comparable_pairs(time, event) -> np.ndarray:
    """``M[i, j]`` is True when ``time[i] < time[j]`` and ``i`` had an event."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    return (time[:, None] < time[None, :]) & event[:, None]


def metric_c_index(risk, time, event) -> float:
    """Harrell's concordance: higher risk should mean an earlier event."""
    risk = np.asarray(risk, dtype=np.float64)
    if not (len(risk) == len(time) == len(event)):
        raise ValidationError("risk, time and event differ in length")
    pairs = comparable_pairs(time, event)
    n_pairs = int(pairs.sum())
    if n_pairs == 0:
        raise NoComparablePairsError("no comparable pairs (all censored or tied times?)")
    concordant = int((pairs & (risk[:, None] > risk[None, :])).sum())
    tied = int((pairs & (risk[:, None] == risk[None, :])).sum())
    return (concordant + 0.5 * tied) / n_pairs
