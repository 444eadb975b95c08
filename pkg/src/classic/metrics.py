from __future__ import annotations

import numpy as np


def accuracy(pred, gold) -> float:
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape or pred.size == 0:
        raise ValueError("accuracy: need equal, non-empty prediction and gold arrays")
    return float((pred == gold).mean())


def macro_f1(pred, gold) -> float:
    """Mean F1 over classes that occur in ``gold``.

    A class that is never predicted has precision 0 (and hence F1 0).
    """
    pred, gold = np.asarray(pred), np.asarray(gold)
    if pred.shape != gold.shape or pred.size == 0:
        raise ValueError("macro_f1: need equal, non-empty prediction and gold arrays")
    scores = []
    for c in np.unique(gold):
        tp = float(np.sum((pred == c) & (gold == c)))
        predicted = float(np.sum(pred == c))
        support = float(np.sum(gold == c))
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        scores.append(2 * precision * recall / (precision + recall) if tp else 0.0)
    return float(np.mean(scores))
