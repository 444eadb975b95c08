"""Cross entropy, supervised contrastive (current task and knowledge sharing),
contrastive ensemble distillation, and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .model import TaskView

REDUCTIONS = ("sum", "mean")


@dataclass
class LossWeights:
    csc: float = 1.0
    ced: float = 1.0
    cks: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class LossBreakdown:
    ce: float
    csc: float | None
    ced: float | None
    cks: float | None
    total: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError("labels", y.shape, (n,))
    if y.size and (y.min() < 0 or y.max() > 2):
        raise ValueError(f"labels must be in {{0, 1, 2}}, got {sorted(set(y.tolist()))}")
    return y


def ce_loss(logits: Tensor, labels) -> Tensor:
    n = logits.shape[0]
    if n < 1:
        raise ValueError("ce_loss: empty batch")
    y = _labels(labels, n)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), y] = 1.0
    picked = ad.sum(ad.mul(ad.log_softmax(logits), onehot))
    return ad.scale(picked, -1.0 / n)


def _off_diagonal(m: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(m), m - 1)
    cols = np.array([j for i in range(m) for j in range(m) if j != i], dtype=np.int64)
    return rows.reshape(m, m - 1), cols.reshape(m, m - 1)


def _reduce(total: Tensor, anchors: int, reduction: str) -> Tensor:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    return total if reduction == "sum" else ad.scale(total, 1.0 / anchors)


def supervised_contrastive(anchors: Tensor, candidates: Tensor, labels, tau: float,
                           reduction: str = "sum") -> Tensor:
    """Label-matched contrastive loss of ``anchors`` rows against ``candidates`` rows.

    Inputs are used as given; callers normalize. Anchors alone in their class
    contribute zero.
    """
    n = anchors.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 samples")
    if candidates.shape != anchors.shape:
        raise ShapeError("supervised_contrastive", anchors.shape, candidates.shape)
    y = _labels(labels, n)
    sim = ad.scale(ad.matmul(anchors, ad.transpose(candidates)), 1.0 / tau)
    rows, cols = _off_diagonal(n)
    log_denom = ad.logsumexp(ad.take(sim, (rows, cols)))              # (n,)

    same = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    n_pos = same.sum(axis=1)
    weight = np.where(n_pos[:, None] > 0, same / np.maximum(n_pos, 1)[:, None], 0.0)
    pos_term = ad.sum(ad.mul(sim, weight))
    denom_term = ad.sum(ad.mul(log_denom, weight.sum(axis=1)))
    return _reduce(ad.sub(denom_term, pos_term), n, reduction)


def csc_loss(h: Tensor, labels, tau: float = 1.0, reduction: str = "sum") -> Tensor:
    z = ad.l2_normalize(h)
    return supervised_contrastive(z, z, labels, tau, reduction)


def cks_loss(h_cks: Tensor, h_current: Tensor, labels, tau: float = 1.0,
             reduction: str = "sum") -> Tensor:
    if h_cks.shape != h_current.shape:
        raise ShapeError("cks_loss", h_cks.shape, h_current.shape)
    return supervised_contrastive(ad.l2_normalize(h_cks), ad.l2_normalize(h_current),
                                  labels, tau, reduction)


def ced_pair_loss(z_teacher: Tensor, z_student: Tensor, tau: float = 1.0,
                  reduction: str = "sum") -> Tensor:
    """Interleaved teacher/student logits; each row's positive is its counterpart."""
    if z_teacher.shape != z_student.shape or z_teacher.ndim != 2:
        raise ShapeError("ced_pair_loss", z_teacher.shape, z_student.shape)
    n, c = z_teacher.shape
    pairs = ad.concat([ad.reshape(z_teacher, (n, 1, c)), ad.reshape(z_student, (n, 1, c))], axis=1)
    v = ad.reshape(pairs, (2 * n, c))
    sim = ad.scale(ad.matmul(v, ad.transpose(v)), 1.0 / tau)
    rows, cols = _off_diagonal(2 * n)
    log_denom = ad.logsumexp(ad.take(sim, (rows, cols)))
    partner = np.arange(2 * n) ^ 1
    pos = ad.take(sim, (np.arange(2 * n), partner))
    return _reduce(ad.sum(ad.sub(log_denom, pos)), 2 * n, reduction)


def ced_loss(views: Sequence[TaskView], tau: float = 1.0, teacher_grad: bool = False,
             reduction: str = "sum") -> Tensor:
    """Sum of pair losses between every earlier-task view and the last (current) view."""
    if not views:
        raise ValueError("ced_loss: no views")
    student = views[-1].logits
    total = ad.add(ad.scale(ad.sum(student), 0.0), 0.0)   # +0.0 keeps the sign positive
    for view in views[:-1]:
        teacher = view.logits if teacher_grad else ad.detach(view.logits)
        total = ad.add(total, ced_pair_loss(teacher, student, tau, reduction))
    return total


def total_loss(ce: Tensor, csc: Tensor | None, ced: Tensor | None, cks: Tensor | None,
               weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum. ``None`` components are ablated and left out entirely."""
    parts = {"ce": ce, "csc": csc, "ced": ced, "cks": cks}
    for name, part in parts.items():
        if part is not None and not math.isfinite(part.item()):
            raise FloatingPointError(f"loss component {name} is not finite")
    total = ce
    for name, lam in (("csc", weights.csc), ("ced", weights.ced), ("cks", weights.cks)):
        if parts[name] is not None and lam != 0.0:
            total = ad.add(total, ad.scale(parts[name], lam))
    breakdown = LossBreakdown(
        ce=ce.item(),
        csc=None if csc is None else csc.item(),
        ced=None if ced is None else ced.item(),
        cks=None if cks is None else cks.item(),
        total=total.item(),
    )
    return total, breakdown
