"""Task-based self-attention that mixes per-task views into one knowledge-sharing view."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RandomSource, ShapeError, Tensor


@dataclass
class AttentionParams:
    w_f: Tensor
    w_g: Tensor
    w_v: Tensor
    w_q: Tensor
    gamma: Tensor

    @classmethod
    def init(cls, d: int, rng: RandomSource) -> "AttentionParams":
        def w():
            return ad.parameter(rng.normal(d ** -0.5, (d, d)))

        return cls(w(), w(), w(), w(), ad.parameter(np.zeros(())))

    def tensors(self) -> dict[str, Tensor]:
        return {"attn.w_f": self.w_f, "attn.w_g": self.w_g, "attn.w_v": self.w_v,
                "attn.w_q": self.w_q, "attn.gamma": self.gamma}


def _stack(views: Sequence[Tensor]) -> Tensor:
    n, d = views[0].shape
    for v in views[1:]:
        if v.shape != (n, d):
            raise ShapeError("cks_view", views[0].shape, v.shape)
    return ad.concat([ad.reshape(v, (n, 1, d)) for v in views], axis=1)   # (N, t, d)


def attention_scores(views: Sequence[Tensor], params: AttentionParams) -> Tensor:
    """alpha[n, j, i]: weight of task i when building the output for task j of sample n."""
    stacked = _stack(views)
    f = ad.matmul(stacked, ad.transpose(params.w_f))
    g = ad.matmul(stacked, ad.transpose(params.w_g))
    s = ad.matmul(f, ad.transpose(g, (0, 2, 1)))            # s[n, i, j]
    return ad.softmax(ad.transpose(s, (0, 2, 1)))          # normalized over i


def cks_view(views: Sequence[Tensor], params: AttentionParams) -> Tensor:
    """sum_j (gamma * o_j + h_j) per sample, with o_j = W_v sum_i alpha[j, i] W_q h_i."""
    if not views:
        raise ValueError("cks_view: no views")
    stacked = _stack(views)
    alpha = attention_scores(views, params)
    q = ad.matmul(stacked, ad.transpose(params.w_q))
    o = ad.matmul(ad.matmul(alpha, q), ad.transpose(params.w_v))   # (N, t, d)
    mixed = ad.add(ad.mul(o, params.gamma), stacked)
    return ad.sum(mixed, axis=1)
