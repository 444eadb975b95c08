"""Finite-difference suite over every differentiable op and loss.

Each case draws random inputs, reduces the op output to a scalar with a
fixed random weighting, and compares the analytic gradient of every input
against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, cks_view
from .autodiff import RandomSource, Tensor
from .data import EncodedBatch
from .losses import LossWeights, ced_loss, ced_pair_loss, ce_loss, cks_loss, csc_loss, total_loss
from .masks import compute_mask
from .model import ModelConfig, TaskView, forward_masked, init_model

TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    make: Callable[[RandomSource], tuple[list[np.ndarray], dict]]
    fn: Callable[..., Tensor]          # fn(*tensors, **ctx) -> scalar
    wrt: tuple[int, ...] | None = None  # inputs to check; None means all


@dataclass
class CaseResult:
    name: str
    trials: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, w))


def _away_from_zero(rng: RandomSource, shape, gap: float = 0.05) -> np.ndarray:
    x = rng.normal(1.0, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _labels(rng: RandomSource, n: int, classes: int = 2) -> np.ndarray:
    y = rng.integers(0, classes, n)
    y[:2] = [0, 0]          # at least one positive pair
    return y


def _unary(name, op, positive=False, smooth=True):
    def make(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
        x = np.abs(rng.normal(1.0, shape)) + 0.1 if positive else (
            rng.normal(1.0, shape) if smooth else _away_from_zero(rng, shape))
        return [x], {"w": rng.normal(1.0, shape)}

    return GradCase(name, make, lambda x, w: _weighted(op(x), w))


def _binary(name, op, positive_b=False):
    def make(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
        b_shape = shape if rng.integers(0, 2) else shape[1:]   # exercise broadcasting
        b = np.abs(rng.normal(1.0, b_shape)) + 0.5 if positive_b else rng.normal(1.0, b_shape)
        return [rng.normal(1.0, shape), b], {"w": rng.normal(1.0, shape)}

    return GradCase(name, make, lambda a, b, w: _weighted(op(a, b), w))


def _matmul_make(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, 3))
    if rng.integers(0, 2):
        batch = int(rng.integers(1, 3))
        return [rng.normal(1.0, (batch, n, k)), rng.normal(1.0, (batch, k, m))], {
            "w": rng.normal(1.0, (batch, n, m))}
    return [rng.normal(1.0, (n, k)), rng.normal(1.0, (k, m))], {"w": rng.normal(1.0, (n, m))}


def _layer_norm_make(rng):
    n, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    return [rng.normal(1.0, (n, d)), rng.normal(1.0, d), rng.normal(1.0, d)], {
        "w": rng.normal(1.0, (n, d))}


def _embedding_make(rng):
    v, d, n = int(rng.integers(3, 7)), int(rng.integers(2, 4)), int(rng.integers(1, 6))
    return [rng.normal(1.0, (v, d))], {"ids": rng.integers(0, v, (2, n)), "w": rng.normal(1.0, (2, n, d))}


def _dropout_fn(x, w, seed):
    return _weighted(ad.dropout(x, 0.7, RandomSource(seed), training=True), w)


def _dropout_make(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
    return [rng.normal(1.0, shape)], {"w": rng.normal(1.0, shape), "seed": int(rng.integers(0, 2**31))}


def _maximum_make(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
    k = int(rng.integers(2, 4))
    # well separated values so no coordinate sits near a tie
    base = rng.permutation(k * int(np.prod(shape))).reshape((k,) + shape) * 0.1
    return [base[i] + rng.normal(0.001, shape) for i in range(k)], {"w": rng.normal(1.0, shape)}


def _concat_make(rng):
    n = int(rng.integers(1, 4))
    return [rng.normal(1.0, (n, int(rng.integers(1, 4)))) for _ in range(3)], {}


def _concat_fn(*xs):
    out = ad.concat(list(xs), axis=1)
    w = np.linspace(-1.0, 1.0, out.data.size).reshape(out.shape)
    return _weighted(out, w)


def _take_make(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    rows = rng.integers(0, shape[0], 6)
    cols = rng.integers(0, shape[1], 6)    # repeats exercise accumulation
    return [rng.normal(1.0, shape)], {"index": (rows, cols), "w": rng.normal(1.0, 6)}


def _reshape_transpose_make(rng):
    return [rng.normal(1.0, (2, 3, 4))], {"w": rng.normal(1.0, (4, 6))}


def _rep(rng, n=None, d=None):
    n = n or int(rng.integers(2, 6))
    d = d or int(rng.integers(2, 5))
    return rng.normal(1.0, (n, d))


def _ce_make(rng):
    n = int(rng.integers(1, 6))
    return [rng.normal(1.0, (n, 3))], {"y": rng.integers(0, 3, n)}


def _csc_make(rng):
    h = _rep(rng)
    return [h], {"y": _labels(rng, h.shape[0]), "tau": float(rng.uniform(0.5, 2.0, None)),
                 "reduction": ("sum", "mean")[int(rng.integers(0, 2))]}


def _pair_make(rng):
    n = int(rng.integers(1, 5))
    return [rng.normal(1.0, (n, 3)), rng.normal(1.0, (n, 3))], {
        "tau": float(rng.uniform(0.5, 2.0, None)), "reduction": ("sum", "mean")[int(rng.integers(0, 2))]}


def _ced_sum_make(rng):
    n, t = int(rng.integers(1, 4)), int(rng.integers(2, 4))
    return [rng.normal(1.0, (n, 3)) for _ in range(t)], {
        "tau": float(rng.uniform(0.5, 2.0, None)), "teacher_grad": bool(rng.integers(0, 2))}


def _ced_sum_fn(*z, tau, teacher_grad):
    views = [TaskView(i, z_i, z_i) for i, z_i in enumerate(z)]
    return ced_loss(views, tau, teacher_grad)


def _cks_make(rng):
    h = _rep(rng)
    return [h, rng.normal(1.0, h.shape)], {"y": _labels(rng, h.shape[0]),
                                          "tau": float(rng.uniform(0.5, 2.0, None))}


def _total_make(rng):
    n = int(rng.integers(2, 5))
    return [rng.normal(1.0, (n, 3)), rng.normal(1.0, (n, 3)), rng.normal(1.0, (n, 4))], {
        "y": _labels(rng, n), "weights": LossWeights(*rng.uniform(0.1, 2.0, 3), tau=1.0)}


def _total_fn(logits, teacher, h, y, weights):
    ce = ce_loss(logits, y)
    csc = csc_loss(h, y)
    ced = ced_pair_loss(teacher, logits)
    cks = cks_loss(h, ad.scale(h, 0.5), y)
    return total_loss(ce, csc, ced, cks, weights)[0]


def _cks_view_make(rng):
    n, d, t = int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4))
    views = [rng.normal(1.0, (n, d)) for _ in range(t)]
    weights = [rng.normal(d ** -0.5, (d, d)) for _ in range(4)] + [rng.normal(1.0, ())]
    return views + weights, {"t": t, "w": rng.normal(1.0, (n, d))}


def _cks_view_fn(*xs, t, w):
    views = list(xs[:t])
    params = AttentionParams(*xs[t:])
    return _weighted(cks_view(views, params), w)


_TINY = ModelConfig(vocab_buckets=32, d_model=4, n_layers=1, n_heads=2, ffn_dim=6,
                    adapter_dim=4, max_len=6, dropout_p=0.0)


def _forward_make(rng):
    model = init_model(ModelConfig(**{**_TINY.to_dict(), "seed": int(rng.integers(0, 2**31))}))
    # non-zero up projections so every mask matters
    for name in model.adapters:
        if ".up.w" in name:
            model.params[name].data = rng.normal(0.5, model.params[name].shape)
    ids = rng.integers(3, 32, (2, 6))
    ids[:, 0] = 1
    pad = np.ones((2, 6), dtype=bool)
    pad[1, 4:] = False
    ids[1, 4:] = 0
    batch = EncodedBatch(ids, pad, np.array([0, 1]), 0)
    emb = [rng.normal(0.5, w) for w in model.mask_widths()]
    return [model.params["layer0.adapter_attn.down.w"].data.copy(), *emb], {
        "model": model, "batch": batch, "s": float(rng.uniform(0.5, 3.0, None)), "y": np.array([0, 1])}


def _forward_fn(down_w, *emb, model, batch, s, y):
    model.params["layer0.adapter_attn.down.w"] = down_w
    view = forward_masked(model, batch, [compute_mask(e, s) for e in emb])
    return ce_loss(view.logits, y)


CASES: tuple[GradCase, ...] = (
    _binary("add", ad.add),
    _binary("sub", ad.sub),
    _binary("mul", ad.mul),
    _binary("div", ad.div, positive_b=True),
    _unary("neg", ad.neg),
    _unary("scale", lambda x: ad.scale(x, -1.7)),
    _unary("sigmoid", ad.sigmoid),
    _unary("relu", ad.relu, smooth=False),
    _unary("exp", ad.exp),
    _unary("log", ad.log, positive=True),
    _unary("softmax", ad.softmax),
    _unary("log_softmax", ad.log_softmax),
    GradCase("logsumexp", lambda rng: ([rng.normal(1.0, (3, 4))], {"w": rng.normal(1.0, 3)}),
             lambda x, w: _weighted(ad.logsumexp(x), w)),
    GradCase("sum_axis", lambda rng: ([rng.normal(1.0, (3, 4))], {"w": rng.normal(1.0, 4)}),
             lambda x, w: _weighted(ad.sum(x, axis=0), w)),
    GradCase("mean", lambda rng: ([rng.normal(1.0, (3, 4))], {"w": rng.normal(1.0, 3)}),
             lambda x, w: _weighted(ad.mean(x, axis=1), w)),
    GradCase("matmul", _matmul_make, lambda a, b, w: _weighted(ad.matmul(a, b), w)),
    GradCase("concat", _concat_make, _concat_fn),
    GradCase("reshape_transpose", _reshape_transpose_make,
             lambda x, w: _weighted(ad.reshape(ad.transpose(x, (2, 0, 1)), (4, 6)), w)),
    GradCase("take", _take_make, lambda x, index, w: _weighted(ad.take(x, index), w)),
    GradCase("layer_norm", _layer_norm_make,
             lambda x, g, b, w: _weighted(ad.layer_norm(x, g, b), w)),
    GradCase("embedding", _embedding_make, lambda t, ids, w: _weighted(ad.embedding(t, ids), w)),
    _unary("l2_normalize", ad.l2_normalize),
    GradCase("dropout", _dropout_make, _dropout_fn),
    GradCase("maximum", _maximum_make, lambda *xs, w: _weighted(ad.maximum(list(xs)), w)),
    GradCase("ce_loss", _ce_make, lambda z, y: ce_loss(z, y)),
    GradCase("csc_loss", _csc_make, lambda h, y, tau, reduction: csc_loss(h, y, tau, reduction)),
    GradCase("ced_pair_loss", _pair_make,
             lambda a, b, tau, reduction: ced_pair_loss(a, b, tau, reduction)),
    GradCase("ced_loss", _ced_sum_make, _ced_sum_fn),
    GradCase("cks_loss", _cks_make, lambda a, b, y, tau: cks_loss(a, b, y, tau)),
    GradCase("total_loss", _total_make, _total_fn),
    GradCase("cks_view", _cks_view_make, _cks_view_fn),
    GradCase("masked_forward", _forward_make, _forward_fn),
)


def _check_case(case: GradCase, rng: RandomSource, step: float) -> float:
    inputs, ctx = case.make(rng)
    worst = 0.0
    if case.name == "ced_loss" and not ctx["teacher_grad"]:
        wrt = (len(inputs) - 1,)       # teachers are constants; only the student is differentiable
    else:
        wrt = case.wrt if case.wrt is not None else tuple(range(len(inputs)))
    for k in wrt:
        def f(x, k=k):
            args = [x if i == k else Tensor(v) for i, v in enumerate(inputs)]
            return case.fn(*args, **ctx)

        worst = max(worst, ad.finite_difference_check(f, inputs[k], step))
    return worst


def run_suite(trials: int = 20, seed: int = 0, step: float = 1e-4,
              cases: tuple[GradCase, ...] = CASES) -> list[CaseResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    root = RandomSource(seed)
    results = []
    for c, case in enumerate(cases):
        start = time.perf_counter()
        worst = 0.0
        for trial in range(trials):
            worst = max(worst, _check_case(case, root.spawn(c, trial), step))
        results.append(CaseResult(case.name, trials, worst, time.perf_counter() - start))
    return results
