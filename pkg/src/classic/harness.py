"""Sequential domain-incremental training and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, cks_view
from .autodiff import RandomSource
from .data import Example, TaskDataset, batch_iter, encode
from .losses import (LossWeights, ced_loss, ce_loss, cks_loss, csc_loss, total_loss)
from .masks import (S_MAX, MaskStore, anneal, TaskEmbedding, protect_gradients,
                    weight_protection)
from .metrics import accuracy, macro_f1
from .model import AdapterModel, ModelConfig, forward_masked, init_model, multi_view_forward
from .optim import Adam

log = logging.getLogger(__name__)

BASELINES = ("classic", "ncl", "one")
MODES = ("dil", "til")
OBJECTIVES = ("ced", "cks", "csc")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    mask_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    loss_reduction: str = "sum"
    ablate: tuple[str, ...] = ()
    baseline: str = "classic"
    mode: str = "dil"
    teacher_grad: bool = False
    s_max: float = S_MAX
    mask_threshold: float = 0.5
    binary_masks: bool = True
    protect_cutoff: float = 0.999
    protect_rule: str = "unit"
    early_stop: bool = False
    patience: int = 5
    sequence_seeds: tuple[int, ...] = (0,)
    seed: int = 0

    def __post_init__(self):
        self.ablate = tuple(sorted(set(self.ablate)))
        self.sequence_seeds = tuple(sorted({int(s) for s in self.sequence_seeds}))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        bad = set(self.ablate) - set(OBJECTIVES)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}")
        if not self.sequence_seeds:
            raise ValueError("need at least one sequence seed")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def uses_masks(self) -> bool:
        return self.baseline == "classic"


# ---------------------------------------------------------------------------
# state


class DataRegistry:
    """Hands out each task's training split once; finished tasks are dropped."""

    def __init__(self, suite: Iterable[TaskDataset]):
        self._train = {t.name: list(t.train) for t in suite}

    def take(self, name: str) -> list[Example]:
        return self._train[name]

    def release(self, name: str) -> None:
        self._train.pop(name, None)

    def held(self) -> list[str]:
        return sorted(self._train)


@dataclass
class LearnerState:
    config: RunConfig
    model: AdapterModel
    store: MaskStore
    attention: AttentionParams
    optimizer: Adam
    rng: RandomSource
    task_names: list[str] = field(default_factory=list)
    current: TaskEmbedding | None = None

    @property
    def n_finished(self) -> int:
        return len(self.task_names)


def new_state(config: RunConfig, seed: int) -> LearnerState:
    rng = RandomSource(seed)
    model = init_model(replace(config.model, seed=int(rng.spawn(0).integers(0, 2**31))))
    store = MaskStore(model.mask_widths(), s_max=config.s_max, threshold=config.mask_threshold,
                      binary_masks=config.binary_masks)
    return LearnerState(config, model, store, AttentionParams.init(model.config.d_model, rng.spawn(1)),
                        Adam(config.lr, config.beta1, config.beta2, config.eps), rng)


def _trainable(state: LearnerState) -> dict[str, ad.Tensor]:
    params = dict(state.model.trainable())
    if state.config.uses_masks:
        params.update(state.attention.tensors())
        if state.current is not None:
            for k, e in enumerate(state.current.vectors):
                params[f"mask.{state.current.task}.{k}"] = e
    return params


def _frozen_entries(state: LearnerState) -> dict[str, np.ndarray]:
    if not state.config.uses_masks or not state.store.tasks:
        return {}
    shapes = {n: p.shape for n, p in state.model.params.items()}
    levels = weight_protection(state.model.mask_layers, state.store.accumulated(), shapes,
                               state.config.protect_rule)
    return {name: level > state.config.protect_cutoff for name, level in levels.items()}


# ---------------------------------------------------------------------------
# training


def _step_losses(state: LearnerState, batch, s: float, training: bool):
    cfg = state.config
    y = batch.labels
    if not cfg.uses_masks:
        view = forward_masked(state.model, batch, None, training, state.rng)
        ce = ce_loss(view.logits, y)
        return total_loss(ce, None, None, None, cfg.weights)
    t = state.current.task
    views = multi_view_forward(state.model, batch, state.store.all_test_masks(),
                               state.current.masks(s), t, training, state.rng,
                               teacher_grad=cfg.teacher_grad)
    current = views[-1]
    ce = ce_loss(current.logits, y)
    csc = ced = cks = None
    tau, red = cfg.weights.tau, cfg.loss_reduction
    if "csc" not in cfg.ablate:
        csc = csc_loss(current.h, y, tau, red)
    if "ced" not in cfg.ablate:
        ced = ced_loss(views, tau, cfg.teacher_grad, red)
    if "cks" not in cfg.ablate:
        cks = cks_loss(cks_view([v.h for v in views], state.attention), current.h, y, tau, red)
    return total_loss(ce, csc, ced, cks, cfg.weights)


def train_task(state: LearnerState, name: str, train: list[Example],
               valid: list[Example] | None = None,
               on_step: Callable[[dict], None] | None = None) -> None:
    """Train the next task in sequence, then finalize its mask."""
    cfg = state.config
    mcfg = state.model.config
    t = state.n_finished
    if cfg.uses_masks:
        state.current = TaskEmbedding.init(t, state.model.mask_widths(), state.rng.spawn(100, t))
        if cfg.mask_lr is not None:
            for k in range(len(state.current.vectors)):
                state.optimizer.lr_overrides[f"mask.{t}.{k}"] = cfg.mask_lr
    frozen = _frozen_entries(state)
    params = _trainable(state)
    best, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        batches = batch_iter(train, cfg.batch_size, int(state.rng.spawn(200, t, epoch).integers(0, 2**31)),
                             vocab_buckets=mcfg.vocab_buckets, max_len=mcfg.max_len, task_id=t)
        B = len(batches)
        for b, batch in enumerate(batches, start=1):
            s = anneal(b, B, cfg.s_max) if cfg.uses_masks else None
            for p in params.values():
                p.grad = None
            with ad.Tape():
                loss, parts = _step_losses(state, batch, s, training=True)
                ad.backward(loss, params.values())
            if cfg.uses_masks:
                grads = protect_gradients({n: p.grad for n, p in params.items()},
                                          state.model.mask_layers, state.store.accumulated(),
                                          cfg.protect_rule)
                for n, p in params.items():
                    p.grad = grads[n]
            state.optimizer.step(params, frozen)
            if on_step is not None:
                on_step({"task": name, "epoch": epoch + 1, "batch": b, **parts.as_dict(), "s": s})
        if cfg.early_stop and valid:
            vloss = validation_loss(state, valid)
            if vloss < best - 1e-12:
                best, stale = vloss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop on %s after epoch %d", name, epoch + 1)
                    break
    if cfg.uses_masks:
        state.store.finalize_task(t, state.current.vectors)
        state.current.freeze()
        for k in range(len(state.current.vectors)):
            state.optimizer.forget(f"mask.{t}.{k}")
        state.current = None
    state.task_names.append(name)


def validation_loss(state: LearnerState, split: list[Example]) -> float:
    mcfg = state.model.config
    masks = None
    if state.config.uses_masks:
        masks = state.current.masks(state.config.s_max)
    total, n = 0.0, 0
    with ad.no_grad():
        for batch in batch_iter(split, max(2, state.config.batch_size), None, training=False,
                                vocab_buckets=mcfg.vocab_buckets, max_len=mcfg.max_len):
            view = forward_masked(state.model, batch, masks)
            total += ce_loss(view.logits, batch.labels).item() * len(batch)
            n += len(batch)
    return total / n


# ---------------------------------------------------------------------------
# evaluation


def predict(state: LearnerState, examples: list[Example], masks, batch_size: int = 64) -> np.ndarray:
    mcfg = state.model.config
    preds = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = encode(examples[start:start + batch_size], mcfg.vocab_buckets, mcfg.max_len, 0)
            logits = forward_masked(state.model, batch, masks).logits.data
            preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(state: LearnerState, tests: dict[str, list[Example]], mode: str = "dil") -> dict[str, dict]:
    """Per-task accuracy and macro-F1.

    DIL classifies everything under the last finished task's mask; TIL uses
    each task's own mask (tasks are matched by name to training order).
    """
    if mode not in MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if state.n_finished == 0:
        raise ValueError("evaluate needs at least one finished task")
    out = {}
    for name, examples in tests.items():
        masks = None
        if state.config.uses_masks:
            task = state.n_finished - 1
            if mode == "til":
                task = state.task_names.index(name)
            masks = state.store.test_masks(task)
        pred = predict(state, examples, masks)
        gold = np.array([ex.label for ex in examples])
        out[name] = {"acc": accuracy(pred, gold), "mf1": macro_f1(pred, gold)}
    return out


def _mean(rows: Iterable[dict], key: str) -> float:
    vals = [r[key] for r in rows]
    return float(np.mean(vals)) if vals else float("nan")


def task_order(names: list[str], seed: int) -> list[str]:
    if seed == 0:
        return list(names)
    return [names[i] for i in RandomSource(seed).permutation(len(names))]


def run_one_sequence(config: RunConfig, suite: list[TaskDataset], seq_seed: int,
                     on_step: Callable[[dict], None] | None = None,
                     keep_state: bool = False):
    by_name = {t.name: t for t in suite}
    order = task_order([t.name for t in suite], seq_seed)
    registry = DataRegistry(suite)
    tests = {n: by_name[n].test for n in order}
    base_seed = int(RandomSource(config.seed).spawn(seq_seed).integers(0, 2**31))
    forward: dict[str, dict] = {}
    step_hook = None
    if on_step is not None:
        def step_hook(rec: dict) -> None:
            on_step({"seed": seq_seed, **rec})
    state = new_state(config, base_seed)
    for k, name in enumerate(order):
        if config.baseline == "one":
            state = new_state(config, base_seed + k + 1)
        train_task(state, name, registry.take(name), by_name[name].valid, step_hook)
        registry.release(name)
        if config.baseline == "one":
            forward[name] = evaluate(state, {name: tests[name]}, "dil")[name]
        else:
            forward[name] = evaluate(state, {name: tests[name]}, config.mode)[name]
    assert not registry.held()
    final = None
    if config.baseline != "one":
        final = evaluate(state, tests, config.mode)
    report = {
        "seed": seq_seed,
        "order": order,
        "forward": forward,
        "final": final,
        "forward_mean": {"acc": _mean(forward.values(), "acc"), "mf1": _mean(forward.values(), "mf1")},
        "final_mean": None if final is None else {
            "acc": _mean(final.values(), "acc"), "mf1": _mean(final.values(), "mf1")},
    }
    return (report, state) if keep_state else report


def run_sequence(config: RunConfig, suite: list[TaskDataset],
                 on_step: Callable[[dict], None] | None = None,
                 on_state: Callable[[int, LearnerState], None] | None = None) -> dict:
    """Train and evaluate over every sequence seed; average the results.

    ``on_state(seed, state)`` receives each sequence's final learner state.
    """
    per_sequence = []
    for seed in sorted(config.sequence_seeds):
        report, state = run_one_sequence(config, suite, seed, on_step, keep_state=True)
        per_sequence.append(report)
        if on_state is not None:
            on_state(seed, state)
    names = [t.name for t in suite]

    def average(key: str) -> dict | None:
        if any(r[key] is None for r in per_sequence):
            return None
        return {n: {m: _mean((r[key][n] for r in per_sequence), m) for m in ("acc", "mf1")}
                for n in names}

    aggregates = {"forward_acc": _mean((r["forward_mean"] for r in per_sequence), "acc"),
                  "forward_mf1": _mean((r["forward_mean"] for r in per_sequence), "mf1")}
    if config.baseline != "one":
        aggregates["final_acc"] = _mean((r["final_mean"] for r in per_sequence), "acc")
        aggregates["final_mf1"] = _mean((r["final_mean"] for r in per_sequence), "mf1")
    return {
        "config_digest": config.digest(),
        "baseline": config.baseline,
        "mode": config.mode,
        "ablate": list(config.ablate),
        "per_sequence": per_sequence,
        "forward": average("forward"),
        "final": average("final"),
        "aggregates": aggregates,
    }


ABLATIONS: tuple[tuple[str, ...], ...] = (
    (),
    *((f,) for f in OBJECTIVES),
    *combinations(OBJECTIVES, 2),
    OBJECTIVES,
)


def ablation_label(flags: Iterable[str]) -> str:
    flags = list(flags)
    return "full" if not flags else ",".join(f"-{f.upper()}" for f in flags)


def ablate(config: RunConfig, suite: list[TaskDataset],
           flag_sets: Iterable[tuple[str, ...]] = ABLATIONS,
           reuse: dict[tuple[str, ...], dict] | None = None) -> list[dict]:
    """One aggregate row per flag set. ``reuse`` maps sorted flag tuples to finished reports."""
    rows = []
    reuse = reuse or {}
    for flags in flag_sets:
        key = tuple(sorted(flags))
        report = reuse.get(key) or run_sequence(
            replace(config, ablate=key, baseline="classic"), suite)
        rows.append({"variant": ablation_label(sorted(flags)), "ablate": sorted(flags),
                     **report["aggregates"]})
    return rows
