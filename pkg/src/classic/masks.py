"""Task embeddings, annealed sigmoid gates, accumulation and gradient protection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RandomSource, ShapeError, Tensor

S_MAX = 400.0
EMBEDDING_INIT = 0.05


def compute_mask(e: Tensor, s: float) -> Tensor:
    if s <= 0:
        raise ValueError(f"compute_mask: s must be positive, got {s}")
    return ad.sigmoid(ad.scale(e, s))


def anneal(b: int, B: int, s_max: float = S_MAX) -> float:
    """Gate scale for 1-based batch ``b`` of ``B``: 1/s_max at b=1 rising linearly to s_max."""
    if B < 1 or not 1 <= b <= B:
        raise ValueError(f"anneal: need 1 <= b <= B, got b={b}, B={B}")
    if B == 1 or b == B:
        return float(s_max)
    lo = 1.0 / s_max
    return lo + (s_max - lo) * (b - 1) / (B - 1)


def accumulate(masks: Sequence[np.ndarray], width: int | None = None) -> np.ndarray:
    """Elementwise max over ``masks``; all zeros when there are none."""
    if not masks:
        if width is None:
            raise ValueError("accumulate: empty store needs an explicit width")
        return np.zeros(width)
    return np.maximum.reduce([np.asarray(m, dtype=np.float64) for m in masks])


def expand_unit_mask(unit_mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Copy a per-output-unit vector across the incoming dimension of a (out, in) weight."""
    if shape[0] != unit_mask.shape[0]:
        raise ShapeError("expand_unit_mask", unit_mask.shape, shape)
    return np.broadcast_to(unit_mask.reshape((-1,) + (1,) * (len(shape) - 1)), shape)


PROTECT_RULES = ("unit", "pairwise")


def weight_protection(layers, accumulated: Sequence[np.ndarray],
                      shapes: dict[str, tuple[int, ...]], rule: str = "unit") -> dict[str, np.ndarray]:
    """Per-entry protection level in [0, 1] for every weight and bias of the mask layers.

    ``unit`` copies each output unit's accumulated mask across its incoming
    weights. ``pairwise`` additionally releases weight (k, j) when input unit
    j comes from a masked layer that no earlier task used: min(m_out[k], m_in[j]).
    """
    if rule not in PROTECT_RULES:
        raise ValueError(f"protection rule must be one of {PROTECT_RULES}, got {rule!r}")
    out = {}
    for layer, m_ac in zip(layers, accumulated):
        m_ac = np.asarray(m_ac, dtype=np.float64)
        w_shape = shapes[layer.weight]
        level = expand_unit_mask(m_ac, w_shape)
        source = getattr(layer, "input_layer", None)
        if rule == "pairwise" and source is not None:
            m_in = np.asarray(accumulated[source], dtype=np.float64)
            if m_in.shape != (w_shape[1],):
                raise ShapeError(f"weight_protection[{layer.weight}]", m_in.shape, w_shape)
            level = np.minimum(level, m_in[None, :])
        out[layer.weight] = level
        out[layer.bias] = expand_unit_mask(m_ac, shapes[layer.bias])
    return out


def protect_gradients(grads: dict[str, np.ndarray], layers, accumulated: Sequence[np.ndarray],
                      rule: str = "unit") -> dict[str, np.ndarray]:
    """Scale weight and bias gradients of each mask layer by ``1 - m_ac``.

    ``layers`` are objects with ``weight``/``bias`` names (``model.MaskLayer``).
    Gradients for any other parameter pass through unchanged.
    """
    shapes = {}
    for layer in layers:
        for name in (layer.weight, layer.bias):
            if grads.get(name) is None:
                raise KeyError(f"protect_gradients: no gradient for {name}")
            shapes[name] = grads[name].shape
    for layer, m_ac in zip(layers, accumulated):
        if shapes[layer.weight][0] != np.shape(m_ac)[0]:
            raise ShapeError(f"protect_gradients[{layer.weight}]", shapes[layer.weight], np.shape(m_ac))
    levels = weight_protection(layers, accumulated, shapes, rule)
    out = dict(grads)
    for name, level in levels.items():
        out[name] = grads[name] * (1.0 - level)
    return out


@dataclass
class TaskEmbedding:
    task: int
    vectors: list[Tensor]

    @classmethod
    def init(cls, task: int, widths: Sequence[int], rng: RandomSource) -> "TaskEmbedding":
        return cls(task, [ad.parameter(rng.uniform(-EMBEDDING_INIT, EMBEDDING_INIT, w))
                          for w in widths])

    def masks(self, s: float) -> list[Tensor]:
        return [compute_mask(e, s) for e in self.vectors]

    def freeze(self) -> None:
        for e in self.vectors:
            e.requires_grad = False
            e.grad = None


@dataclass
class MaskStore:
    """Finalized masks per task and the accumulated protection mask.

    ``soft`` holds sigmoid(s_max * e). ``binary`` thresholds it. With
    ``binary_masks`` on (default) the binary masks are what earlier-task views
    and DIL/TIL inference use, and what the accumulation is taken over, so
    protected units are exactly {0, 1}.
    """

    widths: list[int]
    s_max: float = S_MAX
    threshold: float = 0.5
    binary_masks: bool = True
    soft: dict[int, list[np.ndarray]] = field(default_factory=dict)
    binary: dict[int, list[np.ndarray]] = field(default_factory=dict)
    embeddings: dict[int, list[np.ndarray]] = field(default_factory=dict)

    @property
    def tasks(self) -> list[int]:
        return sorted(self.soft)

    def test_masks(self, task: int) -> list[np.ndarray]:
        if task not in self.soft:
            raise KeyError(f"no stored mask for task {task}")
        return (self.binary if self.binary_masks else self.soft)[task]

    def all_test_masks(self) -> dict[int, list[np.ndarray]]:
        return {t: self.test_masks(t) for t in self.tasks}

    def accumulated(self) -> list[np.ndarray]:
        src = self.binary if self.binary_masks else self.soft
        return [accumulate([src[t][k] for t in self.tasks], w) for k, w in enumerate(self.widths)]

    def finalize_task(self, task: int, embedding: Sequence) -> None:
        if task in self.soft:
            raise ValueError(f"task {task} already finalized")
        vectors = [np.array(e.data if isinstance(e, Tensor) else e, dtype=np.float64)
                   for e in embedding]
        for v, w in zip(vectors, self.widths):
            if v.shape != (w,):
                raise ShapeError("finalize_task", v.shape, (w,))
        soft = [compute_mask(Tensor(v), self.s_max).data for v in vectors]
        self.embeddings[task] = vectors
        self.soft[task] = soft
        self.binary[task] = [(m > self.threshold).astype(np.float64) for m in soft]


def protected_units(store: MaskStore, cutoff: float = 0.999) -> list[np.ndarray]:
    """Boolean per-unit flags of units whose accumulated mask exceeds ``cutoff``."""
    return [m > cutoff for m in store.accumulated()]


def mask_report(store: MaskStore, layer_names: Sequence[str]) -> dict:
    """Capacity usage, pairwise Jaccard overlap and free units over binary masks."""
    tasks = store.tasks
    layers = []
    for k, name in enumerate(layer_names):
        width = store.widths[k]
        used = accumulate([store.binary[t][k] for t in tasks], width)
        per_task = [int(store.binary[t][k].sum()) for t in tasks]
        counts = sum(store.binary[t][k] for t in tasks) if tasks else np.zeros(width)
        layers.append({
            "layer": name,
            "width": width,
            "used_fraction": float(used.mean()),
            "free_units": int(width - used.sum()),
            "shared_units": int((counts > 1).sum()),
            "units_per_task": per_task,
        })
    overlap = []
    for a in tasks:
        row = []
        for b in tasks:
            ma = np.concatenate(store.binary[a]) > 0
            mb = np.concatenate(store.binary[b]) > 0
            union = (ma | mb).sum()
            row.append(float((ma & mb).sum() / union) if union else 1.0)
        overlap.append(row)
    return {"tasks": tasks, "layers": layers, "jaccard": overlap}
