"""Frozen random transformer encoder with maskable bottleneck adapters."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import RandomSource, ShapeError, Tensor
from .data import EncodedBatch

N_CLASSES = 3


@dataclass
class ModelConfig:
    vocab_buckets: int = 512
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 64
    adapter_dim: int | None = None   # None -> 2 * d_model
    max_len: int = 32
    dropout_p: float = 0.5
    train_layer_norm: bool = True
    seed: int = 0
    backbone_file: str | None = None

    def __post_init__(self):
        if self.adapter_dim is None:
            self.adapter_dim = 2 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_dim < 2:
            raise ValueError("adapter_dim must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.max_len > 128:
            raise ValueError("max_len must be <= 128")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MaskLayer:
    """One maskable unit layer: the output units of ``weight`` (rows) and ``bias``."""

    name: str
    weight: str
    bias: str
    width: int
    input_layer: int | None = None   # index of the mask layer feeding this one


@dataclass
class TaskView:
    task: int
    h: Tensor        # (N, d_model) [CLS] after the last layer
    logits: Tensor   # (N, 3)


@dataclass
class AdapterModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    backbone: list[str] = field(default_factory=list)
    adapters: list[str] = field(default_factory=list)
    norms: list[str] = field(default_factory=list)
    head: list[str] = field(default_factory=list)
    mask_layers: list[MaskLayer] = field(default_factory=list)

    def trainable(self) -> dict[str, Tensor]:
        names = self.adapters + self.head + (self.norms if self.config.train_layer_norm else [])
        return {n: self.params[n] for n in names}

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.backbone):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def mask_widths(self) -> list[int]:
        return [m.width for m in self.mask_layers]


def init_model(config: ModelConfig) -> AdapterModel:
    """Random frozen backbone, identity-at-init adapters, small random head."""
    rng = RandomSource(config.seed)
    d, a, f = config.d_model, config.adapter_dim, config.ffn_dim
    model = AdapterModel(config)
    P = model.params

    def frozen(name, value):
        P[name] = Tensor(value)
        model.backbone.append(name)

    def norm(name):
        P[f"{name}.gamma"] = Tensor(np.ones(d), requires_grad=config.train_layer_norm)
        P[f"{name}.beta"] = Tensor(np.zeros(d), requires_grad=config.train_layer_norm)
        model.norms += [f"{name}.gamma", f"{name}.beta"]

    frozen("embed.tokens", rng.normal(1.0, (config.vocab_buckets, d)))
    frozen("embed.positions", rng.normal(0.1, (config.max_len, d)))
    frozen("embed.norm.gamma", np.ones(d))
    frozen("embed.norm.beta", np.zeros(d))
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        for w in ("q", "k", "v", "o"):
            frozen(f"{p}.attn.{w}", rng.normal(d ** -0.5, (d, d)))
        frozen(f"{p}.ffn.w1", rng.normal((2.0 / d) ** 0.5, (f, d)))
        frozen(f"{p}.ffn.b1", np.zeros(f))
        frozen(f"{p}.ffn.w2", rng.normal(f ** -0.5, (d, f)))
        frozen(f"{p}.ffn.b2", np.zeros(d))
        for site in ("attn", "ffn"):
            q = f"{p}.adapter_{site}"
            P[f"{q}.down.w"] = ad.parameter(rng.normal(d ** -0.5, (a, d)))
            P[f"{q}.down.b"] = ad.parameter(np.zeros(a))
            P[f"{q}.up.w"] = ad.parameter(np.zeros((d, a)))
            P[f"{q}.up.b"] = ad.parameter(np.zeros(d))
            model.adapters += [f"{q}.down.w", f"{q}.down.b", f"{q}.up.w", f"{q}.up.b"]
            model.mask_layers.append(MaskLayer(f"{q}.down", f"{q}.down.w", f"{q}.down.b", a))
            model.mask_layers.append(MaskLayer(f"{q}.up", f"{q}.up.w", f"{q}.up.b", d,
                                               input_layer=len(model.mask_layers) - 1))
        norm(f"{p}.norm_attn")
        norm(f"{p}.norm_ffn")
    P["head.w"] = ad.parameter(rng.normal(0.02, (N_CLASSES, d)))
    P["head.b"] = ad.parameter(np.zeros(N_CLASSES))
    model.head = ["head.w", "head.b"]

    if config.backbone_file:
        load_backbone(model, config.backbone_file)
    return model


def load_backbone(model: AdapterModel, path: str) -> None:
    """Replace backbone weights with arrays from an ``.npz`` file keyed by parameter name."""
    with np.load(path) as arrays:
        for name in model.backbone:
            if name in arrays.files:
                value = np.asarray(arrays[name], dtype=np.float64)
                if value.shape != model.params[name].shape:
                    raise ShapeError(f"load_backbone[{name}]", value.shape, model.params[name].shape)
                model.params[name] = Tensor(value)


# ---------------------------------------------------------------------------
# forward


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, ad.transpose(w))
    return y if b is None else ad.add(y, b)


def _attention(model: AdapterModel, prefix: str, x: Tensor, key_bias: np.ndarray) -> Tensor:
    cfg = model.config
    P = model.params
    n, length, d = x.shape
    hd = d // cfg.n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (n, length, cfg.n_heads, hd)), (0, 2, 1, 3))

    q = heads(_linear(x, P[f"{prefix}.attn.q"]))
    k = heads(_linear(x, P[f"{prefix}.attn.k"]))
    v = heads(_linear(x, P[f"{prefix}.attn.v"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), hd ** -0.5)
    weights = ad.softmax(ad.add(scores, key_bias))
    ctx = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
    return _linear(ad.reshape(ctx, (n, length, d)), P[f"{prefix}.attn.o"])


def _adapter(model: AdapterModel, prefix: str, x: Tensor, down_mask: Tensor | None,
             up_mask: Tensor | None, rng: RandomSource | None, training: bool) -> Tensor:
    P = model.params
    k = ad.relu(_linear(x, P[f"{prefix}.down.w"], P[f"{prefix}.down.b"]))
    if down_mask is not None:
        k = ad.mul(k, down_mask)
    k = ad.dropout(k, 1.0 - model.config.dropout_p, rng, training)
    u = _linear(k, P[f"{prefix}.up.w"], P[f"{prefix}.up.b"])
    if up_mask is not None:
        u = ad.mul(u, up_mask)
    return ad.add(x, u)


def _as_mask(m) -> Tensor:
    return m if isinstance(m, Tensor) else Tensor(m)


def embed(model: AdapterModel, batch: EncodedBatch) -> Tensor:
    P = model.params
    length = batch.ids.shape[1]
    if length > model.config.max_len:
        raise ShapeError("embed", batch.ids.shape, (model.config.max_len,))
    x = ad.add(ad.embedding(P["embed.tokens"], batch.ids), P["embed.positions"].data[:length])
    return ad.layer_norm(x, P["embed.norm.gamma"], P["embed.norm.beta"])


def encode_masked(model: AdapterModel, batch: EncodedBatch, masks: Sequence | None,
                  training: bool = False, rng: RandomSource | None = None) -> Tensor:
    """[CLS] representation (N, d_model) with per-unit masks inside every adapter.

    ``masks`` holds one vector per entry of ``model.mask_layers`` (arrays or
    Tensors in [0, 1]); ``None`` runs the adapters unmasked.
    """
    cfg = model.config
    P = model.params
    if masks is not None:
        masks = [_as_mask(m) for m in masks]
        if len(masks) != len(model.mask_layers):
            raise ShapeError("forward_masked", (len(masks),), (len(model.mask_layers),))
        for m, layer in zip(masks, model.mask_layers):
            if m.shape != (layer.width,):
                raise ShapeError(f"forward_masked[{layer.name}]", m.shape, (layer.width,))
    if training and cfg.dropout_p > 0 and rng is None:
        raise ValueError("training forward with dropout needs a RandomSource")
    key_bias = np.where(batch.pad_mask > 0, 0.0, -1e9)[:, None, None, :]
    x = embed(model, batch)
    for layer in range(cfg.n_layers):
        p = f"layer{layer}"
        mk = (lambda j: None) if masks is None else (lambda j: masks[4 * layer + j])
        a = _attention(model, p, x, key_bias)
        a = _adapter(model, f"{p}.adapter_attn", a, mk(0), mk(1), rng, training)
        x = ad.layer_norm(ad.add(x, a), P[f"{p}.norm_attn.gamma"], P[f"{p}.norm_attn.beta"])
        h = _linear(ad.relu(_linear(x, P[f"{p}.ffn.w1"], P[f"{p}.ffn.b1"])),
                    P[f"{p}.ffn.w2"], P[f"{p}.ffn.b2"])
        h = _adapter(model, f"{p}.adapter_ffn", h, mk(2), mk(3), rng, training)
        x = ad.layer_norm(ad.add(x, h), P[f"{p}.norm_ffn.gamma"], P[f"{p}.norm_ffn.beta"])
    return ad.take(x, (slice(None), 0))


def head(model: AdapterModel, h: Tensor) -> Tensor:
    return _linear(h, model.params["head.w"], model.params["head.b"])


def forward_masked(model: AdapterModel, batch: EncodedBatch, masks: Sequence | None,
                   training: bool = False, rng: RandomSource | None = None,
                   task: int = 0) -> TaskView:
    h = encode_masked(model, batch, masks, training, rng)
    return TaskView(task, h, head(model, h))


def multi_view_forward(model: AdapterModel, batch: EncodedBatch, test_masks: dict[int, list],
                       live_masks: Sequence[Tensor], current_task: int, training: bool,
                       rng: RandomSource | None = None,
                       teacher_grad: bool = False) -> list[TaskView]:
    """Views for tasks ``0..current_task``; earlier tasks use ``test_masks``.

    Earlier views run without dropout (they act as fixed teachers). Unless
    ``teacher_grad`` is set their representations and logits are detached.
    """
    views = []
    for i in range(current_task):
        if i not in test_masks:
            raise KeyError(f"no stored mask for task {i}")
        if teacher_grad:
            views.append(forward_masked(model, batch, test_masks[i], False, None, task=i))
        else:
            h = _no_tape(encode_masked, model, batch, test_masks[i])
            views.append(TaskView(i, h, _no_tape(head, model, h)))
    views.append(forward_masked(model, batch, live_masks, training, rng, task=current_task))
    return views


def _no_tape(fn, *args):
    with ad.no_grad():
        return ad.detach(fn(*args))
