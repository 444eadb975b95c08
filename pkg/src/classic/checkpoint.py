"""JSON checkpoints of a finished learner: config, parameters and mask store.

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .harness import LearnerState, new_state

MAGIC = "CLASSIC-CKPT-1"


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


def _arr(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def state_to_dict(state: LearnerState, seed: int) -> dict:
    if state.current is not None:
        raise CheckpointError("cannot checkpoint in the middle of a task")
    store = state.store
    return {
        "magic": MAGIC,
        "seed": seed,
        "config": state.config.to_dict(),
        "task_names": list(state.task_names),
        "backbone_sha256": state.model.backbone_checksum(),
        "params": {n: _arr(p.data) for n, p in sorted(state.model.params.items())},
        "attention": {n: _arr(p.data) for n, p in sorted(state.attention.tensors().items())},
        "masks": {
            "widths": list(store.widths),
            "s_max": store.s_max,
            "threshold": store.threshold,
            "binary_masks": store.binary_masks,
            "tasks": {str(t): {"embedding": [_arr(v) for v in store.embeddings[t]],
                               "soft": [_arr(v) for v in store.soft[t]],
                               "binary": [_arr(v) for v in store.binary[t]]}
                      for t in store.tasks},
        },
    }


def save_checkpoint(path: str | Path, state: LearnerState, seed: int) -> None:
    Path(path).write_text(json.dumps(state_to_dict(state, seed), sort_keys=True))


def state_from_dict(doc: dict) -> LearnerState:
    from .config import run_config_from_dict

    if not isinstance(doc, dict) or doc.get("magic") != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}")
    try:
        config = run_config_from_dict(doc["config"])
        state = new_state(config, int(doc["seed"]))
        for group, target in (("params", state.model.params), ("attention", state.attention.tensors())):
            stored = doc[group]
            if set(stored) != set(target):
                raise CheckpointError(f"{group} names do not match the configured model")
            for name, tensor in target.items():
                value = _unarr(stored[name])
                if value.shape != tensor.shape:
                    raise CheckpointError(f"{name}: shape {value.shape} != {tensor.shape}")
                tensor.data = value
        masks = doc["masks"]
        store = state.store
        if list(masks["widths"]) != list(store.widths):
            raise CheckpointError("mask widths do not match the configured model")
        store.s_max, store.threshold = masks["s_max"], masks["threshold"]
        store.binary_masks = masks["binary_masks"]
        for key, entry in sorted(masks["tasks"].items(), key=lambda kv: int(kv[0])):
            t = int(key)
            store.embeddings[t] = [_unarr(v) for v in entry["embedding"]]
            store.soft[t] = [_unarr(v) for v in entry["soft"]]
            store.binary[t] = [_unarr(v) for v in entry["binary"]]
        state.task_names = list(doc["task_names"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: missing or malformed {exc}") from None
    if state.model.backbone_checksum() != doc.get("backbone_sha256"):
        raise CheckpointError("backbone checksum mismatch")
    return state


def load_checkpoint(path: str | Path) -> LearnerState:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError:
        raise CheckpointError(f"bad magic: {path} is not a {MAGIC} file") from None
    return state_from_dict(doc)
