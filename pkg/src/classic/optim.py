from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class Adam:
    """Adam over named tensors with an optional per-entry freeze mask.

    Frozen entries are neither updated nor accumulate moments; their moments
    are zeroed the first time they are seen frozen.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_overrides: dict[str, float] = field(default_factory=dict)
    _state: dict[str, list] = field(default_factory=dict, repr=False)

    def step(self, params: dict[str, Tensor], frozen: dict[str, np.ndarray] | None = None) -> None:
        frozen = frozen or {}
        for name, p in params.items():
            if p.grad is None:
                continue
            state = self._state.get(name)
            if state is None:
                state = self._state[name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, _ = state
            state[2] += 1
            t = state[2]
            g = p.grad
            lock = frozen.get(name)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            lr = self.lr_overrides.get(name, self.lr)
            update = lr * (m / (1 - self.beta1**t)) / (np.sqrt(v / (1 - self.beta2**t)) + self.eps)
            if lock is not None and lock.any():
                m[lock] = 0.0
                v[lock] = 0.0
                update = np.where(lock, 0.0, update)
            p.data = p.data - update

    def forget(self, name: str) -> None:
        self._state.pop(name, None)
