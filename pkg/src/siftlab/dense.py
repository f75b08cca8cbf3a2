"""Plain dense AdamW, used for full fine-tuning and as the reference trajectory."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


class DenseAdamW:
    """Decoupled weight decay, bias-corrected moments, one state pair per element."""

    def __init__(self, params: dict[str, np.ndarray], names, hp: AdamWConfig):
        self.params = params
        self.names = list(names)
        self.hp = hp
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        hp = self.hp
        lr = hp.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - hp.beta1 ** self.t
        bc2 = 1.0 - hp.beta2 ** self.t
        for n in self.names:
            p, g = self.params[n], grads[n]
            m, v = self.m[n], self.v[n]
            m[...] = hp.beta1 * m + (1.0 - hp.beta1) * g
            v[...] = hp.beta2 * v + (1.0 - hp.beta2) * g * g
            if hp.weight_decay:
                p -= lr * hp.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)

    def state_elements(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())
