"""AdamW with decoupled weight decay, and the EMA parameter shadow."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


class AdamW:
    """Adam with weight decay applied directly to the parameter.

    The decay term is ``p -= lr * wd * p`` and never passes through the
    moment estimates. ``step()`` requires every parameter to carry a
    gradient and clears all gradients afterwards.
    """

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.items: list[tuple[str, Parameter]] = list(named_params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.items}
        self.v = {name: np.zeros_like(p.data) for name, p in self.items}

    def step(self) -> None:
        missing = [name for name, p in self.items if p.grad is None]
        if missing:
            raise ValueError(f"AdamW.step: parameters without gradients: {missing[:4]}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.items:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def grad_norm(self) -> float:
        sq = 0.0
        for _, p in self.items:
            if p.grad is not None:
                sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(sq))


class EmaShadow:
    """Exponential moving average of a named parameter set."""

    def __init__(self, named_params, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
        self.decay = float(decay)
        self.shadow: dict[str, np.ndarray] = {name: p.data.copy() for name, p in named_params}

    def update(self, named_params) -> None:
        items = list(named_params)
        names = [name for name, _ in items]
        if set(names) != set(self.shadow):
            raise ValueError("EMA update: parameter set does not match the shadow set")
        d = self.decay
        for name, p in items:
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * p.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.shadow.items()}

    def copy_to(self, module) -> None:
        module.load_state_dict(self.shadow)
