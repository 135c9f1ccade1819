"""Module/parameter containers and the layers used by the networks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that receives gradients and optimizer updates."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class; children and parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, attr in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                yield path, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{path}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, p in own.items():
            arr = np.ascontiguousarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise T.ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        """Exclude all parameters from gradient tracking."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def walk_modules(self, prefix: str = "net"):
        """Yield (path, module) over the whole module graph."""
        stack = [(prefix, self)]
        while stack:
            path, mod = stack.pop()
            yield path, mod
            if isinstance(mod, ModuleList):
                for i, sub in enumerate(mod):
                    stack.append((f"{path}.{i}", sub))
            else:
                for name, attr in vars(mod).items():
                    if isinstance(attr, Module):
                        stack.append((f"{path}.{name}", attr))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items = list(modules)

    def append(self, m: Module) -> None:
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")


class Conv2d(Module):
    """He-initialized convolution; ``gain`` rescales the weight init."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: Rng,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 gain: float = 1.0):
        if padding is None:
            padding = kernel // 2
        std = gain * np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Parameter(rng.normal((out_ch, in_ch, kernel, kernel)) * std)
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None
        self.stride = stride
        self.padding = padding

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: Rng, gain: float = 1.0):
        std = gain * np.sqrt(2.0 / in_features)
        self.weight = Parameter(rng.normal((in_features, out_features)) * std)
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups != 0:
            raise T.ShapeError(f"GroupNorm: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


def norm_groups_for(channels: int, preferred: int = 8) -> int:
    """Largest group count <= preferred that divides the channel count."""
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float32))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float32) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb.astype(np.float32)
