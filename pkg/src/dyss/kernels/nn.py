"""Parameter containers: a minimal module tree plus linear layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Param, Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Param):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{k}.")
                    elif isinstance(v, Param):
                        yield f"{name}.{k}", v
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[d_in, d_out]``."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                 std: float | None = None, bias_init: float | np.ndarray = 0.0):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = Param(rng.standard_normal((d_in, d_out)) * std)
        self.bias = Param(np.zeros(d_out) + bias_init) if bias else None

    def __call__(self, x) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
                 out_std: float | None = None, out_bias: float | np.ndarray = 0.0):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out, std=out_std, bias_init=out_bias)

    def __call__(self, x) -> Tensor:
        return self.fc2(ops.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = Param(np.ones(width))
        self.bias = Param(np.zeros(width))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)
