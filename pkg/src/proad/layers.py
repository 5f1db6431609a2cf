"""Parameter containers shared by the encoder, bottleneck and decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, std: float | None = None) -> np.ndarray:
    if std is None:
        std = (2.0 / (fan_in + fan_out)) ** 0.5
    return rng.normal(0.0, std, size=(fan_in, fan_out))


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)

    @classmethod
    def create(cls, rng: np.random.Generator, fan_in: int, fan_out: int, requires_grad: bool = True,
               std: float | None = None) -> "Linear":
        return cls(
            Tensor(init_weight(rng, fan_in, fan_out, std), requires_grad=requires_grad),
            Tensor(np.zeros(fan_out), requires_grad=requires_grad),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    @classmethod
    def create(cls, dim: int, requires_grad: bool = True) -> "LayerNorm":
        return cls(Tensor(np.ones(dim), requires_grad=requires_grad), Tensor(np.zeros(dim), requires_grad=requires_grad))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class FFN:
    """Two-layer MLP ``fc2(gelu(fc1(x)))``."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, hidden: int, requires_grad: bool = True) -> "FFN":
        return cls(Linear.create(rng, dim, hidden, requires_grad), Linear.create(rng, hidden, dim, requires_grad))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


@dataclass
class AttentionParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, requires_grad: bool = True) -> "AttentionParams":
        return cls(*(Linear.create(rng, dim, dim, requires_grad) for _ in range(4)))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name in ("q", "k", "v", "o"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")
