"""Adaptive noisy bottleneck: one MLP, dropout on features, none on prototypes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Linear
from .tensor import Tensor

# Per-dataset drop rates (MVTec-AD / VisA / Real-IAD analogs).
DROP_RATES = {"mvtec": 0.2, "visa": 0.3, "realiad": 0.4}


@dataclass
class BottleneckParams:
    fc1: Linear  # C -> 4C
    fc2: Linear  # 4C -> C
    prob: float = 0.2

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, prob: float = 0.2, mlp_ratio: int = 4) -> "BottleneckParams":
        return cls(Linear.create(rng, dim, mlp_ratio * dim), Linear.create(rng, mlp_ratio * dim, dim), prob)

    @property
    def dim(self) -> int:
        return self.fc1.weight.shape[0]

    def named_parameters(self, prefix: str = "bottleneck") -> Iterator[tuple[str, Tensor]]:
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


def bottleneck_forward(
    x: Tensor, params: BottleneckParams, rate: float, training: bool, rng: np.random.Generator | None
) -> Tensor:
    """``Dropout(fc2(Dropout(gelu(fc1(x)))))`` with the given rate."""
    if x.shape[-1] != params.dim:
        raise DimensionError(f"bottleneck expects last dim {params.dim}, got shape {x.shape}")
    h = T.dropout(T.gelu(params.fc1(x)), rate, training, rng)
    return T.dropout(params.fc2(h), rate, training, rng)


def bottleneck_pair(
    F_I: Tensor,
    P: Tensor,
    params: BottleneckParams,
    prob: float,
    training: bool,
    rng: np.random.Generator | None,
) -> tuple[Tensor, Tensor]:
    """Noisy pass for the fused features, noiseless pass for the prototypes."""
    q_bn = bottleneck_forward(F_I, params, prob, training, rng)
    p_bn = bottleneck_forward(P, params, 0.0, training, rng)
    return q_bn, p_bn
