"""Prototype bank, linear cross-attention and the dynamic bidirectional decoder.

Each decoder layer owns one set of weights (two layer norms, four attention
projections, one FFN).  The same weights serve three uses: updating the
prototypes from the current target features, reconstructing the target
features from the updated prototypes, and producing the position-aligned
prototype constraint that is added onto the reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import FFN, AttentionParams, LayerNorm
from .tensor import Tensor

PHI = {"elu": T.elu_plus_one, "relu": T.relu}

ATTN_EPS = 1e-6


def _check_dim(x: Tensor, c: int, what: str) -> None:
    if x.shape[-1] != c:
        raise DimensionError(f"{what}: expected last dim {c}, got shape {x.shape}")


def linear_cross_attention(
    q_src: Tensor,
    kv_src: Tensor,
    params: AttentionParams,
    normalize: bool = True,
    phi: str = "elu",
    eps: float = ATTN_EPS,
    project: bool = True,
) -> Tensor:
    """``phi(q) (phi(k)^T v)`` with optional row normalization.

    Queries come from ``q_src`` (A tokens), keys and values from ``kv_src``
    (B tokens).  Leading batch axes broadcast.  With ``normalize`` each output
    row is divided by ``max(phi(q) phi(k)^T 1, eps)``, so the pre-projection
    output is a convex combination of value rows.  ``project=False`` returns
    that pre-projection output.
    """
    c = params.q.weight.shape[0]
    _check_dim(q_src, c, "linear_cross_attention query source")
    _check_dim(kv_src, c, "linear_cross_attention key/value source")
    act = PHI[phi]
    q = act(params.q(q_src))
    k = act(params.k(kv_src))
    v = params.v(kv_src)
    kt = T.swapaxes(k, -1, -2)
    out = T.matmul(q, T.matmul(kt, v))
    if normalize:
        ksum = T.sum(kt, axis=-1, keepdims=True)  # (..., C, 1)
        denom = T.clamp_min(T.matmul(q, ksum), eps)
        out = T.div(out, denom)
    if not project:
        return out
    return params.o(out)


@dataclass
class DecoderLayerParams:
    ln_attn: LayerNorm
    ln_ffn: LayerNorm
    attn: AttentionParams
    ffn: FFN
    normalize: bool = True
    phi: str = "elu"

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, mlp_ratio: int = 4, normalize: bool = True,
               phi: str = "elu") -> "DecoderLayerParams":
        return cls(
            LayerNorm.create(dim),
            LayerNorm.create(dim),
            AttentionParams.create(rng, dim),
            FFN.create(rng, dim, mlp_ratio * dim),
            normalize=normalize,
            phi=phi,
        )

    @property
    def dim(self) -> int:
        return self.attn.q.weight.shape[0]

    def lca(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        return linear_cross_attention(
            self.ln_attn(q_src), self.ln_attn(kv_src), self.attn, normalize=self.normalize, phi=self.phi
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.ln_attn.named_parameters(f"{prefix}.ln_attn")
        yield from self.ln_ffn.named_parameters(f"{prefix}.ln_ffn")
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")


@dataclass
class PrototypeBank:
    """Learnable prototype tokens, one per patch position by default."""

    P: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, num_tokens: int, dim: int) -> "PrototypeBank":
        return cls(Tensor(rng.normal(0.0, dim ** -0.5, size=(num_tokens, dim)), requires_grad=True))

    @property
    def M(self) -> int:
        return self.P.shape[0]


def prototype_update(P_l: Tensor, Q_l: Tensor, layer: DecoderLayerParams) -> Tensor:
    """Aggregate the current target features into the prototypes (pre-norm block)."""
    _check_dim(P_l, layer.dim, "prototype_update prototypes")
    _check_dim(Q_l, layer.dim, "prototype_update features")
    attn = T.add(P_l, layer.lca(P_l, Q_l))
    return T.add(attn, layer.ffn(layer.ln_ffn(attn)))


def target_reconstruct(
    Q_l: Tensor, P_next: Tensor, layer: DecoderLayerParams, constraint: bool = True
) -> tuple[Tensor, Tensor | None, Tensor]:
    """Return ``(f_rec, P_reg, f_D)``.

    With the constraint on, prototype token i is added onto patch i; this needs
    as many prototypes as patches.  With it off, the layer is a plain
    pre-norm block and ``P_reg`` is ``None``.
    """
    _check_dim(Q_l, layer.dim, "target_reconstruct features")
    _check_dim(P_next, layer.dim, "target_reconstruct prototypes")
    f_rec = T.add(Q_l, layer.lca(Q_l, P_next))
    if constraint:
        if P_next.shape[-2] != Q_l.shape[-2]:
            raise ConfigurationError(
                f"prototype constraint needs M == N, got M={P_next.shape[-2]} and N={Q_l.shape[-2]}"
            )
        P_reg = layer.ffn(layer.ln_ffn(P_next))
        return f_rec, P_reg, T.add(f_rec, P_reg)
    return f_rec, None, T.add(f_rec, layer.ffn(layer.ln_ffn(f_rec)))


@dataclass
class LayerTrace:
    P_next: Tensor
    f_rec: Tensor
    P_reg: Tensor | None
    f_D: Tensor


@dataclass
class DecoderTrace:
    Q0: Tensor
    P0: Tensor
    layers: list[LayerTrace] = field(default_factory=list)

    @property
    def Q_final(self) -> Tensor:
        return self.layers[-1].f_D if self.layers else self.Q0


def decoder_forward(
    Q_bn: Tensor,
    P_bn: Tensor,
    layers: list[DecoderLayerParams],
    constraint_on: bool = True,
    dynamic_on: bool = True,
) -> DecoderTrace:
    """Run every layer: update prototypes from Q^l, then rebuild Q^{l+1} from them.

    With ``dynamic_on=False`` the prototypes are aggregated once, before the
    first layer, and held fixed.
    """
    if not layers:
        raise ConfigurationError("decoder needs at least one layer")
    trace = DecoderTrace(Q0=Q_bn, P0=P_bn)
    Q, P = Q_bn, P_bn
    static_P = None
    for i, layer in enumerate(layers):
        if dynamic_on:
            P_next = prototype_update(P, Q, layer)
        else:
            if static_P is None:
                static_P = prototype_update(P, Q, layers[0])
            P_next = static_P
        f_rec, P_reg, f_D = target_reconstruct(Q, P_next, layer, constraint_on)
        trace.layers.append(LayerTrace(P_next, f_rec, P_reg, f_D))
        Q, P = f_D, P_next
    return trace


# -- parameter ledger --------------------------------------------------------

@dataclass(frozen=True)
class ParamLedger:
    bottleneck: int
    decoder: int
    prototypes: int

    @property
    def total(self) -> int:
        return self.bottleneck + self.decoder + self.prototypes

    def as_dict(self) -> dict[str, int]:
        return {"bottleneck": self.bottleneck, "decoder": self.decoder, "prototypes": self.prototypes,
                "total": self.total}


def linear_count(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out + fan_out


def mlp_count(dim: int, mlp_ratio: int = 4) -> int:
    return linear_count(dim, mlp_ratio * dim) + linear_count(mlp_ratio * dim, dim)


def decoder_layer_count(dim: int, mlp_ratio: int = 4) -> int:
    return 2 * 2 * dim + 4 * linear_count(dim, dim) + mlp_count(dim, mlp_ratio)


def count_parameters(dim: int, decoder_layers: int, prototypes: int, mlp_ratio: int = 4) -> ParamLedger:
    """Exact learnable-parameter counts; the frozen encoder is excluded."""
    return ParamLedger(
        bottleneck=mlp_count(dim, mlp_ratio),
        decoder=decoder_layers * decoder_layer_count(dim, mlp_ratio),
        prototypes=prototypes * dim,
    )


PAPER_SCALE = {"dim": 768, "decoder_layers": 8, "prototypes": 789}
