"""Full model: frozen encoder, noisy bottleneck, prototype bank, decoder stack."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .bottleneck import BottleneckParams, bottleneck_pair
from .decoder import (
    DecoderLayerParams,
    DecoderTrace,
    ParamLedger,
    PrototypeBank,
    count_parameters,
    decoder_forward,
)
from .encoder import Encoder, EncoderConfig, FeatureStack
from .errors import ConfigurationError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    image_size: int = 64
    decoder_layers: int = 4
    prototypes: int = 0  # 0 means one prototype per patch
    drop_prob: float = 0.2
    anb: bool = True
    dynamic: bool = True
    constraint: bool = True
    normalize_attention: bool = True
    phi: str = "elu"
    mlp_ratio: int = 4
    seed: int = 0

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.encoder.patch_size) ** 2

    @property
    def num_prototypes(self) -> int:
        return self.prototypes or self.num_patches

    @property
    def pairing(self) -> list[tuple[int, int]]:
        """(0-based decoder layer, 1-based encoder layer) supervision pairs."""
        return list(zip(range(self.decoder_layers), self.encoder.fused_layers))

    def validate(self) -> None:
        self.encoder.validate()
        if self.image_size % self.encoder.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.encoder.patch_size}"
            )
        if self.decoder_layers < 1:
            raise ConfigurationError("decoder needs at least one layer")
        if self.decoder_layers > len(self.encoder.fused_layers):
            raise ConfigurationError(
                f"{self.decoder_layers} decoder layers but only {len(self.encoder.fused_layers)} fused encoder "
                "layers to supervise them"
            )
        if self.prototypes < 0:
            raise ConfigurationError("prototypes must be >= 0")
        if self.constraint and self.num_prototypes != self.num_patches:
            raise ConfigurationError(
                f"prototype constraint needs one prototype per patch (M == N = {self.num_patches}), "
                f"got M = {self.num_prototypes}; disable the constraint or drop --prototypes"
            )
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigurationError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")
        if self.phi not in ("elu", "relu"):
            raise ConfigurationError(f"phi must be 'elu' or 'relu', got {self.phi!r}")


class ProAD:
    def __init__(self, cfg: ModelConfig, encoder: Encoder | None = None):
        cfg.validate()
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else Encoder(cfg.encoder)
        rng = np.random.default_rng([cfg.seed, 0xB0])
        c = cfg.encoder.dim
        self.bottleneck = BottleneckParams.create(rng, c, cfg.drop_prob, cfg.mlp_ratio)
        self.prototypes = PrototypeBank.create(rng, cfg.num_prototypes, c)
        self.layers = [
            DecoderLayerParams.create(rng, c, cfg.mlp_ratio, cfg.normalize_attention, cfg.phi)
            for _ in range(cfg.decoder_layers)
        ]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.bottleneck.named_parameters("bottleneck")
        yield "prototypes", self.prototypes.P
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"decoder.{i}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def ledger(self) -> ParamLedger:
        return count_parameters(self.cfg.encoder.dim, self.cfg.decoder_layers, self.cfg.num_prototypes,
                                self.cfg.mlp_ratio)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def forward(self, fused: np.ndarray, training: bool = False, rng: np.random.Generator | None = None,
                ) -> DecoderTrace:
        prob = self.cfg.drop_prob if self.cfg.anb else 0.0
        q_bn, p_bn = bottleneck_pair(Tensor(fused), self.prototypes.P, self.bottleneck, prob, training, rng)
        return decoder_forward(q_bn, p_bn, self.layers, self.cfg.constraint, self.cfg.dynamic)

    def encode(self, images: np.ndarray) -> FeatureStack:
        from .encoder import encode

        return encode(self.encoder, images)
