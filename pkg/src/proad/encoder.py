"""Frozen random patch encoder standing in for a pre-trained ViT backbone."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .decoder import linear_cross_attention
from .errors import ConfigurationError, DimensionError
from .layers import FFN, AttentionParams, LayerNorm, Linear
from .tensor import Tensor

# ImageNet statistics, the usual input normalization for ViT backbones.
PIXEL_MEAN = np.array([0.485, 0.456, 0.406])
PIXEL_STD = np.array([0.229, 0.224, 0.225])


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    dim: int = 64
    num_layers: int = 8
    fuse_from: int = 2
    fuse_to: int = 7
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size < 1 or self.dim < 1 or self.num_layers < 1:
            raise ConfigurationError("encoder patch_size, dim and num_layers must be positive")
        if not 1 <= self.fuse_from <= self.fuse_to <= self.num_layers:
            raise ConfigurationError(
                f"need 1 <= fuse_from <= fuse_to <= num_layers, got {self.fuse_from}, {self.fuse_to}, "
                f"{self.num_layers}"
            )

    @property
    def fused_layers(self) -> list[int]:
        """1-based indices of the summed layers."""
        return list(range(self.fuse_from, self.fuse_to + 1))


@dataclass
class FeatureStack:
    per_layer: list[np.ndarray]  # each (B, N, C)
    fused: np.ndarray  # (B, N, C)

    def layer(self, index: int) -> np.ndarray:
        """1-based layer access."""
        return self.per_layer[index - 1]

    def select(self, rows) -> "FeatureStack":
        return FeatureStack([f[rows] for f in self.per_layer], self.fused[rows])


@dataclass
class EncoderBlock:
    ln1: LayerNorm
    attn: AttentionParams
    ln2: LayerNorm
    mlp: FFN

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, linear_cross_attention(h, h, self.attn))
        return T.add(x, self.mlp(self.ln2(x)))


class Encoder:
    def __init__(self, cfg: EncoderConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0xE1C0DE])
        c, p = cfg.dim, cfg.patch_size
        self.patch_embed = Linear.create(rng, p * p * 3, c, requires_grad=False)
        self.blocks = [
            EncoderBlock(
                LayerNorm.create(c, requires_grad=False),
                AttentionParams.create(rng, c, requires_grad=False),
                LayerNorm.create(c, requires_grad=False),
                FFN.create(rng, c, 4 * c, requires_grad=False),
            )
            for _ in range(cfg.num_layers)
        ]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.patch_embed.named_parameters("encoder.patch_embed")
        for i, b in enumerate(self.blocks):
            pre = f"encoder.blocks.{i}"
            yield from b.ln1.named_parameters(f"{pre}.ln1")
            yield from b.attn.named_parameters(f"{pre}.attn")
            yield from b.ln2.named_parameters(f"{pre}.ln2")
            yield from b.mlp.named_parameters(f"{pre}.mlp")

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) -> (B, N, p*p*3), patches in raster order."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        images = (images - PIXEL_MEAN) / PIXEL_STD
        b, h, w, ch = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise DimensionError(f"image size {h}x{w} is not divisible by patch size {p}")
        x = images.reshape(b, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * ch)

    def encode(self, images: np.ndarray) -> FeatureStack:
        with T.no_grad():
            x = self.patch_embed(Tensor(self.patchify(images)))
            per_layer = []
            for block in self.blocks:
                x = block(x)
                per_layer.append(x.data)
        fused = np.zeros_like(per_layer[0])
        for i in self.cfg.fused_layers:
            fused = fused + per_layer[i - 1]
        return FeatureStack(per_layer, fused)


def build_encoder(cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg)


def encode(enc: Encoder, images: np.ndarray, batch_size: int = 64) -> FeatureStack:
    """Encode in chunks to bound memory; results are independent of the chunking."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    chunks = [enc.encode(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    if len(chunks) == 1:
        return chunks[0]
    per_layer = [np.concatenate([c.per_layer[i] for c in chunks]) for i in range(len(chunks[0].per_layer))]
    return FeatureStack(per_layer, np.concatenate([c.fused for c in chunks]))
