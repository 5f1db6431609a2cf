"""Flat, fully serializable run configuration.

The on-disk form is plain text, one ``key = value`` per line; values are
parsed back by the declared field type.  Lines starting with ``#`` are
comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .datagen import DatasetSpec, ImageSample, generate_dataset, load_mvtec_layout
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .training import TrainConfig

# Fields that do not influence any produced artifact.
NON_SEMANTIC = ("out",)


@dataclass(frozen=True)
class RunConfig:
    # data
    data_root: str = ""
    num_classes: int = 2
    train_per_class: int = 96
    test_normal_per_class: int = 10
    test_anomalous_per_class: int = 15
    image_size: int = 64
    defect_types: tuple[str, ...] = ("blob", "scratch", "misplacement")
    data_seed: int = 0
    resize_to: int = 0  # 0: image_size
    # encoder
    patch_size: int = 8
    dim: int = 64
    encoder_layers: int = 8
    fuse_from: int = 2
    fuse_to: int = 7
    encoder_seed: int = 0
    # bottleneck / decoder
    drop_prob: float = 0.2
    decoder_layers: int = 4
    prototypes: int = 0  # 0: one per patch
    normalize_attention: bool = True
    phi: str = "elu"
    anb: bool = True
    dynamic: bool = True
    constraint: bool = True
    # optimization
    epochs: int = 50
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-5
    warmup_epochs: int = 5
    tau: float = 3.0
    clip_threshold: float = 1.0
    loss_reduction: str = "position"
    # evaluation
    fpr_limit: float = 0.3
    # run
    seed: int = 0
    out: str = ""

    # -- views ---------------------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.dim, self.encoder_layers, self.fuse_from, self.fuse_to,
                             self.encoder_seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder_config(),
            image_size=self.image_size,
            decoder_layers=self.decoder_layers,
            prototypes=self.prototypes,
            drop_prob=self.drop_prob,
            anb=self.anb,
            dynamic=self.dynamic,
            constraint=self.constraint,
            normalize_attention=self.normalize_attention,
            phi=self.phi,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs,
            tau=self.tau,
            clip_threshold=self.clip_threshold,
            loss_reduction=self.loss_reduction,
            seed=self.seed,
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_classes=self.num_classes,
            images_per_class_train=self.train_per_class,
            images_per_class_test_normal=self.test_normal_per_class,
            images_per_class_test_anomalous=self.test_anomalous_per_class,
            image_size=self.image_size,
            defect_types=tuple(self.defect_types),
            seed=self.data_seed,
        )

    def validate(self) -> None:
        self.model_config().validate()
        self.train_config().validate()
        if not 0.0 < self.fpr_limit <= 1.0:
            raise ConfigurationError(f"fpr_limit must lie in (0, 1], got {self.fpr_limit}")
        if not self.data_root:
            self.dataset_spec().validate(self.patch_size)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- serialization -------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# proad run config"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = parse_pairs(text)
        return (base or cls()).with_strings(values)

    def with_strings(self, values: dict[str, str]) -> "RunConfig":
        types = field_types()
        changes = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            changes[key] = parse_value(types[key], raw, key)
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        semantic = self.replace(**{k: "" for k in NON_SEMANTIC})
        return hashlib.sha256(semantic.to_text().encode()).hexdigest()[:16]


def field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(RunConfig)}


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno} is not 'key = value': {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(type_name: str, raw: str, key: str = ""):
    try:
        if type_name == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name.startswith("tuple"):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return RunConfig.from_text(Path(path).read_text(), base)


def load_samples(cfg: RunConfig) -> list[ImageSample]:
    """The run's dataset: an MVTec-layout directory when given, else synthetic."""
    if cfg.data_root:
        return load_mvtec_layout(cfg.data_root, cfg.resize_to or cfg.image_size, cfg.image_size)
    return generate_dataset(cfg.dataset_spec(), cfg.patch_size)
