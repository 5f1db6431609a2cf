"""Distance-weighted decay loss, StableAdamW, cosine schedule and the training loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, write_checkpoint
from .datagen import ImageSample, batch_iterator
from .decoder import DecoderTrace
from .encoder import FeatureStack
from .errors import ConfigurationError, NumericalError, UsageError
from .model import ProAD
from .tensor import Tensor

log = logging.getLogger(__name__)

DIST_EPS = 1e-12
DECAY_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 10
    schedule: str = "cosine"
    tau: float = 3.0
    clip_threshold: float = 1.0
    loss_reduction: str = "position"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.schedule != "cosine":
            raise ConfigurationError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if self.tau < 0:
            raise ConfigurationError("tau must be >= 0")
        if self.loss_reduction not in ("position", "flatten"):
            raise ConfigurationError(f"loss_reduction must be 'position' or 'flatten', got {self.loss_reduction!r}")


# -- loss --------------------------------------------------------------------

def distance_map(f_E, f_D) -> Tensor:
    """Per-position cosine distance ``1 - cos(f_E, f_D)`` over the channel axis."""
    f_E = f_E if isinstance(f_E, Tensor) else Tensor(f_E)
    f_D = f_D if isinstance(f_D, Tensor) else Tensor(f_D)
    dot = T.sum(T.mul(f_E, f_D), axis=-1)
    norms = T.sqrt(T.clamp_min(T.mul(T.sum(T.mul(f_E, f_E), axis=-1), T.sum(T.mul(f_D, f_D), axis=-1)),
                               DIST_EPS * DIST_EPS))
    return T.sub(1.0, T.div(dot, norms))


def decay_factors(d: np.ndarray, tau: float) -> np.ndarray:
    """``(d / mean(d)) ** tau`` over the last axis; ones where the mean vanishes."""
    d = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    avg = d.mean(axis=-1, keepdims=True)
    ok = avg > DECAY_EPS
    alpha = np.where(ok, d / np.where(ok, avg, 1.0), 1.0)
    return alpha ** tau


def _flat_distance(f_E: Tensor, f_D: Tensor) -> Tensor:
    b = f_D.shape[0] if f_D.ndim == 3 else 1
    return distance_map(T.reshape(f_E, (b, -1)), T.reshape(f_D, (b, -1)))


def decay_loss(
    trace: DecoderTrace,
    features: FeatureStack,
    pairing: Sequence[tuple[int, int]],
    tau: float,
    reduction: str = "position",
    hook: bool = True,
) -> Tensor:
    """Average over supervision pairs of the mean cosine distance.

    The gradient reaching each ``f_D`` position is scaled by its detached
    decay factor ``alpha ** tau``; the forward value is unaffected.
    """
    if not pairing:
        raise ConfigurationError("decay_loss needs at least one supervision pair")
    terms = []
    for dec_idx, enc_idx in pairing:
        if not 0 <= dec_idx < len(trace.layers) or not 1 <= enc_idx <= len(features.per_layer):
            raise ConfigurationError(f"pairing ({dec_idx}, {enc_idx}) references a missing layer")
        f_D = trace.layers[dec_idx].f_D
        f_E = Tensor(features.layer(enc_idx))
        if hook:
            with T.no_grad():
                d_now = distance_map(f_E, f_D).data
            scale = np.broadcast_to(decay_factors(d_now, tau)[..., None], f_D.shape)
            f_D = T.attach_grad_hook(f_D, scale)
        if reduction == "flatten":
            terms.append(T.mean(_flat_distance(f_E, f_D)))
        else:
            terms.append(T.mean(distance_map(f_E, f_D)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.div_scalar(total, len(terms))


# -- optimizer and schedule --------------------------------------------------

def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr``, then cosine decay towards zero."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class StableAdamW:
    """AdamW with decoupled weight decay and per-tensor update clipping.

    The step size of each tensor is divided by ``max(1, RMS / clip_threshold)``
    where ``RMS = sqrt(mean(g**2 / max(v_hat, eps**2)))``.
    """

    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_threshold: float = 1.0
    step_count: int = 0
    rejected_steps: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> bool:
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.rejected_steps += 1
                log.warning("rejected optimizer step: non-finite gradient in %s", name)
                return False
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            rms = math.sqrt(float(np.mean(g * g / np.maximum(v_hat, self.eps * self.eps))))
            lr_t = lr * min(1.0, self.clip_threshold / rms) if rms > 0 else lr
            p.data = p.data * (1.0 - lr_t * self.weight_decay) - lr_t * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


def optimizer_step(params: dict[str, Tensor], state: StableAdamW, lr_t: float) -> bool:
    return state.step(params, lr_t)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    epoch_losses: list[float]
    steps: int
    rejected_steps: int
    parameter_hash: str
    log_lines: list[str]


def _first_nonfinite(trace: DecoderTrace) -> str:
    named = [("Q_bn", trace.Q0), ("P_bn", trace.P0)]
    for i, lt in enumerate(trace.layers):
        named += [(f"layer{i}.P_next", lt.P_next), (f"layer{i}.f_rec", lt.f_rec)]
        if lt.P_reg is not None:
            named.append((f"layer{i}.P_reg", lt.P_reg))
        named.append((f"layer{i}.f_D", lt.f_D))
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            return name
    return "loss"


def _format_record(epoch: int, step: int, lr: float, loss: float) -> str:
    return f"epoch={epoch} step={step} lr={lr!r} loss={loss!r}"


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xD509, step])


def save_training_checkpoint(path: Path, model: ProAD, opt: StableAdamW, epoch: int, meta: dict) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    for name in opt.m:
        tensors[f"optim.m.{name}"] = opt.m[name]
        tensors[f"optim.v.{name}"] = opt.v[name]
    state = dict(meta)
    state.update(epoch=epoch, step_count=opt.step_count, rejected_steps=opt.rejected_steps,
                 encoder_hash=model.encoder.parameter_hash())
    write_checkpoint(path, tensors, state)


def load_model_state(model: ProAD, tensors: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ConfigurationError(f"checkpoint is missing parameter {name!r}")
        if tensors[name].shape != p.shape:
            raise ConfigurationError(
                f"checkpoint parameter {name!r} has shape {tensors[name].shape}, model expects {p.shape}"
            )
        p.data = tensors[name].copy()


def train(
    model: ProAD,
    samples: Sequence[ImageSample],
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    meta: dict | None = None,
    features: FeatureStack | None = None,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Seeded, resumable training loop over normal training images.

    When ``run_dir`` is given the loop writes ``checkpoint.bin`` after every
    epoch and ``train_log.txt`` with one record per epoch, and resumes from an
    existing checkpoint in that directory.
    """
    cfg.validate()
    train_samples = [s for s in samples if s.split == "train"]
    if not train_samples:
        raise UsageError("training needs at least one normal training sample")
    if features is None:
        features = model.encode(np.stack([s.pixels for s in train_samples]))
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    params = model.parameters()
    opt = StableAdamW(weight_decay=cfg.weight_decay, clip_threshold=cfg.clip_threshold)
    pairing = model.cfg.pairing
    meta = dict(meta or {})

    start_epoch = 0
    log_lines: list[str] = []
    losses: list[float] = []
    ckpt_path = log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = run_dir / "checkpoint.bin"
        log_path = run_dir / "train_log.txt"
        if ckpt_path.exists():
            tensors, state = read_checkpoint(ckpt_path)
            load_model_state(model, tensors)
            for name in params:
                if f"optim.m.{name}" in tensors:
                    opt.m[name] = tensors[f"optim.m.{name}"].copy()
                    opt.v[name] = tensors[f"optim.v.{name}"].copy()
            opt.step_count = int(state["step_count"])
            opt.rejected_steps = int(state.get("rejected_steps", 0))
            start_epoch = int(state["epoch"])
            if log_path.exists():
                log_lines = log_path.read_text().splitlines()[:start_epoch]
                losses = [float(line.rsplit("loss=", 1)[1]) for line in log_lines]

    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        batch_losses = []
        lr = 0.0
        for idx in batch_iterator(list(range(n)), cfg.batch_size, cfg.seed, epoch):
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr)
            rows = np.asarray(idx)
            feats = features.select(rows)
            model.zero_grad()
            trace = model.forward(feats.fused, training=True, rng=step_rng(cfg.seed, step))
            loss = decay_loss(trace, feats, pairing, cfg.tau, cfg.loss_reduction)
            if not math.isfinite(loss.item()):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, step {step}; first non-finite tensor: "
                    f"{_first_nonfinite(trace)}"
                )
            T.backward(loss)
            if not opt.step(params, lr):
                log.warning("step %d rejected (%d so far)", step, opt.rejected_steps)
            batch_losses.append(loss.item())
            step += 1
        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        record = _format_record(epoch + 1, step, lr, epoch_loss)
        if opt.rejected_steps:
            record += f" rejected={opt.rejected_steps}"
        log_lines.append(record)
        if progress is not None:
            progress(record)
        if ckpt_path is not None:
            save_training_checkpoint(ckpt_path, model, opt, epoch + 1, meta)
            log_path.write_text("\n".join(log_lines) + "\n")
    return TrainResult(losses, step, opt.rejected_steps, model.parameter_hash(), log_lines)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
