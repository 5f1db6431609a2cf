"""Anomaly maps from encoder/decoder discrepancies, and the evaluation report."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .datagen import ImageSample
from .decoder import DecoderTrace
from .encoder import FeatureStack
from .errors import MetricError
from .metrics import aupro, auroc, average_precision, f1_max
from .training import distance_map

REFERENCE_SIZE = 392
REFERENCE_SIGMA = 4.0
IMAGE_METRICS = ("auroc", "ap", "f1_max")
PIXEL_METRICS = ("auroc", "ap", "f1_max", "aupro")


def smoothing_sigma(image_size: int) -> float:
    """sigma = 4 px at 392 px, scaled with the image side."""
    return REFERENCE_SIGMA * image_size / REFERENCE_SIZE


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of the last two axes (edge-clamped)."""
    h, w = grid.shape[-2:]

    def coords(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = grid[..., y0, :] * (1 - fy)[:, None] + grid[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


@dataclass
class AnomalyMap:
    scores: np.ndarray  # (H, W) smoothed
    image_score: float
    sample_id: str = ""
    raw: np.ndarray | None = None  # (H, W) upsampled, unsmoothed


def distance_grid(trace: DecoderTrace, features: FeatureStack, pairing) -> np.ndarray:
    """Mean over supervision pairs of the per-patch cosine distance, shape (B, N)."""
    with T.no_grad():
        d = [distance_map(features.layer(e), trace.layers[i].f_D).data for i, e in pairing]
    return np.mean(d, axis=0)


def anomaly_maps(
    trace: DecoderTrace,
    features: FeatureStack,
    pairing,
    image_size: int,
    sample_ids: Sequence[str] | None = None,
    sigma: float | None = None,
) -> list[AnomalyMap]:
    grid = distance_grid(trace, features, pairing)
    if grid.ndim == 1:
        grid = grid[None]
    b, n = grid.shape
    side = int(round(n ** 0.5))
    raw = bilinear_upsample(grid.reshape(b, side, side), image_size, image_size)
    raw = np.maximum(raw, 0.0)
    sigma = smoothing_sigma(image_size) if sigma is None else sigma
    out = []
    for i in range(b):
        sm = gaussian_filter(raw[i], sigma=sigma, mode="nearest") if sigma > 0 else raw[i].copy()
        sm = np.maximum(sm, 0.0)
        sid = sample_ids[i] if sample_ids is not None else ""
        out.append(AnomalyMap(sm, float(sm.max()), sid, raw[i]))
    return out


def anomaly_map(trace: DecoderTrace, features: FeatureStack, pairing, image_size: int) -> AnomalyMap:
    return anomaly_maps(trace, features, pairing, image_size)[0]


def infer_maps(model, samples: Sequence[ImageSample], batch_size: int = 32) -> list[AnomalyMap]:
    """Dropout-free inference over ``samples`` in order."""
    out: list[AnomalyMap] = []
    size = model.cfg.image_size
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        feats = model.encode(np.stack([s.pixels for s in chunk]))
        with T.no_grad():
            trace = model.forward(feats.fused, training=False)
        out.extend(anomaly_maps(trace, feats, model.cfg.pairing, size, [s.sample_id for s in chunk]))
    return out


@dataclass
class EvalReport:
    image: dict[str, float]
    pixel: dict[str, float]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    config_hash: str = ""
    extra: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"config_hash: {self.config_hash}"]
        for k in IMAGE_METRICS:
            lines.append(f"image_{k}: {self.image[k]:.6f}")
        for k in PIXEL_METRICS:
            lines.append(f"pixel_{k}: {self.pixel[k]:.6f}")
        for k, v in self.extra.items():
            lines.append(f"{k}: {v:.6f}")
        for name, vals in self.per_class.items():
            lines.append("")
            lines.append(f"[class {name}]")
            for k, v in vals.items():
                lines.append(f"{k}: {v:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        top: dict[str, str] = {}
        per_class: dict[str, dict[str, float]] = {}
        current: dict | None = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("[class ") and line.endswith("]"):
                current = per_class.setdefault(line[7:-1], {})
                continue
            key, value = (part.strip() for part in line.split(":", 1))
            if current is None:
                top[key] = value
            else:
                current[key] = float(value)
        image = {k: float(top.pop(f"image_{k}")) for k in IMAGE_METRICS}
        pixel = {k: float(top.pop(f"pixel_{k}")) for k in PIXEL_METRICS}
        config_hash = top.pop("config_hash", "")
        return cls(image, pixel, per_class, config_hash, {k: float(v) for k, v in top.items()})


def _metric_block(maps: Sequence[AnomalyMap], samples: Sequence[ImageSample], fpr_limit: float) -> dict[str, float]:
    img_scores = np.array([m.image_score for m in maps])
    img_labels = np.array([s.is_anomalous for s in samples])
    px_scores = np.concatenate([m.scores.ravel() for m in maps])
    px_labels = np.concatenate([s.mask.ravel() > 0 for s in samples])
    return {
        "image_auroc": auroc(img_scores, img_labels),
        "image_ap": average_precision(img_scores, img_labels),
        "image_f1_max": f1_max(img_scores, img_labels),
        "pixel_auroc": auroc(px_scores, px_labels),
        "pixel_ap": average_precision(px_scores, px_labels),
        "pixel_f1_max": f1_max(px_scores, px_labels),
        "pixel_aupro": aupro([m.scores for m in maps], [s.mask for s in samples], fpr_limit),
    }


def reconstruction_ratio(maps: Sequence[AnomalyMap], samples: Sequence[ImageSample]) -> float:
    """Mean unsmoothed distance on anomalous pixels divided by that on normal pixels."""
    raw = np.concatenate([m.raw.ravel() for m in maps])
    lab = np.concatenate([s.mask.ravel() > 0 for s in samples])
    if not lab.any() or lab.all():
        raise MetricError("reconstruction ratio needs both anomalous and normal pixels")
    return float(raw[lab].mean() / raw[~lab].mean())


def evaluate(model, test_set: Sequence[ImageSample], fpr_limit: float = 0.3, config_hash: str = "",
             maps: Sequence[AnomalyMap] | None = None) -> EvalReport:
    """Per-class metrics plus their unweighted mean over classes."""
    samples = [s for s in test_set if s.split == "test"]
    if maps is None:
        maps = infer_maps(model, samples)
    by_class: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.class_name or str(s.class_id), []).append(i)
    per_class = {}
    for name, idx in sorted(by_class.items()):
        try:
            per_class[name] = _metric_block([maps[i] for i in idx], [samples[i] for i in idx], fpr_limit)
        except MetricError as exc:
            raise MetricError(f"class {name}: {exc}") from None
    keys = list(next(iter(per_class.values())))
    mean = {k: float(np.mean([v[k] for v in per_class.values()])) for k in keys}
    ratio = reconstruction_ratio(maps, samples)
    return EvalReport(
        image={k: mean[f"image_{k}"] for k in IMAGE_METRICS},
        pixel={k: mean[f"pixel_{k}"] for k in PIXEL_METRICS},
        per_class=per_class,
        config_hash=config_hash,
        extra={"recon_ratio": ratio},
    )


def save_map_png(amap: AnomalyMap, out_dir: str | Path) -> Path:
    """Per-image min-max normalized 8-bit PNG, for visualization only."""
    s = amap.scores
    lo, hi = float(s.min()), float(s.max())
    norm = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    path = Path(out_dir) / f"{amap.sample_id}_amap.png"
    Image.fromarray(np.rint(norm * 255).astype(np.uint8), mode="L").save(path)
    return path


def config_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
