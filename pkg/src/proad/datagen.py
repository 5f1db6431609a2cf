"""Seeded synthetic anomaly-detection data and MVTec-AD layout ingestion.

Every class has a procedural normal template: a textured background plus a
fixed arrangement of geometric parts.  Each image jitters the parts by a
pixel or two and adds faint noise.  Anomalous test images carry exactly one
defect whose mask is the set of pixels the defect altered.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import IngestionError, SpecError, UsageError

DEFECT_TYPES = ("scratch", "blob", "color_patch", "missing_part", "misplacement")
SPLIT_CODE = {"train": 0, "test": 1}


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 2
    images_per_class_train: int = 96
    images_per_class_test_normal: int = 10
    images_per_class_test_anomalous: int = 15
    image_size: int = 64
    defect_types: tuple[str, ...] = ("blob", "scratch", "misplacement")
    seed: int = 0

    def validate(self, patch_size: int = 8) -> None:
        counts = (self.num_classes, self.images_per_class_train, self.images_per_class_test_normal,
                  self.images_per_class_test_anomalous)
        if min(counts) < 1:
            raise SpecError("all dataset counts must be >= 1")
        if self.image_size < 16:
            raise SpecError(f"image_size must be >= 16, got {self.image_size}")
        if self.image_size % patch_size:
            raise SpecError(f"image_size {self.image_size} is not divisible by patch size {patch_size}")
        if not self.defect_types:
            raise SpecError("at least one defect type is required")
        bad = [d for d in self.defect_types if d not in DEFECT_TYPES]
        if bad:
            raise SpecError(f"unknown defect types {bad}; choose from {DEFECT_TYPES}")


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) uint8, 1 = anomalous
    label: str  # "normal" | "anomalous"
    class_id: int
    split: str  # "train" | "test"
    sample_id: str = ""
    class_name: str = ""
    defect: str = "good"

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"


def check_sample(s: ImageSample) -> None:
    """Raise ``ValueError`` when a sample breaks the split/label/mask invariants."""
    positive = int(s.mask.sum())
    if s.split == "train" and (s.label != "normal" or positive):
        raise ValueError(f"{s.sample_id}: training samples must be normal with empty masks")
    if (s.label == "normal") != (positive == 0):
        raise ValueError(f"{s.sample_id}: label {s.label!r} inconsistent with mask area {positive}")


# -- procedural templates ----------------------------------------------------

@dataclass(frozen=True)
class Part:
    kind: str  # "disc" | "rect" | "ring"
    cy: float
    cx: float
    size: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class ClassTemplate:
    base: np.ndarray
    gratings: tuple[tuple[float, float, float, np.ndarray], ...]  # (fy, fx, phase, rgb amplitude)
    parts: tuple[Part, ...] = field(default_factory=tuple)


def class_template(seed: int, class_id: int, size: int) -> ClassTemplate:
    rng = np.random.default_rng([seed, class_id, 0x7E37])
    base = rng.uniform(0.3, 0.7, size=3)
    gratings = []
    for _ in range(2):
        freq = rng.uniform(2.0, 6.0) / size
        theta = rng.uniform(0, np.pi)
        gratings.append((freq * np.sin(theta), freq * np.cos(theta), rng.uniform(0, 2 * np.pi),
                         rng.uniform(0.03, 0.08, size=3)))
    # parts on a coarse grid so they never overlap
    n_parts = int(rng.integers(3, 5))
    cells = rng.permutation(9)[:n_parts]
    step = size / 3.0
    parts = []
    for cell in cells:
        r, c = divmod(int(cell), 3)
        kind = ("disc", "rect", "ring")[int(rng.integers(0, 3))]
        parts.append(Part(
            kind,
            cy=(r + 0.5) * step + rng.uniform(-0.1, 0.1) * step,
            cx=(c + 0.5) * step + rng.uniform(-0.1, 0.1) * step,
            size=rng.uniform(0.22, 0.32) * step,
            color=tuple(float(v) for v in rng.uniform(0.05, 0.95, size=3)),
        ))
    return ClassTemplate(base, tuple(gratings), tuple(parts))


def _part_mask(part: Part, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy, dx = yy - part.cy, xx - part.cx
    if part.kind == "disc":
        return dy * dy + dx * dx <= part.size ** 2
    if part.kind == "rect":
        return (np.abs(dy) <= part.size) & (np.abs(dx) <= part.size * 0.7)
    r2 = dy * dy + dx * dx
    return (r2 <= part.size ** 2) & (r2 >= (0.55 * part.size) ** 2)


def _render(tpl: ClassTemplate, parts: Sequence[Part], noise: np.ndarray, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.broadcast_to(tpl.base, (size, size, 3)).copy()
    for fy, fx, phase, amp in tpl.gratings:
        img += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None] * amp
    for part in parts:
        m = _part_mask(part, yy, xx)
        img[m] = part.color
    return np.clip(img + noise, 0.0, 1.0)


def _jittered_parts(tpl: ClassTemplate, rng: np.random.Generator) -> list[Part]:
    jit = rng.integers(-1, 2, size=(len(tpl.parts), 2))
    return [replace(p, cy=p.cy + float(j[0]), cx=p.cx + float(j[1])) for p, j in zip(tpl.parts, jit)]


def _sample_rng(spec: DatasetSpec, class_id: int, split: str, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, class_id, SPLIT_CODE[split], index, stream])


def _normal_components(spec: DatasetSpec, class_id: int, split: str, index: int):
    tpl = class_template(spec.seed, class_id, spec.image_size)
    rng = _sample_rng(spec, class_id, split, index, 0)
    parts = _jittered_parts(tpl, rng)
    noise = rng.normal(0.0, 0.01, size=(spec.image_size, spec.image_size, 3))
    return tpl, parts, noise


def render_normal(spec: DatasetSpec, class_id: int, split: str, index: int) -> np.ndarray:
    """Defect-free render of one sample; anomalous samples start from this."""
    tpl, parts, noise = _normal_components(spec, class_id, split, index)
    return _render(tpl, parts, noise, spec.image_size)


def _ellipse(size: int, rng: np.random.Generator, rmin: float, rmax: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    ry, rx = rng.uniform(rmin, rmax, size=2)
    ang = rng.uniform(0, np.pi)
    y, x = yy - cy, xx - cx
    u = y * np.cos(ang) + x * np.sin(ang)
    v = -y * np.sin(ang) + x * np.cos(ang)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _scratch(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    p0 = rng.uniform(0.15 * size, 0.85 * size, size=2)
    ang = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.2, 0.4) * size
    d = np.array([np.sin(ang), np.cos(ang)])
    rel_y, rel_x = yy - p0[0], xx - p0[1]
    t = np.clip(rel_y * d[0] + rel_x * d[1], 0.0, length)
    dist = np.hypot(rel_y - t * d[0], rel_x - t * d[1])
    return dist <= rng.uniform(0.6, 1.2)


def _apply_defect(spec: DatasetSpec, class_id: int, index: int, defect: str, clean: np.ndarray) -> np.ndarray:
    size = spec.image_size
    rng = _sample_rng(spec, class_id, "test", index, 1)
    img = clean.copy()
    if defect in ("blob", "scratch", "color_patch"):
        if defect == "blob":
            region = _ellipse(size, rng, 0.05 * size, 0.11 * size)
            target = rng.uniform(0.05, 0.95, size=3)
            img[region] = 0.25 * img[region] + 0.75 * target
        elif defect == "scratch":
            region = _scratch(size, rng)
            img[region] = rng.choice([0.03, 0.97]) + rng.uniform(-0.02, 0.02, size=3)
        else:
            half = int(rng.integers(size // 16 + 1, size // 8 + 2))
            cy, cx = rng.integers(half, size - half, size=2)
            region = np.zeros((size, size), dtype=bool)
            region[cy - half:cy + half, cx - half:cx + half] = True
            img[region] = np.clip(img[region][:, [2, 0, 1]] * 0.6 + 0.3, 0.0, 1.0)
        return img
    tpl, parts, noise = _normal_components(spec, class_id, "test", index)
    k = int(rng.integers(0, len(parts)))
    if defect == "missing_part":
        new_parts = parts[:k] + parts[k + 1:]
    else:
        # move the part into a free grid cell
        step = size / 3.0
        taken = {(int(p.cy // step), int(p.cx // step)) for p in parts}
        free = [(r, c) for r in range(3) for c in range(3) if (r, c) not in taken]
        r, c = free[int(rng.integers(0, len(free)))]
        moved = replace(parts[k], cy=(r + 0.5) * step, cx=(c + 0.5) * step)
        new_parts = parts[:k] + [moved] + parts[k + 1:]
    return _render(tpl, new_parts, noise, size)


def render_sample(
    spec: DatasetSpec, class_id: int, split: str, index: int, defect: str | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(pixels, mask)`` for one sample; mask marks the pixels the defect changed."""
    clean = render_normal(spec, class_id, split, index)
    size = spec.image_size
    if defect is None:
        return clean, np.zeros((size, size), dtype=np.uint8)
    img = _apply_defect(spec, class_id, index, defect, clean)
    mask = np.any(img != clean, axis=-1).astype(np.uint8)
    return img, mask


def class_name(class_id: int) -> str:
    return f"class{class_id:02d}"


def generate_dataset(spec: DatasetSpec, patch_size: int = 8) -> list[ImageSample]:
    spec.validate(patch_size)
    out: list[ImageSample] = []
    for c in range(spec.num_classes):
        name = class_name(c)
        for i in range(spec.images_per_class_train):
            px, mask = render_sample(spec, c, "train", i)
            out.append(ImageSample(px, mask, "normal", c, "train", f"{name}_train_good_{i:03d}", name))
        for i in range(spec.images_per_class_test_normal):
            px, mask = render_sample(spec, c, "test", i)
            out.append(ImageSample(px, mask, "normal", c, "test", f"{name}_test_good_{i:03d}", name))
        n_norm = spec.images_per_class_test_normal
        for j in range(spec.images_per_class_test_anomalous):
            defect = spec.defect_types[j % len(spec.defect_types)]
            idx = n_norm + j
            px, mask = render_sample(spec, c, "test", idx, defect)
            if not mask.any():  # pragma: no cover - geometry always alters pixels
                raise SpecError(f"defect {defect} left {name} test image {idx} unchanged")
            out.append(ImageSample(px, mask, "anomalous", c, "test", f"{name}_test_{defect}_{idx:03d}", name,
                                   defect))
    return out


def dataset_hash(samples: Sequence[ImageSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(np.ascontiguousarray(s.pixels, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    return h.hexdigest()[:16]


# -- MVTec layout I/O --------------------------------------------------------

def _to_uint8(px: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)


def write_mvtec_layout(samples: Sequence[ImageSample], root: str | Path) -> Path:
    """Write samples as ``<class>/{train,test}/<defect>/NNN.png`` plus ground-truth masks."""
    root = Path(root)
    for s in samples:
        cat = root / (s.class_name or class_name(s.class_id))
        stem = s.sample_id.rsplit("_", 1)[-1]
        img_dir = cat / s.split / s.defect
        img_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(s.pixels), mode="RGB").save(img_dir / f"{stem}.png")
        if s.is_anomalous:
            gt_dir = cat / "ground_truth" / s.defect
            gt_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(gt_dir / f"{stem}_mask.png")
    return root


def _resize_float(arr: np.ndarray, size: int, resample) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr.astype(np.float64)
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), resample=resample), dtype=np.float64)


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if size > h or size > w:
        raise IngestionError(f"center crop {size} exceeds resized size {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return arr[top:top + size, left:left + size]


def load_image(path: Path, resize_to: int, crop_to: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestionError(f"unreadable image {path}: {exc}") from None
    chans = [_resize_float(rgb[..., k], resize_to, Image.BILINEAR) for k in range(3)]
    return _center_crop(np.stack(chans, axis=-1), crop_to)


def load_mask(path: Path, resize_to: int, crop_to: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            m = (np.asarray(im.convert("L"), dtype=np.float64) > 0).astype(np.float64)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"unreadable mask {path}: {exc}") from None
    m = _resize_float(m, resize_to, Image.NEAREST)
    return (_center_crop(m, crop_to) >= 0.5).astype(np.uint8)


def load_mvtec_layout(root: str | Path, resize_to: int, center_crop_to: int) -> list[ImageSample]:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    cats = sorted(p for p in root.iterdir() if p.is_dir())
    if not cats:
        raise IngestionError(f"no category directories under {root}")
    out: list[ImageSample] = []
    for cid, cat in enumerate(cats):
        for f in sorted((cat / "train" / "good").glob("*.png")):
            px = load_image(f, resize_to, center_crop_to)
            out.append(ImageSample(px, np.zeros(px.shape[:2], np.uint8), "normal", cid, "train",
                                   f"{cat.name}_train_good_{f.stem}", cat.name))
        test_dir = cat / "test"
        if not test_dir.is_dir():
            continue
        for ddir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            for f in sorted(ddir.glob("*.png")):
                px = load_image(f, resize_to, center_crop_to)
                sid = f"{cat.name}_test_{ddir.name}_{f.stem}"
                if ddir.name == "good":
                    out.append(ImageSample(px, np.zeros(px.shape[:2], np.uint8), "normal", cid, "test", sid,
                                           cat.name))
                    continue
                mpath = cat / "ground_truth" / ddir.name / f"{f.stem}_mask.png"
                if not mpath.exists():
                    raise IngestionError(f"missing ground-truth mask {mpath} for anomalous image {f}")
                mask = load_mask(mpath, resize_to, center_crop_to)
                label = "anomalous" if mask.any() else "normal"
                out.append(ImageSample(px, mask, label, cid, "test", sid, cat.name, ddir.name))
    return out


def batch_iterator(samples: Sequence, batch_size: int, shuffle_seed: int, epoch: int = 0) -> Iterator[list]:
    """Seeded per-epoch shuffle; the last partial batch is kept."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    n = len(samples)
    if n == 0:
        raise UsageError("cannot iterate over an empty sample set")
    order = np.random.default_rng([shuffle_seed, 0x5A1E, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield [samples[int(i)] for i in order[start:start + batch_size]]
