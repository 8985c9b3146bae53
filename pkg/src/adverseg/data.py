"""Synthetic shape datasets, folder ingestion, splits, augmentation, batching.

A dataset is a plain list of :class:`Sample`. Generated datasets persist in a
``images/*.png`` + ``labels/*.png`` folder layout that :func:`load_folder_dataset`
reads back, so synthetic and external data flow through the same pipeline.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .maps import IGNORE, resize_bilinear, resize_nearest
from .rng import derive_seed

LABELED = "labeled"
UNLABELED = "unlabeled"

# Shape geometry, cycled over the foreground classes 1..C-1.
SHAPE_KINDS = ("disk", "square", "triangle")

# Texture / color parameters of the generator. Foreground hues are spaced
# around the wheel but jittered enough that class colors overlap at the
# margins, so shape geometry still carries part of the signal.
_BG_BASE = (0.46, 0.43, 0.40)
_BG_FIELD_AMPLITUDE = 0.18
_BG_SPECKLE = 0.04
_SHAPE_JITTER = 0.16
_SHAPE_NOISE = 0.04


class IngestionError(RuntimeError):
    """A dataset folder is missing, unreadable, or inconsistent."""


@dataclass
class Sample:
    """One image with an optional pixel-exact label map."""

    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: Optional[np.ndarray] = None  # (H, W) int, values < C or IGNORE

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[-1] != 3:
            raise ValueError(f"sample {self.id}: image must be (H, W, 3)")
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise ValueError(
                f"sample {self.id}: label shape {self.label.shape} does not match "
                f"image {self.image.shape[:2]}"
            )


@dataclass(frozen=True)
class DatasetSplit:
    """Deterministic labeled/unlabeled partition of a dataset."""

    labeled_ids: tuple
    unlabeled_ids: tuple
    fraction: float
    seed: int


@dataclass
class AugmentConfig:
    """Random scale + crop settings; scale disabled gives fixed-size crops."""

    crop_h: int
    crop_w: int
    scale_min: float = 0.5
    scale_max: float = 1.5
    enable_scale: bool = True

    def __post_init__(self) -> None:
        if self.crop_h < 1 or self.crop_w < 1:
            raise ValueError("crop dimensions must be >= 1")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")


def _class_color(cls: int, num_classes: int) -> np.ndarray:
    """Base color for a foreground class, hue-spaced around the wheel."""
    hue = (cls - 1) / max(1, num_classes - 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.80), dtype=np.float64)


def _shape_mask(kind: str, cy: int, cx: int, r: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "triangle":
        # Upward triangle: apex at (cy - r, cx), base width 2r at cy + r.
        return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2.0)
    raise ValueError(f"unknown shape kind {kind!r}")


def _textured_background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency color field plus per-pixel speckle."""
    cells = max(2, min(h, w) // 8)
    field = rng.uniform(-1.0, 1.0, size=(cells, cells, 3))
    field = resize_bilinear(field, h, w)
    img = np.asarray(_BG_BASE) + _BG_FIELD_AMPLITUDE * field
    img = img + rng.normal(0.0, _BG_SPECKLE, size=(h, w, 3))
    return img


def _generate_sample(sample_id: str, h: int, w: int, num_classes: int,
                     seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    image = _textured_background(h, w, rng)
    label = np.zeros((h, w), dtype=np.int64)

    m = min(h, w)
    # Area cap: 3 shapes of half-extent r cover at most 12 r^2 <= 0.7 m^2
    # pixels, so the background keeps at least 30% of the image.
    r_min = max(3, m // 8)
    r_max = max(r_min, int(0.24 * m))
    occupied = np.zeros((h, w), dtype=bool)

    n_shapes = int(rng.integers(1, 4))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        kind = SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]
        for _attempt in range(20):
            r = int(rng.integers(r_min, r_max + 1))
            cy = int(rng.integers(r, h - r)) if h > 2 * r else h // 2
            cx = int(rng.integers(r, w - r)) if w > 2 * r else w // 2
            mask = _shape_mask(kind, cy, cx, r, h, w)
            if not (mask & occupied).any():
                break
        else:
            continue  # no non-overlapping placement found; drop this shape
        occupied |= mask
        color = _class_color(cls, num_classes) + rng.uniform(
            -_SHAPE_JITTER, _SHAPE_JITTER, size=3
        )
        image[mask] = color + rng.normal(0.0, _SHAPE_NOISE, size=(int(mask.sum()), 3))
        label[mask] = cls

    # Quantize to 8 bits so saving as PNG and reloading round-trips exactly.
    image = np.clip(image, 0.0, 1.0)
    image = np.floor(image * 255.0 + 0.5).astype(np.uint8).astype(np.float32) / 255.0
    return Sample(id=sample_id, image=image, label=label)


def generate_shapes_dataset(n: int, height: int, width: int, num_classes: int,
                            seed: int) -> list:
    """Generate ``n`` images of 1-3 non-overlapping shapes on textured ground.

    Class 0 is the background; foreground classes cycle through disk, square,
    and triangle geometry. Labels are pixel-exact. The same arguments always
    produce a bit-identical dataset.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes (background + one shape)")
    if height < 8 or width < 8:
        raise ValueError("images must be at least 8x8")
    return [
        _generate_sample(f"{i:05d}", height, width, num_classes,
                         derive_seed(seed, "sample", i))
        for i in range(n)
    ]


def save_folder_dataset(samples: Sequence[Sample], path) -> None:
    """Persist samples as images/*.png (+ labels/*.png for labeled ones)."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = np.floor(np.asarray(s.image, dtype=np.float64) * 255.0 + 0.5)
        Image.fromarray(arr.astype(np.uint8), mode="RGB").save(
            path / "images" / f"{s.id}.png"
        )
        if s.label is not None:
            Image.fromarray(s.label.astype(np.uint8), mode="L").save(
                path / "labels" / f"{s.id}.png"
            )


def load_folder_dataset(path) -> list:
    """Load a folder dataset; samples without a label file are unlabeled."""
    path = Path(path)
    images_dir = path / "images"
    labels_dir = path / "labels"
    if not images_dir.is_dir():
        raise IngestionError(f"no images/ directory under {path}")
    samples = []
    for img_path in sorted(images_dir.glob("*.png")):
        stem = img_path.stem
        try:
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise IngestionError(f"unreadable image for stem {stem!r}: {exc}") from exc
        label = None
        label_path = labels_dir / f"{stem}.png"
        if label_path.exists():
            try:
                with Image.open(label_path) as im:
                    label = np.asarray(im.convert("L"), dtype=np.int64)
            except Exception as exc:
                raise IngestionError(f"unreadable label for stem {stem!r}: {exc}") from exc
            if label.shape != image.shape[:2]:
                raise IngestionError(
                    f"stem {stem!r}: label size {label.shape} does not match "
                    f"image size {image.shape[:2]}"
                )
        samples.append(Sample(id=stem, image=image, label=label))
    return samples


def dataset_fingerprint(samples: Sequence[Sample]) -> str:
    """Stable hex digest of ids, pixels, and labels; identifies a dataset."""
    import hashlib

    digest = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.id):
        digest.update(s.id.encode())
        digest.update(np.ascontiguousarray(s.image).tobytes())
        if s.label is not None:
            digest.update(np.ascontiguousarray(s.label).tobytes())
    return digest.hexdigest()


def split_labeled(samples: Sequence[Sample], fraction: float, seed: int) -> DatasetSplit:
    """Pick max(1, floor(fraction * N)) samples as labeled, rest unlabeled."""
    if len(samples) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    ids = [s.id for s in samples]
    n_labeled = max(1, math.floor(fraction * len(ids)))
    perm = np.random.default_rng(seed).permutation(len(ids))
    chosen = {ids[i] for i in perm[:n_labeled]}
    labeled = tuple(sorted(chosen))
    unlabeled = tuple(sorted(set(ids) - chosen))
    return DatasetSplit(labeled_ids=labeled, unlabeled_ids=unlabeled,
                        fraction=fraction, seed=seed)


def augment(sample: Sample, cfg: AugmentConfig, seed: int) -> Sample:
    """Random scale (optional) then random crop to (crop_h, crop_w).

    Labels follow the image with nearest-neighbor resampling. When the scaled
    image is smaller than the crop, the image is zero-padded bottom/right and
    the label padded with IGNORE.
    """
    rng = np.random.default_rng(seed)
    image = sample.image
    label = sample.label

    if cfg.enable_scale:
        factor = rng.uniform(cfg.scale_min, cfg.scale_max)
        h, w = image.shape[:2]
        nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
        image = resize_bilinear(image, nh, nw).astype(np.float32)
        if label is not None:
            label = resize_nearest(label, nh, nw)

    h, w = image.shape[:2]
    pad_h = max(0, cfg.crop_h - h)
    pad_w = max(0, cfg.crop_w - w)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
        if label is not None:
            label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=IGNORE)
        h, w = image.shape[:2]

    off_y = int(rng.integers(0, h - cfg.crop_h + 1))
    off_x = int(rng.integers(0, w - cfg.crop_w + 1))
    image = image[off_y:off_y + cfg.crop_h, off_x:off_x + cfg.crop_w]
    label = None if label is None else label[off_y:off_y + cfg.crop_h,
                                             off_x:off_x + cfg.crop_w]
    return Sample(id=sample.id, image=np.ascontiguousarray(image),
                  label=None if label is None else np.ascontiguousarray(label))


@dataclass(frozen=True)
class Batch:
    """A homogeneous batch of sample ids tagged labeled or unlabeled."""

    tag: str
    sample_ids: tuple


def pool_batch_ids(ids: Sequence[str], batch_size: int, seed: int,
                   batch_index: int) -> tuple:
    """Ids for the ``batch_index``-th batch drawn from one pool.

    The pool cycles through seeded reshuffles: position p belongs to epoch
    p // n and indexes a fresh permutation of the pool, so the stream is an
    infinite, stateless function of (ids, seed, position).
    """
    n = len(ids)
    if n == 0:
        raise ValueError("cannot draw batches from an empty pool")
    out = []
    for j in range(batch_size):
        epoch, offset = divmod(batch_index * batch_size + j, n)
        perm = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(n)
        out.append(ids[perm[offset]])
    return tuple(out)


def interleave_batches(split: DatasetSplit, batch_size: int,
                       seed: int) -> Iterator[Batch]:
    """Unbounded deterministic stream of homogeneous batches.

    Tags strictly alternate labeled, unlabeled, labeled, ... as soon as both
    pools are non-empty; with a single non-empty pool every batch carries
    that pool's tag.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not split.labeled_ids and not split.unlabeled_ids:
        raise ValueError("both pools are empty")
    counters = {LABELED: 0, UNLABELED: 0}
    step = 0
    while True:
        if not split.unlabeled_ids:
            tag = LABELED
        elif not split.labeled_ids:
            tag = UNLABELED
        else:
            tag = LABELED if step % 2 == 0 else UNLABELED
        pool = split.labeled_ids if tag == LABELED else split.unlabeled_ids
        ids = pool_batch_ids(pool, batch_size, derive_seed(seed, tag), counters[tag])
        counters[tag] += 1
        step += 1
        yield Batch(tag=tag, sample_ids=ids)
