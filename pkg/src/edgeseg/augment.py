"""Rare-class copy-paste augmentation.

Instances are 8-connected components of a class in the semantic label map.
Each paste draws a donor uniformly from a pool, rescales it, optionally
mirrors it, and overwrites the image/label at a uniformly random position
where it fits. All randomness comes from an explicit ``numpy.random.Generator``
(PCG64), so a seed reproduces the same output on every platform.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .core import IGNORE_LABEL, NUM_CLASSES, DimensionMismatch, EdgeSegError, LabelMap, RgbImage

log = logging.getLogger(__name__)

# wall, fence, bus, train
DEFAULT_RARE_CLASSES = (3, 4, 15, 16)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class DegenerateSize(EdgeSegError):
    pass


class OutOfBounds(EdgeSegError):
    pass


class EmptyDonorPool(EdgeSegError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    rare_classes: tuple = DEFAULT_RARE_CLASSES
    scale_min: float = 0.5
    scale_max: float = 1.5
    flip_probability: float = 0.5
    pastes_per_image: int = 2
    min_instance_pixels: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rare_classes", tuple(sorted(int(c) for c in self.rare_classes)))
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        if not 0 <= self.flip_probability <= 1:
            raise ValueError("flip_probability must be in [0, 1]")
        if any(c < 0 or c >= NUM_CLASSES for c in self.rare_classes):
            raise ValueError("rare classes must be trainIds 0..18")
        if self.pastes_per_image < 0 or self.min_instance_pixels < 1:
            raise ValueError("pastes_per_image must be >= 0 and min_instance_pixels >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, doc: dict) -> "AugmentConfig":
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown augment config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["rare_classes"] = list(self.rare_classes)
        return doc


@dataclass(frozen=True, eq=False)
class InstancePatch:
    """A masked RGB crop. ``pixels`` is zero wherever ``mask`` is zero."""

    source_class: int
    bbox: tuple
    mask: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.uint8)
        pixels = np.asarray(self.pixels, dtype=np.uint8)
        if mask.ndim != 2 or pixels.shape != mask.shape + (3,):
            raise DimensionMismatch(f"mask {mask.shape} and pixels {pixels.shape} disagree")
        mask.setflags(write=False)
        pixels.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, InstancePatch):
            return NotImplemented
        return (self.source_class == other.source_class and self.bbox == other.bbox
                and np.array_equal(self.mask, other.mask) and np.array_equal(self.pixels, other.pixels))


@dataclass
class ClassHistogram:
    counts: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))
    ignore_count: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignore_count

    def frequencies(self) -> np.ndarray:
        labelled = self.counts.sum()
        if labelled == 0:
            return np.zeros(NUM_CLASSES)
        return self.counts / labelled

    def rare_count(self, classes) -> int:
        return int(self.counts[list(classes)].sum())


@dataclass
class PasteRecord:
    donor: int
    source_class: int
    scale: float
    flip: bool
    x: int | None
    y: int | None
    width: int
    height: int
    skipped: bool
    reason: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class AugmentLog:
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def footprint(self, shape) -> np.ndarray:
        """Union of the bounding boxes of all applied pastes."""
        out = np.zeros(shape, dtype=bool)
        for r in self.records:
            if not r.skipped:
                out[r.y:r.y + r.height, r.x:r.x + r.width] = True
        return out


def class_histogram(labels) -> ClassHistogram:
    hist = ClassHistogram()
    for label in labels:
        values = label.data.ravel()
        hist.ignore_count += int(np.count_nonzero(values == IGNORE_LABEL))
        hist.counts += np.bincount(values[values != IGNORE_LABEL], minlength=NUM_CLASSES)[:NUM_CLASSES]
    return hist


def extract_instances(label: LabelMap, image: RgbImage, class_id: int, min_pixels: int) -> list:
    """One patch per 8-connected component of ``class_id`` with at least ``min_pixels`` pixels.

    Patches come out in row-major order of each component's first pixel.
    """
    if label.shape != image.shape:
        raise DimensionMismatch(f"label {label.shape} vs image {image.shape}")
    components, n = ndimage.label(label.data == class_id, structure=EIGHT_CONNECTED)
    patches = []
    for index, sl in enumerate(ndimage.find_objects(components), start=1):
        mask = components[sl] == index
        if mask.sum() < min_pixels:
            continue
        ys, xs = sl
        pixels = image.data[sl] * mask[..., None]
        bbox = (xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        first = np.flatnonzero(components.ravel() == index)[0]
        patches.append((first, InstancePatch(class_id, bbox, mask, pixels)))
    patches.sort(key=lambda item: item[0])
    return [p for _, p in patches]


def build_donor_pool(pairs, config: AugmentConfig) -> list:
    """Extract every rare-class instance from ``(image, label)`` pairs."""
    pool = []
    for image, label in pairs:
        for class_id in config.rare_classes:
            pool.extend(extract_instances(label, image, class_id, config.min_instance_pixels))
    return pool


def _scaled_size(size: int, scale: float) -> int:
    return int(math.floor(size * scale + 0.5))


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    idx = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.intp)
    return np.minimum(idx, in_size - 1)


def _bilinear_taps(out_size: int, in_size: int):
    pos = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    pos = np.clip(pos, 0, in_size - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, pos - lo


def transform_patch(patch: InstancePatch, scale: float, flip: bool) -> InstancePatch:
    """Resize (mask nearest-neighbour, pixels bilinear) and optionally mirror.

    Bilinear weights are restricted to source taps inside the mask so
    background colours never bleed in; where no tap is inside the mask the
    nearest source pixel is used.
    """
    if scale <= 0:
        raise DegenerateSize("scale must be positive")
    h, w = patch.height, patch.width
    nh, nw = _scaled_size(h, scale), _scaled_size(w, scale)
    if nh < 1 or nw < 1:
        raise DegenerateSize(f"{w}x{h} patch scaled by {scale} has no pixels")
    if (nh, nw) == (h, w):
        mask, pixels = patch.mask.copy(), patch.pixels.copy()
    else:
        ny, nx = _nearest_index(nh, h), _nearest_index(nw, w)
        mask = patch.mask[np.ix_(ny, nx)]
        src = patch.pixels.astype(np.float64)
        src_mask = patch.mask.astype(np.float64)
        y0, y1, fy = _bilinear_taps(nh, h)
        x0, x1, fx = _bilinear_taps(nw, w)
        acc = np.zeros((nh, nw, 3))
        wsum = np.zeros((nh, nw))
        for ys, wy in ((y0, 1 - fy), (y1, fy)):
            for xs, wx in ((x0, 1 - fx), (x1, fx)):
                wgt = np.outer(wy, wx) * src_mask[np.ix_(ys, xs)]
                acc += wgt[..., None] * src[np.ix_(ys, xs)]
                wsum += wgt
        nearest = src[np.ix_(ny, nx)]
        blended = np.where(wsum[..., None] > 0, acc / np.maximum(wsum, 1e-12)[..., None], nearest)
        pixels = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8) * mask[..., None]
    if flip:
        mask, pixels = mask[:, ::-1], pixels[:, ::-1]
    x, y = patch.bbox[:2]
    return InstancePatch(patch.source_class, (x, y, mask.shape[1], mask.shape[0]), mask, pixels)


def paste_patch(image: RgbImage, label: LabelMap, patch: InstancePatch, x: int, y: int):
    """Overwrite masked pixels at ``(x, y)``; returns a new ``(image, label)`` pair."""
    if image.shape != label.shape:
        raise DimensionMismatch(f"image {image.shape} vs label {label.shape}")
    if x < 0 or y < 0 or x + patch.width > image.width or y + patch.height > image.height:
        raise OutOfBounds(f"{patch.width}x{patch.height} patch at ({x}, {y}) exceeds {image.width}x{image.height}")
    img = image.data.copy()
    lab = label.data.copy()
    m = patch.mask.astype(bool)
    region = (slice(y, y + patch.height), slice(x, x + patch.width))
    img[region][m] = patch.pixels[m]
    lab[region][m] = patch.source_class
    return RgbImage(img), LabelMap(lab)


def augment_sample(image: RgbImage, label: LabelMap, donor_pool, config: AugmentConfig, rng):
    """Paste up to ``config.pastes_per_image`` rare-class donors.

    ``rng`` is a ``numpy.random.Generator`` or a seed for one. Returns
    ``(image, label, AugmentLog)``.
    """
    rng = np.random.default_rng(rng)
    log_ = AugmentLog()
    if config.pastes_per_image == 0:
        return image, label, log_
    if not donor_pool:
        msg = "empty donor pool; sample left unchanged"
        log.warning(msg)
        log_.warnings.append(msg)
        return image, label, log_
    rare = set(config.rare_classes)
    for patch in donor_pool:
        if patch.source_class not in rare:
            raise ValueError(f"donor of class {patch.source_class} is not a configured rare class")
    for _ in range(config.pastes_per_image):
        donor = int(rng.integers(len(donor_pool)))
        scale = float(rng.uniform(config.scale_min, config.scale_max))
        flip = bool(rng.random() < config.flip_probability)
        patch = donor_pool[donor]
        try:
            moved = transform_patch(patch, scale, flip)
        except DegenerateSize:
            log_.records.append(PasteRecord(donor, patch.source_class, scale, flip, None, None, 0, 0, True, "degenerate"))
            continue
        if moved.width > image.width or moved.height > image.height:
            log_.records.append(PasteRecord(donor, patch.source_class, scale, flip, None, None,
                                            moved.width, moved.height, True, "does not fit"))
            continue
        x = int(rng.integers(image.width - moved.width + 1))
        y = int(rng.integers(image.height - moved.height + 1))
        image, label = paste_patch(image, label, moved, x, y)
        log_.records.append(PasteRecord(donor, patch.source_class, scale, flip, x, y, moved.width, moved.height, False))
    return image, label, log_


def derived_seed(seed: int, index: int) -> int:
    """Per-image seed, independent of processing order."""
    return (int(seed) ^ int(index)) & (2**64 - 1)
