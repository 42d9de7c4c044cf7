"""Confusion-matrix evaluation: per-class IoU, mIoU and Cityscapes category IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE_LABEL, NUM_CLASSES, DimensionMismatch, EdgeSegError, LabelMap

TRAIN_ID_NAMES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
CATEGORY_NAMES = ("flat", "construction", "object", "nature", "sky", "human", "vehicle")
CITYSCAPES_CATEGORIES = (0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 5, 5, 6, 6, 6, 6, 6, 6)


class PredContainsIgnore(EdgeSegError):
    pass


class AllClassesUndefined(EdgeSegError):
    pass


@dataclass(eq=False)
class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels of true class t predicted as p."""

    num_classes: int = NUM_CLASSES
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.array(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise DimensionMismatch(f"counts must be {self.num_classes}x{self.num_classes}")
            if np.any(self.counts < 0):
                raise ValueError("confusion counts must be non-negative")

    def accumulate(self, pred: LabelMap, truth: LabelMap) -> None:
        accumulate(self, pred, truth)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.num_classes != other.num_classes:
            raise DimensionMismatch("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class CategoryMap:
    """Total map from class ID to category ID."""

    mapping: tuple = CITYSCAPES_CATEGORIES
    names: tuple = CATEGORY_NAMES

    def __post_init__(self):
        mapping = tuple(int(c) for c in self.mapping)
        if len(mapping) != NUM_CLASSES:
            raise ValueError(f"category map must cover all {NUM_CLASSES} classes")
        if set(mapping) != set(range(len(self.names))):
            raise ValueError(f"category map must use exactly categories 0..{len(self.names) - 1}")
        object.__setattr__(self, "mapping", mapping)

    @property
    def num_categories(self) -> int:
        return len(self.names)

    @classmethod
    def from_json(cls, path) -> "CategoryMap":
        """Read ``{"mapping": [...19 ints...], "names": [...]}``; names optional."""
        with open(path) as f:
            doc = json.load(f)
        if isinstance(doc, list):
            doc = {"mapping": doc}
        return cls(tuple(doc["mapping"]), tuple(doc.get("names", CATEGORY_NAMES)))


def accumulate(cm: ConfusionMatrix, pred: LabelMap, truth: LabelMap) -> None:
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    p = pred.data.ravel().astype(np.int64)
    t = truth.data.ravel().astype(np.int64)
    if np.any(p == IGNORE_LABEL):
        raise PredContainsIgnore("predictions must not contain the ignore label")
    keep = t != IGNORE_LABEL
    p, t = p[keep], t[keep]
    n = cm.num_classes
    if p.size and max(p.max(), t.max()) >= n:
        raise DimensionMismatch(f"class id exceeds confusion matrix size {n}")
    cm.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)


def _iou(counts: np.ndarray) -> list:
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    return [float(tp[i] / denom[i]) if denom[i] > 0 else None for i in range(len(tp))]


def iou_per_class(cm: ConfusionMatrix) -> list:
    """IoU per class; ``None`` for classes absent from truth and prediction."""
    return _iou(cm.counts)


def _mean(values: list) -> float:
    defined = [v for v in values if v is not None]
    if not defined:
        raise AllClassesUndefined("no class has a defined IoU")
    return float(np.mean(defined))


def mean_iou(cm: ConfusionMatrix) -> float:
    return _mean(iou_per_class(cm))


def frequency_weighted_iou(counts: np.ndarray) -> float:
    freq = counts.sum(axis=1).astype(np.float64)
    if freq.sum() == 0:
        raise AllClassesUndefined("empty confusion matrix")
    ious = np.array([v if v is not None else 0.0 for v in _iou(counts)])
    return float((freq * ious).sum() / freq.sum())


def collapse(cm: ConfusionMatrix, cat_map: CategoryMap) -> np.ndarray:
    """Sum class rows and columns into a category-level confusion matrix."""
    k = cat_map.num_categories
    onehot = np.zeros((cm.num_classes, k), dtype=np.int64)
    onehot[np.arange(cm.num_classes), cat_map.mapping[:cm.num_classes]] = 1
    return onehot.T @ cm.counts @ onehot


def category_metrics(cm: ConfusionMatrix, cat_map: CategoryMap | None = None):
    """Return ``(iou_per_category, mean_category_iou)``."""
    cat_map = cat_map or CategoryMap()
    per_cat = _iou(collapse(cm, cat_map))
    return per_cat, _mean(per_cat)


def report(cm: ConfusionMatrix, cat_map: CategoryMap | None = None) -> dict:
    """Structured summary in the shape of the usual class/category IoU table.

    ``table_row`` carries the four headline numbers: frequency-weighted and
    mean IoU over classes, then the same pair over categories.
    """
    cat_map = cat_map or CategoryMap()
    per_class = iou_per_class(cm)
    per_cat, mean_cat = category_metrics(cm, cat_map)
    cat_counts = collapse(cm, cat_map)
    miou = _mean(per_class)
    names = TRAIN_ID_NAMES if cm.num_classes == NUM_CLASSES else tuple(str(i) for i in range(cm.num_classes))
    return {
        "pixels": cm.total,
        "pixel_accuracy": float(np.trace(cm.counts) / cm.total) if cm.total else None,
        "iou_per_class": {name: v for name, v in zip(names, per_class)},
        "mIoU_cls": miou,
        "fwIoU_cls": frequency_weighted_iou(cm.counts),
        "iou_per_category": {name: v for name, v in zip(cat_map.names, per_cat)},
        "mIoU_cat": mean_cat,
        "fwIoU_cat": frequency_weighted_iou(cat_counts),
        "table_row": {
            "IoU_cls": frequency_weighted_iou(cm.counts),
            "mIoU_cls": miou,
            "IoU_cat": frequency_weighted_iou(cat_counts),
            "mIoU_cat": mean_cat,
        },
    }
