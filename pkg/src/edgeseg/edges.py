"""Ground-truth edge targets: Sobel on label IDs, then a hard threshold.

Magnitudes are L1 (``|Gx| + |Gy|``) so integer labels give exact integer
results. Borders use replicate padding, which keeps the image frame from
producing edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IGNORE_LABEL, BinaryEdgeMap, LabelMap, _frozen

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True, eq=False)
class GradientMap:
    magnitude: np.ndarray

    def __post_init__(self):
        mag = np.asarray(self.magnitude)
        if mag.ndim != 2:
            raise ValueError(f"gradient map must be 2-D, got shape {mag.shape}")
        if np.any(mag < 0):
            raise ValueError("gradient magnitude must be non-negative")
        object.__setattr__(self, "magnitude", _frozen(mag))

    @property
    def height(self) -> int:
        return self.magnitude.shape[0]

    @property
    def width(self) -> int:
        return self.magnitude.shape[1]


def _windows(values: np.ndarray) -> np.ndarray:
    """All 3x3 neighbourhoods under replicate padding, shape (H, W, 3, 3)."""
    padded = np.pad(values, 1, mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, (3, 3))


def sobel_magnitude(label: LabelMap) -> GradientMap:
    win = _windows(label.data.astype(np.int64))
    gx = np.einsum("hwij,ij->hw", win, SOBEL_X)
    gy = np.einsum("hwij,ij->hw", win, SOBEL_Y)
    return GradientMap(np.abs(gx) + np.abs(gy))


def threshold_edges(grad: GradientMap) -> BinaryEdgeMap:
    # Values at or above 1 become edges; integer labels never produce (0, 1).
    edges = (grad.magnitude >= 1).astype(np.uint8)
    return BinaryEdgeMap(edges, np.ones_like(edges))


def touches_ignore(label: LabelMap) -> np.ndarray:
    """True where the replicate-padded 3x3 window contains an ignore pixel."""
    return _windows(label.ignore_mask).any(axis=(2, 3))


def edge_target(label: LabelMap) -> BinaryEdgeMap:
    """Binary edge target with pixels near the ignore region masked out."""
    binary = threshold_edges(sobel_magnitude(label))
    valid = ~touches_ignore(label)
    return BinaryEdgeMap(binary.edges & valid, valid.astype(np.uint8))


def boundary_pixels(label: LabelMap) -> np.ndarray:
    """Boolean mask of valid class-transition pixels."""
    target = edge_target(label)
    return target.edges.astype(bool)


__all__ = [
    "GradientMap",
    "IGNORE_LABEL",
    "SOBEL_X",
    "SOBEL_Y",
    "boundary_pixels",
    "edge_target",
    "sobel_magnitude",
    "threshold_edges",
    "touches_ignore",
]
