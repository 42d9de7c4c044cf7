"""Label maps, RGB images, edge maps and lossless PNG I/O.

Label maps use the Cityscapes trainId alphabet: classes 0..18, 255 = ignore.
Arrays are row-major; tensors are channel-major ``(C, H, W)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

NUM_CLASSES = 19
IGNORE_LABEL = 255


class EdgeSegError(Exception):
    """Base class for every error raised by this package."""


class NotAPng(EdgeSegError):
    pass


class WrongPixelFormat(EdgeSegError):
    pass


class InvalidClassId(EdgeSegError):
    def __init__(self, value: int, x: int, y: int):
        super().__init__(f"invalid class id {value} at (x={x}, y={y})")
        self.value = value
        self.x = x
        self.y = y


class DimensionMismatch(EdgeSegError):
    pass


class IoError(EdgeSegError):
    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def find_invalid_class(data: np.ndarray):
    """Return ``(value, x, y)`` of the first pixel outside {0..18, 255}, or None."""
    bad = (data >= NUM_CLASSES) & (data != IGNORE_LABEL)
    if not bad.any():
        return None
    y, x = np.argwhere(bad)[0]
    return int(data[y, x]), int(x), int(y)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel trainIds of shape ``(height, width)``, dtype uint8."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionMismatch(f"label map must be 2-D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 255):
            raise WrongPixelFormat("label values must fit in 8 bits")
        data = data.astype(np.uint8)
        bad = find_invalid_class(data)
        if bad is not None:
            raise InvalidClassId(*bad)
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.data == IGNORE_LABEL

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"LabelMap({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Interleaved 8-bit RGB pixels of shape ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise DimensionMismatch(f"RGB image must have shape (H, W, 3), got {data.shape}")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"RgbImage({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class BinaryEdgeMap:
    """Binary edge indicator plus the mask of pixels that take part in losses.

    Invalid pixels never carry an edge.
    """

    edges: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges).astype(np.uint8)
        valid = np.asarray(self.valid).astype(np.uint8)
        if edges.shape != valid.shape or edges.ndim != 2:
            raise DimensionMismatch(f"edges {edges.shape} and valid {valid.shape} must be equal 2-D shapes")
        if edges.max(initial=0) > 1 or valid.max(initial=0) > 1:
            raise ValueError("edges and valid must be {0,1} arrays")
        if np.any(edges & (1 - valid)):
            raise ValueError("invalid pixels cannot be marked as edges")
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def height(self) -> int:
        return self.edges.shape[0]

    @property
    def width(self) -> int:
        return self.edges.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.edges.shape

    def __eq__(self, other):
        if not isinstance(other, BinaryEdgeMap):
            return NotImplemented
        return np.array_equal(self.edges, other.edges) and np.array_equal(self.valid, other.valid)

    def to_png_array(self) -> np.ndarray:
        """Encode as 0 = non-edge, 255 = edge, 128 = invalid."""
        out = np.where(self.edges == 1, 255, 0).astype(np.uint8)
        out[self.valid == 0] = 128
        return out


def as_tensor3(array) -> np.ndarray:
    """Validate a ``(C, H, W)`` real array; the dtype is kept if floating."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise DimensionMismatch(f"expected a (C, H, W) tensor, got shape {array.shape}")
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float32)
    if not np.all(np.isfinite(array)):
        raise ValueError("tensor contains NaN or Inf")
    return array


def _open_png(path, modes: tuple[str, ...]) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise NotAPng(f"{path}: not a PNG file ({img.format})")
            if img.mode not in modes:
                raise WrongPixelFormat(f"{path}: pixel format {img.mode}, expected one of {modes}")
            return np.array(img)
    except UnidentifiedImageError as err:
        raise NotAPng(f"{path}: not a PNG file") from err


def _write_png(array: np.ndarray, path) -> None:
    path = os.fspath(path) if path is not None else ""
    if not path:
        raise IoError("empty output path")
    try:
        Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")
    except (OSError, ValueError) as err:
        raise IoError(f"cannot write {path}: {err}") from err


def load_label_map(path) -> LabelMap:
    data = _open_png(path, ("L",))
    bad = find_invalid_class(data)
    if bad is not None:
        raise InvalidClassId(*bad)
    return LabelMap(data)


def save_label_map(label: LabelMap, path) -> None:
    _write_png(label.data, path)


def load_rgb_image(path) -> RgbImage:
    return RgbImage(_open_png(path, ("RGB",)))


def save_rgb_image(image: RgbImage, path) -> None:
    _write_png(image.data, path)


def save_edge_map(edge_map: BinaryEdgeMap, path) -> None:
    _write_png(edge_map.to_png_array(), path)
