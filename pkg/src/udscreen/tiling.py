"""Wide-field image tiling and box-level geometry.

Wide-field captures are too large for whole-image inference, so they are
cut into fixed-size overlapping tiles; detections made in tile coordinates
are mapped back and merged with NMS.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_TILE_SIZE = 512
DEFAULT_OVERLAP = 0.5
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, half-open ordering x_min < x_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return dataclasses.replace(
            self, x_min=self.x_min + dx, y_min=self.y_min + dy,
            x_max=self.x_max + dx, y_max=self.y_max + dy,
        )


@dataclass
class WideFieldImage:
    """One wide-field capture of a body region for a single patient."""

    pixels: np.ndarray  # (H, W, 3) uint8
    patient_id: str
    source_path: str | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixel array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("empty image")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {px.dtype}")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        self.pixels = px

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @classmethod
    def from_file(cls, path: str | Path, patient_id: str | None = None) -> "WideFieldImage":
        from PIL import Image

        path = Path(path)
        with Image.open(path) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return cls(pixels=px, patient_id=patient_id or path.stem, source_path=str(path))


@dataclass
class Tile:
    """A square window of a wide-field image; origin is its top-left in full coords."""

    origin_x: int
    origin_y: int
    pixels: np.ndarray  # (tile_size, tile_size, 3) uint8

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


def _reflect_index(i: np.ndarray, n: int) -> np.ndarray:
    """Map integer indices onto [0, n) by boundary reflection without repeating the edge.

    Follows np.pad(mode="reflect"); n == 1 collapses everything to index 0.
    """
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.abs(i) % period
    return np.where(i >= n, period - i, i)


def reflect_window(pixels: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Extract an (h, w) window at (x0, y0), reflecting out-of-bounds coordinates."""
    ys = _reflect_index(np.arange(y0, y0 + h), pixels.shape[0])
    xs = _reflect_index(np.arange(x0, x0 + w), pixels.shape[1])
    return pixels[np.ix_(ys, xs)]


def tile_origins(dim: int, tile_size: int, stride: int) -> list[int]:
    """Regular grid 0, stride, 2*stride, ... plus a final origin clamped to dim - tile_size."""
    origins = list(range(0, max(dim - tile_size, 0) + 1, stride))
    if origins[-1] + tile_size < dim:
        origins.append(dim - tile_size)
    return origins


def tile_image(
    image: WideFieldImage,
    tile_size: int = DEFAULT_TILE_SIZE,
    overlap_fraction: float = DEFAULT_OVERLAP,
) -> list[Tile]:
    """Cut an image into overlapping square tiles covering every pixel.

    Stride is tile_size * (1 - overlap_fraction) rounded to an integer. Images
    smaller than the tile in either dimension are reflection-padded up to one
    tile along that axis.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    if not (0.0 <= overlap_fraction < 1.0):
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    stride = int(round(tile_size * (1.0 - overlap_fraction)))
    if stride < 1:
        raise ValueError(
            f"tile_size {tile_size} with overlap {overlap_fraction} gives zero stride"
        )

    px = image.pixels
    h, w = px.shape[:2]
    if h < tile_size or w < tile_size:
        pad_y = max(tile_size - h, 0)
        pad_x = max(tile_size - w, 0)
        if max(h, w) == 1 and tile_size > 1:
            # reflect needs at least 2 samples along the padded axis
            px = np.pad(px, ((0, pad_y), (0, pad_x), (0, 0)), mode="edge")
        else:
            px = np.pad(px, ((0, pad_y), (0, pad_x), (0, 0)), mode="reflect")
        h, w = px.shape[:2]

    tiles = []
    for oy in tile_origins(h, tile_size, stride):
        for ox in tile_origins(w, tile_size, stride):
            tiles.append(Tile(origin_x=ox, origin_y=oy,
                              pixels=px[oy:oy + tile_size, ox:ox + tile_size]))
    return tiles


def to_full_coords(
    tile: Tile, box: BoundingBox, image_width: int, image_height: int
) -> BoundingBox:
    """Map a tile-local box to full-image coordinates, clipped to image bounds."""
    x_min = min(max(box.x_min + tile.origin_x, 0.0), image_width - 1.0)
    y_min = min(max(box.y_min + tile.origin_y, 0.0), image_height - 1.0)
    x_max = max(min(box.x_max + tile.origin_x, float(image_width)), x_min + 1e-6)
    y_max = max(min(box.y_max + tile.origin_y, float(image_height)), y_min + 1e-6)
    return dataclasses.replace(box, x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _nms_order_key(box: BoundingBox):
    return (-box.confidence, box.x_min, box.y_min, box.x_max, box.y_max)


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = DEFAULT_NMS_IOU) -> list[BoundingBox]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending confidence (ties broken by ascending
    (x_min, y_min)); each kept box suppresses every remaining box with
    IoU strictly above the threshold. Output preserves visiting order.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    pending = sorted(boxes, key=_nms_order_key)
    kept: list[BoundingBox] = []
    while pending:
        best = pending.pop(0)
        kept.append(best)
        pending = [b for b in pending if iou(best, b) <= iou_threshold]
    return kept
