"""Spatial-pyramid max pooling of a convolutional feature map over box sub-grids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .edge_bev import l2_normalize_rows
from .geometry import BoundingBox, as_box_array

DEFAULT_GRID_SIZES = tuple(range(1, 11))


@dataclass
class FeatureMap:
    """``data`` is ``(C, H, W)``; image size maps boxes from pixels to cells."""

    data: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be C x H x W, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite activations")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def map_height(self) -> int:
        return self.data.shape[1]

    @property
    def map_width(self) -> int:
        return self.data.shape[2]


def project_box(box: BoundingBox, fm: FeatureMap) -> tuple[int, int, int, int]:
    """Cell rectangle ``(x0, y0, x1, y1)`` (half-open) covered by ``box`` on the map."""
    if (box.x >= fm.image_width or box.y >= fm.image_height
            or box.x + box.w <= 0 or box.y + box.h <= 0):
        raise ValueError(f"box outside image: {box}")
    return tuple(int(v) for v in project_boxes(np.array([[box.x, box.y, box.w, box.h]]), fm)[0])


def project_boxes(boxes: np.ndarray, fm: FeatureMap) -> np.ndarray:
    boxes = as_box_array(boxes)
    sx = fm.map_width / fm.image_width
    sy = fm.map_height / fm.image_height
    x0 = np.floor(boxes[:, 0] * sx)
    y0 = np.floor(boxes[:, 1] * sy)
    x1 = np.ceil((boxes[:, 0] + boxes[:, 2]) * sx)
    y1 = np.ceil((boxes[:, 1] + boxes[:, 3]) * sy)
    x0 = np.clip(x0, 0, fm.map_width - 1)
    y0 = np.clip(y0, 0, fm.map_height - 1)
    x1 = np.clip(np.maximum(x1, x0 + 1), 1, fm.map_width)
    y1 = np.clip(np.maximum(y1, y0 + 1), 1, fm.map_height)
    return np.stack([x0, y0, x1, y1], axis=1).astype(np.intp)


@dataclass
class SppBank:
    grid_sizes: tuple = DEFAULT_GRID_SIZES
    selection: np.ndarray | None = None
    bins: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grid_sizes = tuple(int(d) for d in self.grid_sizes)
        self.bins = np.array([(d, r, c) for d in self.grid_sizes
                              for r in range(d) for c in range(d)], dtype=np.intp)
        if self.selection is not None:
            self.selection = np.asarray(self.selection, dtype=np.intp)

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    @property
    def active_bins(self) -> np.ndarray:
        return np.arange(self.n_bins) if self.selection is None else self.selection

    def descriptor_length(self, channels: int) -> int:
        return len(self.active_bins) * channels

    def with_selection(self, selection) -> "SppBank":
        return SppBank(self.grid_sizes, selection)


def build_spp_bank(grid_sizes=DEFAULT_GRID_SIZES, selection=None) -> SppBank:
    """D x D grids for every D, ordered by ascending D then row-major."""
    return SppBank(grid_sizes, selection)


def sub_cells(start: int, stop: int, d: int, k: int) -> tuple[int, int]:
    """Cells of division ``k`` out of ``d`` along ``[start, stop)``; never empty."""
    extent = stop - start
    lo = start + math.floor(k * extent / d)
    hi = start + math.ceil((k + 1) * extent / d)
    return lo, max(hi, lo + 1)


def pool_spp_batch(boxes, fm: FeatureMap, bank: SppBank) -> np.ndarray:
    """Raw channel maxima, shape ``(n, n_active_bins, C)``; no normalization."""
    cells = project_boxes(boxes, fm)
    bins = bank.bins[bank.active_bins]
    data = fm.data
    C = fm.channels
    out = np.zeros((len(cells), len(bins), C), dtype=np.float64)
    for i, (x0, y0, x1, y1) in enumerate(cells):
        for j, (d, r, c) in enumerate(bins):
            ra, rb = sub_cells(y0, y1, d, r)
            ca, cb = sub_cells(x0, x1, d, c)
            block = data[:, ra:min(rb, fm.map_height), ca:min(cb, fm.map_width)]
            if block.size:
                out[i, j] = block.max(axis=(1, 2))
    return out


def extract_spp_batch(boxes, fm: FeatureMap, bank: SppBank) -> np.ndarray:
    """Unit-norm descriptors ``(n, n_active_bins * C)``."""
    pooled = pool_spp_batch(boxes, fm, bank)
    return l2_normalize_rows(pooled.reshape(len(pooled), -1))


def extract_spp(box: BoundingBox, fm: FeatureMap, bank: SppBank) -> np.ndarray:
    project_box(box, fm)
    return extract_spp_batch([box], fm, bank)[0]
