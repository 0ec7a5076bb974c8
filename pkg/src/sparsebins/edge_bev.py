"""Orientation integral images and the boundary edge vector (BEV) descriptor.

An edge map is quantized into four undirected orientation channels, each
turned into an exclusive-prefix integral image.  The descriptor pools those
channels over stripe bins laid along the four sides of an enlarged box.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox, as_box_array

N_ORIENTATIONS = 4
N_STRIPES = 8
N_SEGMENTS = 5
SIDES = ("top", "right", "bottom", "left")
DEFAULT_STRIPE_FRACTIONS = (0.16, 0.18, 0.22, 0.24, 0.28, 0.32, 0.36)
DEFAULT_ENLARGEMENT = 0.10


@dataclass
class EdgeMap:
    magnitude: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=np.float32)
        self.orientation = np.mod(np.asarray(self.orientation, dtype=np.float32), np.float32(np.pi))
        # float32 mod can land exactly on pi
        self.orientation[self.orientation >= np.float32(np.pi)] = 0.0
        if self.magnitude.ndim != 2 or self.magnitude.shape != self.orientation.shape:
            raise ValueError("magnitude and orientation must be matching 2-D rasters")
        if not np.all(np.isfinite(self.magnitude)) or np.any(self.magnitude < 0):
            raise ValueError("edge magnitudes must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.magnitude.shape[0]

    @property
    def width(self) -> int:
        return self.magnitude.shape[1]


@dataclass
class OrientationIntegrals:
    """Integral images, shape ``(4, H + 1, W + 1)``; ``ii[c, y, x]`` sums rows < y, cols < x."""

    integrals: np.ndarray

    @property
    def height(self) -> int:
        return self.integrals.shape[1] - 1

    @property
    def width(self) -> int:
        return self.integrals.shape[2] - 1

    def rect_sum(self, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        ii = self.integrals
        return ii[:, y1, x1] - ii[:, y0, x1] - ii[:, y1, x0] + ii[:, y0, x0]


def orientation_bins(orientation: np.ndarray) -> np.ndarray:
    q = np.floor(np.asarray(orientation, dtype=np.float64) / (np.pi / N_ORIENTATIONS)).astype(np.intp)
    return np.clip(q, 0, N_ORIENTATIONS - 1)


def quantize_orientations(edges: EdgeMap) -> OrientationIntegrals:
    bins = orientation_bins(edges.orientation)
    mag = edges.magnitude.astype(np.float64)
    ii = np.zeros((N_ORIENTATIONS, edges.height + 1, edges.width + 1), dtype=np.float64)
    for c in range(N_ORIENTATIONS):
        channel = np.where(bins == c, mag, 0.0)
        ii[c, 1:, 1:] = channel.cumsum(axis=0).cumsum(axis=1)
    return OrientationIntegrals(ii)


def enlarge_box(box: BoundingBox, factor: float = DEFAULT_ENLARGEMENT) -> BoundingBox:
    """Scale width and height by ``1 + factor`` about the box center."""
    w, h = box.w * (1.0 + factor), box.h * (1.0 + factor)
    return BoundingBox(box.x - (w - box.w) / 2.0, box.y - (h - box.h) / 2.0, w, h)


def enlarge_boxes(boxes: np.ndarray, factor: float = DEFAULT_ENLARGEMENT) -> np.ndarray:
    boxes = as_box_array(boxes)
    out = boxes.copy()
    out[:, 2:] *= 1.0 + factor
    out[:, :2] -= (out[:, 2:] - boxes[:, 2:]) / 2.0
    return out


@dataclass
class BevLayout:
    """160 stripe bins for one stripe fraction, as ``(x0, y0, x1, y1)`` in the unit frame."""

    stripe_fraction: float
    bins: np.ndarray

    def __len__(self):
        return len(self.bins)


def build_bev_layout(stripe_fraction: float) -> BevLayout:
    """Bins ordered by side (top, right, bottom, left), stripe from the edge inward, then segment."""
    p = float(stripe_fraction)
    if not 0.0 < p < 1.0:
        raise ValueError(f"stripe fraction must lie in (0, 1), got {stripe_fraction}")
    t = p / N_STRIPES
    seg = np.linspace(0.0, 1.0, N_SEGMENTS + 1)
    rects = []
    for side in SIDES:
        for k in range(N_STRIPES):
            near, far = k * t, (k + 1) * t
            for j in range(N_SEGMENTS):
                a, b = seg[j], seg[j + 1]
                if side == "top":
                    rects.append((a, near, b, far))
                elif side == "right":
                    rects.append((1.0 - far, a, 1.0 - near, b))
                elif side == "bottom":
                    rects.append((a, 1.0 - far, b, 1.0 - near))
                else:
                    rects.append((near, a, far, b))
    return BevLayout(p, np.asarray(rects, dtype=np.float64))


@dataclass
class BevBank:
    layouts: list
    selection: np.ndarray | None = None
    enlargement: float = DEFAULT_ENLARGEMENT
    bins: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.bins = np.concatenate([layout.bins for layout in self.layouts], axis=0)
        if self.selection is not None:
            self.selection = np.asarray(self.selection, dtype=np.intp)

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    @property
    def active_bins(self) -> np.ndarray:
        return np.arange(self.n_bins) if self.selection is None else self.selection

    @property
    def descriptor_length(self) -> int:
        return len(self.active_bins) * N_ORIENTATIONS

    def with_selection(self, selection) -> "BevBank":
        return BevBank(self.layouts, selection, self.enlargement)


def build_bev_bank(stripe_fractions=DEFAULT_STRIPE_FRACTIONS, selection=None,
                   enlargement: float = DEFAULT_ENLARGEMENT) -> BevBank:
    return BevBank([build_bev_layout(p) for p in stripe_fractions], selection, enlargement)


def bin_pixel_rects(boxes: np.ndarray, bins: np.ndarray, width: int, height: int,
                    enlargement: float = DEFAULT_ENLARGEMENT) -> np.ndarray:
    """Integer pixel rectangles ``(n, m, 4)`` of ``bins`` inside each enlarged box, clipped to the image.

    Edges are rounded to the nearest integer; empty bins come out with
    ``x1 <= x0`` or ``y1 <= y0``.
    """
    big = enlarge_boxes(boxes, enlargement)
    ox, oy, w, h = (big[:, i:i + 1] for i in range(4))
    x0 = ox + bins[None, :, 0] * w
    y0 = oy + bins[None, :, 1] * h
    x1 = ox + bins[None, :, 2] * w
    y1 = oy + bins[None, :, 3] * h
    rects = np.stack([x0, y0, x1, y1], axis=-1)
    # round-half-up keeps snapping independent of numpy's banker's rounding
    rects = np.floor(rects + 0.5).astype(np.intp)
    rects[..., 0::2] = np.clip(rects[..., 0::2], 0, width)
    rects[..., 1::2] = np.clip(rects[..., 1::2], 0, height)
    return rects


def pool_bins(boxes: np.ndarray, integrals: OrientationIntegrals, bank: BevBank) -> np.ndarray:
    """Raw orientation sums, shape ``(n, n_active_bins, 4)``; no normalization."""
    boxes = as_box_array(boxes)
    bins = bank.bins[bank.active_bins]
    rects = bin_pixel_rects(boxes, bins, integrals.width, integrals.height, bank.enlargement)
    x0, y0, x1, y1 = (rects[..., i] for i in range(4))
    empty = (x1 <= x0) | (y1 <= y0)
    ii = integrals.integrals
    sums = ii[:, y1, x1] - ii[:, y0, x1] - ii[:, y1, x0] + ii[:, y0, x0]
    sums = np.moveaxis(sums, 0, -1)
    sums[empty] = 0.0
    return sums


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def extract_bev_batch(boxes, integrals: OrientationIntegrals, bank: BevBank) -> np.ndarray:
    sums = pool_bins(boxes, integrals, bank)
    return l2_normalize_rows(sums.reshape(len(sums), -1))


def extract_bev(box: BoundingBox, integrals: OrientationIntegrals, bank: BevBank) -> np.ndarray:
    """Unit-norm BEV descriptor of one box (all zeros if nothing pools)."""
    return extract_bev_batch([box], integrals, bank)[0]
