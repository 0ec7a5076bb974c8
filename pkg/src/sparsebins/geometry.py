"""Box arithmetic, IoU and the suppression procedures used to rank proposals.

Boxes are ``(x, y, w, h)`` in continuous pixel coordinates.  Array helpers
operate on ``(n, 4)`` float arrays; the :class:`BoundingBox` /
:class:`ScoredBox` dataclasses are the list-level API built on top of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive extent, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class ArnmsConfig:
    """Stage thresholds and output budget for :func:`arnms`."""

    thresholds: tuple = (1.0, 0.7, 0.5)
    output_size: int = 100
    stages: int = field(default=None)

    def __post_init__(self):
        thresholds = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", thresholds)
        if self.stages is None:
            object.__setattr__(self, "stages", len(thresholds))
        if self.stages < 1 or self.stages != len(thresholds):
            raise ValueError(
                f"need one threshold per stage: stages={self.stages}, "
                f"thresholds={thresholds}")
        if any(not 0.0 < t <= 1.0 for t in thresholds):
            raise ValueError(f"thresholds must lie in (0, 1], got {thresholds}")
        if any(b >= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"thresholds must be strictly decreasing, got {thresholds}")
        if self.output_size < 1:
            raise ValueError(f"output_size must be >= 1, got {self.output_size}")


def as_box_array(boxes) -> np.ndarray:
    """Coerce boxes (dataclasses, tuples or an array) to an ``(n, 4)`` array."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        rows = []
        for b in boxes:
            if isinstance(b, ScoredBox):
                b = b.box
            if isinstance(b, BoundingBox):
                rows.append((b.x, b.y, b.w, b.h))
            else:
                rows.append(tuple(b))
        arr = np.asarray(rows, dtype=np.float64)
    return arr.reshape(-1, 4)


def _edges(boxes: np.ndarray):
    return boxes[:, 0], boxes[:, 1], boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_matrix([a], [b])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape ``(len(a), len(b))``.

    Areas come from the same edge coordinates as the intersection, so a box
    compared with itself scores exactly 1.
    """
    ax0, ay0, ax1, ay1 = (v[:, None] for v in _edges(as_box_array(a)))
    bx0, by0, bx1, by1 = (v[None, :] for v in _edges(as_box_array(b)))
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return np.minimum(inter / union, 1.0)


def _iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    return iou_matrix(box[None, :], others)[0]


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float,
                candidates: np.ndarray | None = None) -> np.ndarray:
    """Greedy NMS over ``boxes`` returning kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``threshold``.  ``candidates`` restricts the run to a subset
    of indices.
    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if candidates is None:
        candidates = np.arange(len(boxes))
    candidates = np.asarray(candidates, dtype=np.intp)
    order = candidates[score_order(scores[candidates])]
    if threshold >= 1.0 or len(order) == 0:
        return order

    kept = []
    alive = np.ones(len(order), dtype=bool)
    ordered_boxes = boxes[order]
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(order[pos])
        rest = np.flatnonzero(alive[pos + 1:]) + pos + 1
        if len(rest):
            overlaps = _iou_one_to_many(ordered_boxes[pos], ordered_boxes[rest])
            alive[rest[overlaps > threshold]] = False
    return np.asarray(kept, dtype=np.intp)


def arnms_indices(boxes: np.ndarray, scores: np.ndarray, cfg: ArnmsConfig) -> np.ndarray:
    """Multi-stage NMS; returns emitted indices in emission order.

    Stage ``s`` runs greedy NMS at ``cfg.thresholds[s]`` on every box not yet
    emitted and emits the best survivors up to that stage's quota.  Boxes
    suppressed in one stage stay in the pool for the next.  A stage that
    cannot fill its quota passes the shortfall on to the following stage.
    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    n_out, n_stages = cfg.output_size, cfg.stages
    base = n_out // n_stages
    quotas = [base] * (n_stages - 1) + [n_out - (n_stages - 1) * base]

    in_pool = np.ones(len(boxes), dtype=bool)
    emitted = []
    owed = 0
    for threshold, quota in zip(cfg.thresholds, quotas):
        quota += owed
        pool = np.flatnonzero(in_pool)
        if quota == 0 or len(pool) == 0:
            owed = quota
            continue
        survivors = nms_indices(boxes, scores, threshold, candidates=pool)[:quota]
        emitted.extend(survivors.tolist())
        in_pool[survivors] = False
        owed = quota - len(survivors)
    return np.asarray(emitted, dtype=np.intp)


def _unpack(boxes: Sequence[ScoredBox]):
    arr = as_box_array([b.box for b in boxes])
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    return arr, scores


def greedy_nms(boxes: Sequence[ScoredBox], threshold: float) -> list[ScoredBox]:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if not boxes:
        return []
    arr, scores = _unpack(boxes)
    return [boxes[i] for i in nms_indices(arr, scores, threshold)]


def arnms(boxes: Sequence[ScoredBox], cfg: ArnmsConfig) -> list[ScoredBox]:
    if not boxes:
        return []
    arr, scores = _unpack(boxes)
    return [boxes[i] for i in arnms_indices(arr, scores, cfg)]
