"""Overlap-recall curves and average recall under the best-overlap oracle."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import as_box_array, iou_matrix

CURVE_STEP = 0.005
DEFAULT_BUDGETS = (10, 100, 1000)


@dataclass
class MatchResult:
    best_iou: np.ndarray
    matched: np.ndarray  # proposal index per GT, -1 when there are no proposals

    def __len__(self):
        return len(self.best_iou)


@dataclass
class RecallCurve:
    thresholds: np.ndarray
    recall: np.ndarray
    ar: float


def threshold_grid(step: float = CURVE_STEP) -> np.ndarray:
    n = int(round(0.5 / step))
    return np.linspace(0.5, 1.0, n + 1)


def oracle_match(gt, proposals) -> MatchResult:
    """Best-overlapping proposal for every GT box, each GT matched independently."""
    gt = as_box_array(gt)
    proposals = as_box_array(proposals)
    if len(proposals) == 0 or len(gt) == 0:
        return MatchResult(np.zeros(len(gt)), np.full(len(gt), -1, dtype=np.intp))
    ious = iou_matrix(gt, proposals)
    idx = ious.argmax(axis=1)
    return MatchResult(ious[np.arange(len(gt)), idx], idx)


def merge_matches(matches: Sequence[MatchResult]) -> MatchResult:
    matches = [m for m in matches if len(m)]
    if not matches:
        return MatchResult(np.zeros(0), np.zeros(0, dtype=np.intp))
    return MatchResult(np.concatenate([m.best_iou for m in matches]),
                       np.concatenate([m.matched for m in matches]))


def recall_at(match: MatchResult, t: float) -> float:
    if len(match) == 0:
        raise ValueError("recall is undefined without ground truth")
    return float(np.mean(match.best_iou >= t))


def average_recall(match: MatchResult) -> float:
    """Area under recall-vs-IoU on [0.5, 1], scaled to [0, 1]."""
    if len(match) == 0:
        raise ValueError("average recall is undefined without ground truth")
    return float(2.0 * np.mean(np.maximum(0.0, match.best_iou - 0.5)))


def recall_curve(match: MatchResult, step: float = CURVE_STEP) -> RecallCurve:
    grid = threshold_grid(step)
    recall = (match.best_iou[None, :] >= grid[:, None]).mean(axis=1)
    return RecallCurve(grid, recall, average_recall(match))


def curve_sweep(gt: Mapping, ranked_proposals: Mapping, budgets=DEFAULT_BUDGETS,
                step: float = CURVE_STEP) -> dict:
    """Recall curves for the first ``n`` proposals of every image, per budget ``n``.

    ``gt`` and ``ranked_proposals`` map image ids to box sequences; images
    without GT are skipped.
    """
    image_ids = sorted(k for k, v in gt.items() if len(as_box_array(v)))
    if not image_ids:
        raise ValueError("no image carries ground truth")
    curves = {}
    for n in budgets:
        per_image = []
        for image_id in image_ids:
            props = as_box_array(ranked_proposals.get(image_id, np.zeros((0, 4))))[:n]
            per_image.append(oracle_match(gt[image_id], props))
        curves[n] = recall_curve(merge_matches(per_image), step)
    return curves


def write_curve_csv(path, curve: RecallCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "recall"])
        for t, r in zip(curve.thresholds, curve.recall):
            writer.writerow([f"{t:.3f}", f"{r:.6f}"])


def write_report(out_dir, curves: Mapping, method: str = "sspb") -> dict:
    """Write one CSV per budget plus ``ar_summary_<method>.json``; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for n, curve in curves.items():
        write_curve_csv(out_dir / f"curve_{method}_{n}.csv", curve)
    summary = {str(n): curve.ar for n, curve in curves.items()}
    with open(out_dir / f"ar_summary_{method}.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary
