"""Cascaded sparse-spatial-bin object proposals."""
from .cascade import CascadeProposer, propose, stage_one, stage_two, train_cascade
from .evaluation import average_recall, curve_sweep, oracle_match, recall_at
from .geometry import ArnmsConfig, BoundingBox, ScoredBox, arnms, greedy_nms, iou
from .sparse_svm import BinSelector, GroupLassoSVM, LinearSVM

__version__ = "0.1.0"

__all__ = [
    "ArnmsConfig", "BinSelector", "BoundingBox", "CascadeProposer", "GroupLassoSVM", "LinearSVM",
    "ScoredBox", "arnms", "average_recall", "curve_sweep", "greedy_nms", "iou", "oracle_match",
    "propose", "recall_at", "stage_one", "stage_two", "train_cascade",
]
