"""Two-stage proposal cascade: sample assembly, training and inference.

Stage one keeps the best EdgeBoxes-scored candidates, rescores them with a
linear model over a few SPP bins plus the EB score and prunes with ARNMS.
Stage two rescores the survivors with selected BEV and SPP bins plus the EB
score and runs the final suppression for the requested budget.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data_io import Candidates, GroundTruth, ImageBundle, read_model, write_model
from .edge_bev import (DEFAULT_ENLARGEMENT, DEFAULT_STRIPE_FRACTIONS, N_ORIENTATIONS, BevBank,
                       OrientationIntegrals, build_bev_bank, extract_bev_batch,
                       quantize_orientations)
from .geometry import ArnmsConfig, ScoredBox, BoundingBox, arnms_indices, iou_matrix, nms_indices, score_order
from .sparse_svm import (BinSelection, GroupStructure, LinearModel, TrainConfig,
                         select_regularizer_for_count, strip_and_renormalize,
                         train_group_lasso_svm, train_l2_svm)
from .spp import DEFAULT_GRID_SIZES, FeatureMap, SppBank, build_spp_bank, extract_spp_batch

logger = logging.getLogger(__name__)

POOL_CAP = 30000
STAGE_ONE_OUTPUT = 10000
ARNMS_THRESHOLDS = (1.0, 0.7, 0.5)
SSPB60_THRESHOLD = 0.6


# ---------------------------------------------------------------- training samples

@dataclass
class SampleSpec:
    neg_iou_max: float = 0.3
    vicinity_fraction: float = 0.5
    neg_to_pos_ratio: float = 0.5
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        for name in ("neg_iou_max", "vicinity_fraction", "neg_to_pos_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class SampleSet:
    image_ids: list
    boxes: np.ndarray

    def __len__(self):
        return len(self.image_ids)


def _gt_boxes(gt) -> np.ndarray:
    return gt.boxes if isinstance(gt, GroundTruth) else np.asarray(gt, dtype=np.float64).reshape(-1, 4)


def _valid_negative(box, gt_boxes, W, H, iou_max):
    x, y, w, h = box
    if w < 2 or h < 2 or x < 0 or y < 0 or x + w > W or y + h > H:
        return False
    return len(gt_boxes) == 0 or iou_matrix(box[None, :], gt_boxes).max() <= iou_max


def assemble_training_samples(groundtruth: Mapping, image_sizes: Mapping,
                              spec: SampleSpec | None = None) -> tuple[SampleSet, SampleSet]:
    """Positives are all GT boxes; negatives number ``ceil(ratio * positives)``.

    A ``vicinity_fraction`` share of the negatives are GT boxes jittered
    (center shift up to half the box size, per-axis scale in [0.5, 2]); the
    rest are uniform boxes in a random image.  Every negative overlaps each
    GT of its image by at most ``neg_iou_max``.
    """
    spec = spec or SampleSpec()
    rng = np.random.default_rng(spec.seed)
    image_ids = sorted(groundtruth)
    pos_ids, pos_boxes = [], []
    for image_id in image_ids:
        for box in _gt_boxes(groundtruth[image_id]):
            pos_ids.append(image_id)
            pos_boxes.append(box)
    if not pos_ids:
        raise ValueError("training needs at least one ground-truth box")
    pos_boxes = np.asarray(pos_boxes, dtype=np.float64)

    n_neg = math.ceil(spec.neg_to_pos_ratio * len(pos_ids))
    n_vicinity = math.ceil(spec.vicinity_fraction * n_neg)
    anchors = np.linspace(0, len(pos_ids) - 1, n_vicinity).round().astype(int) if n_vicinity else []

    neg_ids, neg_boxes = [], []
    for anchor in anchors:
        image_id = pos_ids[anchor]
        gx, gy, gw, gh = pos_boxes[anchor]
        W, H = image_sizes[image_id]
        gts = _gt_boxes(groundtruth[image_id])
        for _ in range(spec.max_attempts):
            cx = gx + gw / 2 + rng.uniform(-0.5, 0.5) * gw
            cy = gy + gh / 2 + rng.uniform(-0.5, 0.5) * gh
            w = gw * rng.uniform(0.5, 2.0)
            h = gh * rng.uniform(0.5, 2.0)
            x0, y0 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
            box = np.array([x0, y0, min(W, cx + w / 2) - x0, min(H, cy + h / 2) - y0])
            if _valid_negative(box, gts, W, H, spec.neg_iou_max):
                neg_ids.append(image_id)
                neg_boxes.append(box)
                break
        else:
            warnings.warn(f"image {image_id}: no vicinity negative after {spec.max_attempts} attempts")

    for _ in range(n_neg - n_vicinity):
        image_id = image_ids[rng.integers(len(image_ids))]
        W, H = image_sizes[image_id]
        gts = _gt_boxes(groundtruth[image_id])
        for _ in range(spec.max_attempts):
            w = rng.uniform(0.1, 1.0) * W
            h = rng.uniform(0.1, 1.0) * H
            box = np.array([rng.uniform(0, W - w), rng.uniform(0, H - h), w, h])
            if _valid_negative(box, gts, W, H, spec.neg_iou_max):
                neg_ids.append(image_id)
                neg_boxes.append(box)
                break
        else:
            warnings.warn(f"image {image_id}: too crowded for a uniform negative, skipped")

    return (SampleSet(pos_ids, pos_boxes),
            SampleSet(neg_ids, np.asarray(neg_boxes, dtype=np.float64).reshape(-1, 4)))


def lookup_eb_scores(boxes: np.ndarray, cands: Candidates) -> np.ndarray:
    """EB score of the best-overlapping candidate for each box (0 without candidates)."""
    if len(cands) == 0 or len(boxes) == 0:
        return np.zeros(len(boxes))
    return cands.eb_scores[iou_matrix(boxes, cands.boxes).argmax(axis=1)]


# ---------------------------------------------------------------- models

@dataclass
class StageOneModel:
    model: LinearModel
    spp_selection: BinSelection
    pool_cap: int = POOL_CAP
    output_cap: int = STAGE_ONE_OUTPUT

    def __post_init__(self):
        if self.pool_cap < 1 or self.output_cap < 1:
            raise ValueError("stage caps must be positive")
        if len(self.spp_selection) == 0:
            raise ValueError("stage one needs at least one SPP bin")


@dataclass
class StageTwoModel:
    model: LinearModel
    bev_selection: BinSelection
    spp_selection: BinSelection


@dataclass
class RankedBoxes:
    """Boxes in emission order with their scores and index into the input candidates."""

    boxes: np.ndarray
    scores: np.ndarray
    eb_scores: np.ndarray
    source: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def to_scored_boxes(self) -> list[ScoredBox]:
        return [ScoredBox(BoundingBox(*map(float, b)), float(s)) for b, s in zip(self.boxes, self.scores)]

    def take(self, idx, scores=None) -> "RankedBoxes":
        idx = np.asarray(idx, dtype=np.intp)
        return RankedBoxes(self.boxes[idx], self.scores[idx] if scores is None else scores[idx],
                           self.eb_scores[idx], self.source[idx])

    @classmethod
    def from_candidates(cls, cands: Candidates) -> "RankedBoxes":
        return cls(np.asarray(cands.boxes, dtype=np.float64), np.asarray(cands.eb_scores, dtype=np.float64),
                   np.asarray(cands.eb_scores, dtype=np.float64), np.arange(len(cands)))


def stage_one_descriptors(boxes, eb, fm: FeatureMap, spp_bank: SppBank, selection: BinSelection):
    spp = extract_spp_batch(boxes, fm, spp_bank.with_selection(selection.kept))
    return np.hstack([spp, np.asarray(eb, dtype=np.float64)[:, None]])


def stage_two_descriptors(boxes, eb, fm: FeatureMap, integrals: OrientationIntegrals,
                          bev_bank: BevBank, spp_bank: SppBank, m: StageTwoModel):
    parts = []
    if len(m.bev_selection):
        parts.append(extract_bev_batch(boxes, integrals, bev_bank.with_selection(m.bev_selection.kept)))
    if len(m.spp_selection):
        parts.append(extract_spp_batch(boxes, fm, spp_bank.with_selection(m.spp_selection.kept)))
    parts.append(np.asarray(eb, dtype=np.float64)[:, None])
    return np.hstack(parts)


def _as_ranked(candidates) -> RankedBoxes:
    if isinstance(candidates, RankedBoxes):
        return candidates
    if isinstance(candidates, Candidates):
        return RankedBoxes.from_candidates(candidates)
    # list of ScoredBox whose score is the EB score
    boxes = np.asarray([[b.box.x, b.box.y, b.box.w, b.box.h] for b in candidates], dtype=np.float64)
    eb = np.asarray([b.score for b in candidates], dtype=np.float64)
    return RankedBoxes(boxes.reshape(-1, 4), eb, eb, np.arange(len(eb)))


def stage_one(candidates, fm: FeatureMap, m: StageOneModel, spp_bank: SppBank | None = None,
              thresholds=ARNMS_THRESHOLDS) -> RankedBoxes:
    """Truncate to the ``pool_cap`` best EB scores, rescore, ARNMS down to ``output_cap``."""
    cands = _as_ranked(candidates)
    if len(cands) == 0:
        return cands
    spp_bank = spp_bank or build_spp_bank()
    pool = cands.take(score_order(cands.eb_scores)[: m.pool_cap], scores=cands.eb_scores)
    X = stage_one_descriptors(pool.boxes, pool.eb_scores, fm, spp_bank, m.spp_selection)
    scores = m.model.decision_function(X)
    keep = arnms_indices(pool.boxes, scores, ArnmsConfig(thresholds, m.output_cap))
    return pool.take(keep, scores=scores)


def stage_two(boxes, fm: FeatureMap, integrals: OrientationIntegrals, bev_bank: BevBank,
              spp_bank: SppBank, m: StageTwoModel, n: int, final_nms: str = "arnms",
              thresholds=ARNMS_THRESHOLDS, greedy_threshold: float = SSPB60_THRESHOLD) -> RankedBoxes:
    """Rescore with the full descriptor and emit at most ``n`` boxes."""
    ranked = _as_ranked(boxes)
    if len(ranked) == 0:
        return ranked
    X = stage_two_descriptors(ranked.boxes, ranked.eb_scores, fm, integrals, bev_bank, spp_bank, m)
    scores = m.model.decision_function(X)
    if final_nms == "arnms":
        keep = arnms_indices(ranked.boxes, scores, ArnmsConfig(thresholds, n))
    elif final_nms == "greedy":
        keep = nms_indices(ranked.boxes, scores, greedy_threshold)[:n]
    else:
        raise ValueError(f"unknown final NMS {final_nms!r}")
    return ranked.take(keep, scores=scores)


def propose(bundle: ImageBundle, models: tuple, n: int, final_nms: str = "arnms",
            greedy_threshold: float = SSPB60_THRESHOLD, bev_bank: BevBank | None = None,
            spp_bank: SppBank | None = None, thresholds=ARNMS_THRESHOLDS) -> RankedBoxes:
    """Run both stages on one image; ``final_nms='greedy'`` with 0.6 is the SSPB60 variant."""
    for name in ("candidates", "feature_map", "edge_map"):
        if getattr(bundle, name, None) is None:
            raise ValueError(f"image {bundle.image_id}: bundle is missing {name}")
    s1, s2 = models
    bev_bank = bev_bank or build_bev_bank()
    spp_bank = spp_bank or build_spp_bank()
    integrals = quantize_orientations(bundle.edge_map)
    first = stage_one(bundle.candidates, bundle.feature_map, s1, spp_bank, thresholds)
    return stage_two(first, bundle.feature_map, integrals, bev_bank, spp_bank, s2, n,
                     final_nms, thresholds, greedy_threshold)


# ---------------------------------------------------------------- training

@dataclass
class CascadeTrainConfig:
    spp1_bins: int = 3
    spp2_bins: int = 43
    bev_bins: int = 311
    C: float = 1.0
    lam: float | None = None
    solver: TrainConfig = field(default_factory=lambda: TrainConfig(tol=1e-6, max_epochs=2000))
    samples: SampleSpec = field(default_factory=SampleSpec)
    threads: int = 1


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def training_descriptors(bundles: Sequence[ImageBundle], samples: Sequence[SampleSet],
                         bev_bank: BevBank, spp_bank: SppBank, threads: int = 1):
    """Full-bank BEV and SPP descriptors plus looked-up EB scores, in sample order."""
    by_id = {b.image_id: b for b in bundles}
    ids = [i for s in samples for i in s.image_ids]
    boxes = np.concatenate([s.boxes for s in samples], axis=0)
    order = sorted(set(ids))

    def per_image(image_id):
        rows = np.flatnonzero(np.asarray(ids) == image_id)
        bundle = by_id[image_id]
        integrals = quantize_orientations(bundle.edge_map)
        b = boxes[rows]
        return (rows, extract_bev_batch(b, integrals, bev_bank),
                extract_spp_batch(b, bundle.feature_map, spp_bank),
                lookup_eb_scores(b, bundle.candidates))

    results = _map(per_image, order, threads)
    n = len(ids)
    X_bev = np.zeros((n, bev_bank.descriptor_length))
    channels = bundles[0].feature_map.channels
    X_spp = np.zeros((n, spp_bank.descriptor_length(channels)))
    eb = np.zeros(n)
    for rows, bev, spp, e in results:
        X_bev[rows], X_spp[rows], eb[rows] = bev, spp, e
    return X_bev, X_spp, eb


def _select(X, y, groups, target, cfg: CascadeTrainConfig, what: str) -> BinSelection:
    if cfg.lam is not None:
        _, sel = train_group_lasso_svm(X, y, groups, replace(cfg.solver, lam=cfg.lam))
        if cfg.lam == 0:
            warnings.warn(f"{what}: lambda=0 disables bin selection; {len(sel)} bins retained")
    else:
        _, sel = select_regularizer_for_count(X, y, groups, target, cfg.solver, truncate=True)
    logger.info("%s: %d of %d bins selected (lambda=%.4g)", what, len(sel), groups.n_groups, sel.strength)
    if len(sel) == 0:
        raise ValueError(f"{what}: selection removed every bin; lower lambda")
    return sel


def train_cascade(bundles: Sequence[ImageBundle], cfg: CascadeTrainConfig | None = None,
                  bev_bank: BevBank | None = None, spp_bank: SppBank | None = None):
    """Fit both stages on GT positives and sampled negatives; returns ``(StageOneModel, StageTwoModel)``."""
    cfg = cfg or CascadeTrainConfig()
    bev_bank = bev_bank or build_bev_bank()
    spp_bank = spp_bank or build_spp_bank()
    gt = {b.image_id: b.gt for b in bundles if b.gt is not None and len(b.gt)}
    if not gt:
        raise ValueError("training needs at least one image with ground truth")
    sizes = {b.image_id: (b.feature_map.image_width, b.feature_map.image_height) for b in bundles}
    pos, neg = assemble_training_samples(gt, sizes, cfg.samples)
    logger.info("training on %d positives and %d negatives", len(pos), len(neg))
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    X_bev, X_spp, eb = training_descriptors(bundles, [pos, neg], bev_bank, spp_bank, cfg.threads)

    channels = bundles[0].feature_map.channels
    spp_groups = GroupStructure.uniform(spp_bank.n_bins, channels)
    bev_groups = GroupStructure.uniform(bev_bank.n_bins, N_ORIENTATIONS)
    svm_cfg = replace(cfg.solver, C=cfg.C, tol=1e-4)

    spp1 = _select(X_spp, y, spp_groups, cfg.spp1_bins, cfg, "stage-1 SPP")
    X1 = np.hstack([strip_and_renormalize(X_spp, spp_groups, spp1), eb[:, None]])
    m1 = train_l2_svm(X1, y, svm_cfg)
    m1.groups = GroupStructure.concat(spp_groups.subset(spp1.kept), GroupStructure.uniform(1, 1, block=1))

    spp2 = _select(X_spp, y, spp_groups, cfg.spp2_bins, cfg, "stage-2 SPP")
    bev = _select(X_bev, y, bev_groups, cfg.bev_bins, cfg, "stage-2 BEV")
    X2 = np.hstack([strip_and_renormalize(X_bev, bev_groups, bev),
                    strip_and_renormalize(X_spp, spp_groups, spp2), eb[:, None]])
    m2 = train_l2_svm(X2, y, svm_cfg)
    m2.groups = GroupStructure.concat(GroupStructure.uniform(len(bev), N_ORIENTATIONS, block=0),
                                      GroupStructure.uniform(len(spp2), channels, block=1),
                                      GroupStructure.uniform(1, 1, block=2))
    return StageOneModel(m1, spp1), StageTwoModel(m2, bev, spp2)


# ---------------------------------------------------------------- persistence

# Model files index bins in one space: BEV bins first, SPP bins offset by the BEV bank size.

def save_models(out_dir, s1: StageOneModel, s2: StageTwoModel, n_bev_bins: int) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    p1, p2 = out_dir / "stage1.sspb", out_dir / "stage2.sspb"
    write_model(p1, s1.model, BinSelection(s1.spp_selection.kept + n_bev_bins))
    write_model(p2, s2.model, BinSelection(np.concatenate([s2.bev_selection.kept,
                                                           s2.spp_selection.kept + n_bev_bins])))
    return p1, p2


def load_models(stage1_path, stage2_path, n_bev_bins: int, pool_cap: int = POOL_CAP,
                output_cap: int = STAGE_ONE_OUTPUT) -> tuple[StageOneModel, StageTwoModel]:
    m1, sel1 = read_model(stage1_path)
    m2, sel2 = read_model(stage2_path)
    if np.any(sel1.kept < n_bev_bins):
        raise ValueError(f"{stage1_path}: stage-one model refers to BEV bins")
    s1 = StageOneModel(m1, BinSelection(sel1.kept - n_bev_bins), pool_cap, output_cap)
    bev = sel2.kept[sel2.kept < n_bev_bins]
    spp = sel2.kept[sel2.kept >= n_bev_bins] - n_bev_bins
    return s1, StageTwoModel(m2, BinSelection(bev), BinSelection(spp))


# ---------------------------------------------------------------- estimator

class CascadeProposer(BaseEstimator):
    """Trainable two-stage proposal ranker.

    ``fit`` takes image bundles carrying GT; ``predict`` returns the ranked
    proposals of one bundle and ``predict_many`` those of several, in input
    order.  ``variant='sspb60'`` swaps the final ARNMS for greedy NMS at
    ``greedy_threshold``.
    """

    def __init__(self, n_proposals=100, variant="sspb", spp1_bins=3, spp2_bins=43, bev_bins=311,
                 C=1.0, lam=None, arnms_thresholds=ARNMS_THRESHOLDS, greedy_threshold=SSPB60_THRESHOLD,
                 pool_cap=POOL_CAP, output_cap=STAGE_ONE_OUTPUT,
                 stripe_fractions=DEFAULT_STRIPE_FRACTIONS, grid_sizes=DEFAULT_GRID_SIZES,
                 enlargement=DEFAULT_ENLARGEMENT, solver_tol=1e-6, max_iter=2000,
                 random_state=0, n_jobs=1):
        self.n_proposals = n_proposals
        self.variant = variant
        self.spp1_bins = spp1_bins
        self.spp2_bins = spp2_bins
        self.bev_bins = bev_bins
        self.C = C
        self.lam = lam
        self.arnms_thresholds = arnms_thresholds
        self.greedy_threshold = greedy_threshold
        self.pool_cap = pool_cap
        self.output_cap = output_cap
        self.stripe_fractions = stripe_fractions
        self.grid_sizes = grid_sizes
        self.enlargement = enlargement
        self.solver_tol = solver_tol
        self.max_iter = max_iter
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _banks(self):
        return (build_bev_bank(self.stripe_fractions, enlargement=self.enlargement),
                build_spp_bank(self.grid_sizes))

    def _final_nms(self):
        if self.variant not in ("sspb", "sspb60"):
            raise ValueError(f"unknown variant {self.variant!r}")
        return "arnms" if self.variant == "sspb" else "greedy"

    def fit(self, bundles, y=None):
        bev_bank, spp_bank = self._banks()
        cfg = CascadeTrainConfig(
            spp1_bins=self.spp1_bins, spp2_bins=self.spp2_bins, bev_bins=self.bev_bins, C=self.C,
            lam=self.lam, solver=TrainConfig(tol=self.solver_tol, max_epochs=self.max_iter,
                                             seed=self.random_state),
            samples=SampleSpec(seed=self.random_state), threads=self.n_jobs)
        s1, s2 = train_cascade(list(bundles), cfg, bev_bank, spp_bank)
        self.stage_one_ = replace(s1, pool_cap=self.pool_cap, output_cap=self.output_cap)
        self.stage_two_ = s2
        return self

    def predict(self, bundle: ImageBundle) -> RankedBoxes:
        check_is_fitted(self, "stage_two_")
        bev_bank, spp_bank = self._banks()
        return propose(bundle, (self.stage_one_, self.stage_two_), self.n_proposals,
                       self._final_nms(), self.greedy_threshold, bev_bank, spp_bank,
                       tuple(self.arnms_thresholds))

    def predict_many(self, bundles) -> list[RankedBoxes]:
        return _map(self.predict, list(bundles), self.n_jobs)

    def save(self, out_dir) -> tuple[Path, Path]:
        check_is_fitted(self, "stage_two_")
        return save_models(out_dir, self.stage_one_, self.stage_two_, self._banks()[0].n_bins)

    def load(self, stage1_path, stage2_path) -> "CascadeProposer":
        self.stage_one_, self.stage_two_ = load_models(
            stage1_path, stage2_path, self._banks()[0].n_bins, self.pool_cap, self.output_cap)
        return self
