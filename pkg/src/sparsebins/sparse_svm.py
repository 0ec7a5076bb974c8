"""Linear SVM training and group-lasso spatial-bin selection.

Two solvers live here:

* :func:`train_l2_svm` -- dual coordinate descent on the hinge-loss SVM
  ``1/2 ||w||^2 + C * sum(hinge)``.  The bias is learned as the weight of a
  constant feature (``intercept_scaling``), as liblinear does.
* :func:`train_group_lasso_svm` -- monotone FISTA on a quadratically smoothed
  hinge loss plus ``lambda * sum_b ||w_b||``.  The bias is not penalized.
  Groups whose weights are driven to zero identify spatial bins that can be
  skipped at extraction time.

Both have thin scikit-learn wrappers (:class:`LinearSVM`,
:class:`GroupLassoSVM`, :class:`BinSelector`).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

logger = logging.getLogger(__name__)

ZERO_GROUP_NORM = 1e-10


@dataclass
class GroupStructure:
    """Contiguous ``(offset, length)`` spans covering a descriptor.

    ``blocks`` tags each group with a feature type so that renormalization
    after stripping can be done per type.
    """

    offsets: np.ndarray
    lengths: np.ndarray
    blocks: np.ndarray | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.intp)
        self.lengths = np.asarray(self.lengths, dtype=np.intp)
        if self.offsets.shape != self.lengths.shape:
            raise ValueError("offsets and lengths must have the same length")
        if np.any(self.lengths <= 0):
            raise ValueError("group lengths must be positive")
        expected = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]) if len(self.lengths) else self.offsets
        if not np.array_equal(self.offsets, expected):
            raise ValueError("groups must be contiguous, ordered and start at 0")
        if self.blocks is None:
            self.blocks = np.zeros(len(self.lengths), dtype=np.intp)
        self.blocks = np.asarray(self.blocks, dtype=np.intp)

    @classmethod
    def from_lengths(cls, lengths, blocks=None) -> "GroupStructure":
        lengths = np.asarray(lengths, dtype=np.intp)
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]) if len(lengths) else lengths
        return cls(offsets, lengths, blocks)

    @classmethod
    def uniform(cls, n_groups: int, size: int, block: int = 0) -> "GroupStructure":
        return cls.from_lengths([size] * n_groups, [block] * n_groups)

    @classmethod
    def concat(cls, *parts: "GroupStructure") -> "GroupStructure":
        return cls.from_lengths(np.concatenate([p.lengths for p in parts]),
                                np.concatenate([p.blocks for p in parts]))

    @property
    def n_groups(self) -> int:
        return len(self.lengths)

    @property
    def dim(self) -> int:
        return int(self.lengths.sum())

    def group_ids(self) -> np.ndarray:
        """Group index of every descriptor dimension."""
        return np.repeat(np.arange(self.n_groups), self.lengths)

    def norms(self, w: np.ndarray) -> np.ndarray:
        sq = np.bincount(self.group_ids(), weights=np.asarray(w, dtype=np.float64) ** 2,
                         minlength=self.n_groups)
        return np.sqrt(sq)

    def dims_of(self, groups) -> np.ndarray:
        groups = np.asarray(groups, dtype=np.intp)
        if len(groups) == 0:
            return np.zeros(0, dtype=np.intp)
        return np.concatenate([np.arange(self.offsets[g], self.offsets[g] + self.lengths[g])
                               for g in groups])

    def subset(self, groups) -> "GroupStructure":
        groups = np.asarray(groups, dtype=np.intp)
        return GroupStructure.from_lengths(self.lengths[groups], self.blocks[groups])


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    groups: GroupStructure | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = float(self.bias)
        if self.groups is None:
            self.groups = GroupStructure.uniform(len(self.weights), 1)
        if self.groups.dim != len(self.weights):
            raise ValueError(f"group table covers {self.groups.dim} dims, model has {len(self.weights)}")

    @property
    def dim(self) -> int:
        return len(self.weights)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise ValueError(f"descriptor has {X.shape[-1]} dims, model expects {self.dim}")
        return X @ self.weights + self.bias


@dataclass
class BinSelection:
    kept: np.ndarray
    strength: float = 0.0
    converged: bool = True

    def __post_init__(self):
        self.kept = np.unique(np.asarray(self.kept, dtype=np.intp))

    def __len__(self):
        return len(self.kept)


@dataclass
class TrainConfig:
    C: float = 1.0
    lam: float = 0.0
    max_epochs: int = 1000
    tol: float = 1e-6
    seed: int = 0
    smoothing: float = 0.5
    intercept_scaling: float = 1.0

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.tol <= 0 or self.smoothing <= 0:
            raise ValueError("tol and smoothing must be positive")


def score(model: LinearModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"descriptor has shape {x.shape}, model expects ({model.dim},)")
    return float(np.dot(model.weights, x) + model.bias)


def _as_signed_labels(y) -> np.ndarray:
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) != 2:
        raise ValueError(f"need examples of exactly two classes, got {classes.tolist()}")
    if set(classes.tolist()) <= {-1, 1}:
        return y.astype(np.float64)
    return np.where(y == classes[1], 1.0, -1.0)


# ---------------------------------------------------------------- l2 SVM

def train_l2_svm(X, y, cfg: TrainConfig | None = None) -> LinearModel:
    model, _ = _dual_cd(X, y, cfg or TrainConfig())
    return model


def _dual_cd(X, y, cfg: TrainConfig):
    X = np.asarray(X, dtype=np.float64)
    y = _as_signed_labels(y)
    n, d = X.shape
    s = cfg.intercept_scaling
    Xa = np.hstack([X, np.full((n, 1), s)])
    q = np.einsum("ij,ij->i", Xa, Xa)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.max_epochs):
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            g = y[i] * Xa[i].dot(w) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == cfg.C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max, pg_min = max(pg_max, pg), min(pg_min, pg)
            if pg != 0.0 and q[i] > 0:
                new = min(max(a - g / q[i], 0.0), cfg.C)
                w += (new - a) * y[i] * Xa[i]
                alpha[i] = new
        history.append(alpha.sum() - 0.5 * w.dot(w))
        if pg_max - pg_min < cfg.tol:
            break
    else:
        warnings.warn(f"dual coordinate descent stopped after {cfg.max_epochs} epochs",
                      ConvergenceWarning)
    model = LinearModel(w[:d], w[d] * s)
    return model, np.asarray(history)


def l2_svm_objective(model: LinearModel, X, y, C: float, intercept_scaling: float = 1.0) -> float:
    y = _as_signed_labels(y)
    margins = y * model.decision_function(X)
    b = model.bias / intercept_scaling
    return 0.5 * (model.weights.dot(model.weights) + b * b) + C * np.maximum(0.0, 1.0 - margins).sum()


# ---------------------------------------------------------------- group lasso

def smoothed_hinge(z: np.ndarray, mu: float) -> np.ndarray:
    """Hinge loss with its kink at 1 replaced by a quadratic of width ``mu``."""
    z = np.asarray(z, dtype=np.float64)
    u = 1.0 - z
    return np.where(u <= 0, 0.0, np.where(u >= mu, u - mu / 2.0, u * u / (2.0 * mu)))


def smoothed_hinge_derivative(z: np.ndarray, mu: float) -> np.ndarray:
    return -np.clip((1.0 - np.asarray(z, dtype=np.float64)) / mu, 0.0, 1.0)


def smoothed_loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, mu: float):
    """Mean smoothed hinge and its gradient in ``(w, b)``."""
    n = len(y)
    z = y * (X @ w + b)
    dz = smoothed_hinge_derivative(z, mu) * y / n
    return smoothed_hinge(z, mu).mean(), X.T @ dz, dz.sum()


def group_penalty(w: np.ndarray, groups: GroupStructure) -> float:
    return float(groups.norms(w).sum())


def group_prox(w: np.ndarray, groups: GroupStructure, tau: float) -> np.ndarray:
    """Block soft-thresholding: the proximal map of ``tau * sum_b ||w_b||``."""
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    w = np.asarray(w, dtype=np.float64)
    norms = groups.norms(w)
    scale = np.maximum(0.0, 1.0 - tau / np.where(norms > 0, norms, 1.0))
    scale[norms == 0] = 0.0
    return w * np.repeat(scale, groups.lengths)


def _lipschitz(X: np.ndarray, mu: float, seed: int = 0, n_iter: int = 50) -> float:
    """Upper estimate of the gradient Lipschitz constant of the mean smoothed loss."""
    n = X.shape[0]
    Xa = np.hstack([X, np.ones((n, 1))])
    if min(Xa.shape) <= 500:
        sigma = np.linalg.norm(Xa, 2)
    else:
        v = np.random.default_rng(seed).standard_normal(Xa.shape[1])
        for _ in range(n_iter):
            v = Xa.T @ (Xa @ v)
            v /= np.linalg.norm(v)
        # power iteration underestimates; pad for safety
        sigma = 1.05 * np.sqrt(np.linalg.norm(Xa.T @ (Xa @ v)))
    return max(sigma ** 2 / (n * mu), 1e-12)


def _intercept_only(y: np.ndarray, mu: float) -> float:
    res = minimize_scalar(lambda b: smoothed_hinge(y * b, mu).mean(),
                          bounds=(-2.0, 2.0), method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def lambda_max(X, y, groups: GroupStructure, smoothing: float = 0.5) -> float:
    """Smallest lambda for which every group is zero at the optimum."""
    X = np.asarray(X, dtype=np.float64)
    y = _as_signed_labels(y)
    b0 = _intercept_only(y, smoothing)
    _, gw, _ = smoothed_loss_and_grad(np.zeros(X.shape[1]), b0, X, y, smoothing)
    return float(groups.norms(gw).max()) if groups.n_groups else 0.0


@dataclass
class GroupLassoResult:
    model: LinearModel
    selection: BinSelection
    objective_history: np.ndarray = field(repr=False)
    n_iter: int = 0


def _fista(X, y, groups, lam, cfg: TrainConfig, w0=None, b0=None, lipschitz=None) -> GroupLassoResult:
    mu = cfg.smoothing
    L = lipschitz if lipschitz is not None else _lipschitz(X, mu, cfg.seed)
    step = 1.0 / L
    d = X.shape[1]
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    b = _intercept_only(y, mu) if b0 is None else float(b0)

    def objective(w_, b_):
        return smoothed_hinge(y * (X @ w_ + b_), mu).mean() + lam * group_penalty(w_, groups)

    f = objective(w, b)
    history = [f]
    w_prev, b_prev = w, b
    vw, vb = w, b
    t = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_epochs + 1):
        _, gw, gb = smoothed_loss_and_grad(vw, vb, X, y, mu)
        zw = group_prox(vw - step * gw, groups, step * lam)
        zb = vb - step * gb
        fz = objective(zw, zb)
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        if fz <= f:
            w_prev, b_prev = w, b
            w, b = zw, zb
            change = f - fz
            f = fz
        elif vw is w:
            # a plain proximal step from the iterate failed to descend: stationary up to rounding
            converged = True
            history.append(f)
            break
        else:
            w_prev, b_prev = w, b
            change = None
        vw = w + (t / t_next) * (zw - w) + ((t - 1.0) / t_next) * (w - w_prev)
        vb = b + (t / t_next) * (zb - b) + ((t - 1.0) / t_next) * (b - b_prev)
        if change is None:
            # rejected step: restart momentum from the current iterate
            vw, vb, t_next = w, b, 1.0
        t = t_next
        history.append(f)
        if change is not None and change <= cfg.tol * max(1.0, abs(f)):
            converged = True
            break
    if not converged:
        warnings.warn(f"group-lasso solver stopped after {cfg.max_epochs} iterations "
                      f"(lambda={lam:g}); returning best iterate", ConvergenceWarning)
    kept = np.flatnonzero(groups.norms(w) > ZERO_GROUP_NORM)
    model = LinearModel(w, b, groups)
    return GroupLassoResult(model, BinSelection(kept, lam, converged), np.asarray(history), it)


def train_group_lasso_svm(X, y, groups: GroupStructure, cfg: TrainConfig | None = None):
    """Fit the group-lasso SVM at ``cfg.lam``; returns ``(LinearModel, BinSelection)``."""
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = _as_signed_labels(y)
    if groups.dim != X.shape[1]:
        raise ValueError(f"group table covers {groups.dim} dims, X has {X.shape[1]}")
    res = _fista(X, y, groups, cfg.lam, cfg)
    return res.model, res.selection


def _count_tolerance(target: int) -> int:
    return int(np.floor(0.05 * target))


def select_regularizer_for_count(X, y, groups: GroupStructure, target_count: int,
                                 cfg: TrainConfig | None = None, truncate: bool = False):
    """Bisect lambda until about ``target_count`` groups survive (within 5%).

    Returns ``(lambda, BinSelection)``.  When the kept count jumps over the
    target (groups with identical columns leave together) a ``ValueError``
    reports the bracketing counts; with ``truncate=True`` the selection at
    the lower end of the bracket is cut to the ``target_count`` groups of
    largest weight norm instead.
    """
    cfg = cfg or TrainConfig()
    if not 1 <= target_count <= groups.n_groups:
        raise ValueError(f"target_count must lie in [1, {groups.n_groups}], got {target_count}")
    X = np.asarray(X, dtype=np.float64)
    y = _as_signed_labels(y)
    slack = _count_tolerance(target_count)
    L = _lipschitz(X, cfg.smoothing, cfg.seed)

    warm = {}

    def fit(lam):
        # warm start from the nearest lambda already solved
        start = min(warm, key=lambda k: abs(k - lam)) if warm else None
        w0, b0 = warm[start] if start is not None else (None, None)
        res = _fista(X, y, groups, lam, replace(cfg, lam=lam), w0, b0, L)
        warm[lam] = (res.model.weights, res.model.bias)
        return res.selection

    hi = lambda_max(X, y, groups, cfg.smoothing)
    lo = 0.0
    sel_lo = fit(lo)
    logger.debug("lambda=0 keeps %d groups", len(sel_lo))
    if abs(len(sel_lo) - target_count) <= slack:
        return lo, sel_lo
    if len(sel_lo) < target_count:
        raise ValueError(f"target {target_count} unreachable: at most {len(sel_lo)} groups survive")
    count_lo, count_hi = len(sel_lo), 0
    width0 = hi - lo
    while hi - lo >= 1e-6 * width0:
        mid = 0.5 * (lo + hi)
        sel = fit(mid)
        logger.debug("lambda=%.6g keeps %d groups", mid, len(sel))
        if abs(len(sel) - target_count) <= slack:
            return mid, sel
        if len(sel) > target_count:
            lo, count_lo = mid, len(sel)
        else:
            hi, count_hi = mid, len(sel)
    if truncate:
        w = warm[lo][0]
        norms = groups.norms(w)
        # stable sort keeps the lower group index among equal norms
        top = np.argsort(-norms, kind="stable")[:target_count]
        warnings.warn(f"no lambda keeps exactly {target_count} groups ({count_lo} -> {count_hi}); "
                      f"keeping the {target_count} largest of {count_lo}")
        return lo, BinSelection(top, lo)
    raise ValueError(f"target {target_count} unreachable: bracket [{lo:.6g}, {hi:.6g}] "
                     f"jumps from {count_lo} to {count_hi} groups")


def strip_and_renormalize(X, groups: GroupStructure, selection: BinSelection) -> np.ndarray:
    """Keep the selected groups' dimensions and re-normalize each feature block to unit norm."""
    if len(selection) == 0:
        raise ValueError("empty selection leaves no dimensions")
    if selection.kept.max() >= groups.n_groups:
        raise ValueError("selection refers to groups outside the structure")
    X = np.asarray(X, dtype=np.float64)
    kept_groups = groups.subset(selection.kept)
    out = X[:, groups.dims_of(selection.kept)]
    block_of_dim = np.repeat(kept_groups.blocks, kept_groups.lengths)
    for blk in np.unique(block_of_dim):
        cols = block_of_dim == blk
        norms = np.linalg.norm(out[:, cols], axis=1, keepdims=True)
        out[:, cols] = np.divide(out[:, cols], norms, out=np.zeros_like(out[:, cols]),
                                 where=norms > 0)
    return out


# ---------------------------------------------------------------- estimators

class LinearSVM(BaseEstimator, ClassifierMixin):
    """Hinge-loss linear SVM trained by dual coordinate descent."""

    def __init__(self, C=1.0, tol=1e-4, max_epochs=1000, intercept_scaling=1.0, random_state=0):
        self.C = C
        self.tol = tol
        self.max_epochs = max_epochs
        self.intercept_scaling = intercept_scaling
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        cfg = TrainConfig(C=self.C, tol=self.tol, max_epochs=self.max_epochs,
                          seed=self.random_state, intercept_scaling=self.intercept_scaling)
        self.model_, self.dual_objective_history_ = _dual_cd(X, y, cfg)
        self.coef_ = self.model_.weights[None, :]
        self.intercept_ = np.array([self.model_.bias])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_array(X, dtype=np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[(scores > 0).astype(int)]


def _as_groups(groups) -> GroupStructure:
    if isinstance(groups, GroupStructure):
        return groups
    return GroupStructure.from_lengths(groups)


class GroupLassoSVM(BaseEstimator, ClassifierMixin):
    """Smoothed-hinge SVM with a group-lasso penalty.

    Parameters
    ----------
    groups : GroupStructure or sequence of int
        Group layout of the columns of ``X`` (a sequence is read as lengths).
    alpha : float
        Group-lasso strength.
    smoothing : float
        Width of the quadratic region replacing the hinge kink.
    """

    def __init__(self, groups=None, alpha=0.0, smoothing=0.5, tol=1e-6, max_iter=1000,
                 random_state=0):
        self.groups = groups
        self.alpha = alpha
        self.smoothing = smoothing
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        groups = _as_groups(self.groups) if self.groups is not None else GroupStructure.uniform(X.shape[1], 1)
        cfg = TrainConfig(lam=self.alpha, tol=self.tol, max_epochs=self.max_iter,
                          seed=self.random_state, smoothing=self.smoothing)
        if groups.dim != X.shape[1]:
            raise ValueError(f"group table covers {groups.dim} dims, X has {X.shape[1]}")
        res = _fista(X, _as_signed_labels(y), groups, self.alpha, cfg)
        self.model_ = res.model
        self.selection_ = res.selection
        self.objective_history_ = res.objective_history
        self.n_iter_ = res.n_iter
        self.converged_ = res.selection.converged
        self.coef_ = res.model.weights[None, :]
        self.intercept_ = np.array([res.model.bias])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(check_array(X, dtype=np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[(scores > 0).astype(int)]


class BinSelector(BaseEstimator, TransformerMixin):
    """Pick spatial bins with a group-lasso SVM and strip the rest.

    Give either ``n_bins`` (lambda found by bisection) or ``alpha`` (fixed
    lambda).  ``transform`` drops unselected groups and re-normalizes.
    """

    def __init__(self, groups=None, n_bins=None, alpha=None, smoothing=0.5, tol=1e-6,
                 max_iter=1000, random_state=0):
        self.groups = groups
        self.n_bins = n_bins
        self.alpha = alpha
        self.smoothing = smoothing
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        groups = _as_groups(self.groups)
        cfg = TrainConfig(tol=self.tol, max_epochs=self.max_iter, seed=self.random_state,
                          smoothing=self.smoothing)
        if self.n_bins is not None:
            self.alpha_, self.selection_ = select_regularizer_for_count(X, y, groups, self.n_bins, cfg)
        else:
            alpha = 0.0 if self.alpha is None else self.alpha
            _, self.selection_ = train_group_lasso_svm(X, y, groups, replace(cfg, lam=alpha))
            self.alpha_ = alpha
        self.groups_ = groups
        return self

    def get_support(self, indices=False):
        check_is_fitted(self, "selection_")
        dims = self.groups_.dims_of(self.selection_.kept)
        if indices:
            return dims
        mask = np.zeros(self.groups_.dim, dtype=bool)
        mask[dims] = True
        return mask

    def transform(self, X):
        check_is_fitted(self, "selection_")
        X = check_array(X, dtype=np.float64)
        return strip_and_renormalize(X, self.groups_, self.selection_)
