"""Linear support vector regression mapping apparent depths to true depths.

The epsilon-insensitive dual is solved by coordinate ascent on the net
dual coefficients: the bias's equality constraint pairs the moves, and
each step is one analytic scalar line search clipped to the box. The
kernel is linear, so the model collapses to a slope and intercept, with
the bias recovered from the KKT conditions at free support vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .rasters import DepthRaster


class DegenerateDataError(ValueError):
    """Training data cannot identify a slope (all apparent depths equal)."""


class ConvergenceError(RuntimeError):
    """Solver hit the iteration cap; carries the final KKT gap."""

    def __init__(self, gap, max_iter):
        super().__init__(f"SVR did not converge in {max_iter} iterations (KKT gap {gap:.3e})")
        self.gap = gap


@dataclass
class LinearSvrModel:
    """f(Z0) = w * Z0 + b, with w > 1 for air-to-water correction."""

    w: float
    b: float

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"svr v1\nw {self.w!r}\nb {self.b!r}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "svr v1":
            raise ValueError(f"{path}: not a v1 svr model file")
        fields = dict(line.split(None, 1) for line in lines[1:3])
        return cls(w=float(fields["w"]), b=float(fields["b"]))


@dataclass
class SvrTrainState:
    """Dual solution: per-sample coefficients and the converged KKT gap."""

    alpha: np.ndarray  # a_n >= 0
    alpha_hat: np.ndarray  # a^_n >= 0
    C: float
    epsilon: float
    kkt_gap: float
    n_iter: int

    @property
    def beta(self):
        return self.alpha - self.alpha_hat


@dataclass
class SvrTrainConfig:
    C: float = 0.1
    epsilon: float = 0.01
    max_iter: int = 500_000
    tol: float = 1e-5  # KKT gap in meters; 1e-5 puts w/b errors near 1e-6
    C_grid: tuple = (0.01, 0.03, 0.1, 0.3, 1.0)

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


def _dual_objective(beta, x, y, epsilon):
    w = float(beta @ x)
    return 0.5 * w * w - float(beta @ y) + epsilon * float(np.abs(beta).sum())


def _solve_dual(x, y, C, epsilon, max_iter, tol):
    """Coordinate ascent on the SVR dual over the paired coefficients (a, a_hat).

    In these variables the objective is a smooth box-constrained quadratic;
    the bias's equality constraint sum(a - a_hat) = 0 ties updates into
    pairs. Each iteration picks the maximal KKT violator, partners it by a
    second-order gain estimate, and moves both by the analytically optimal
    step clipped to the box (working-set selection as in Fan/Chen/Lin).
    The KKT violation is the gap between the tightest lower and upper
    bounds the coefficients place on the bias multiplier.
    """
    n = x.size
    a = np.zeros(n)
    ah = np.zeros(n)
    w = 0.0
    tau = 1e-12
    dust = 1e-12 * max(C, 1.0)
    for it in range(max_iter):
        f = w * x
        grad_a = f + epsilon - y
        grad_ah = -f + epsilon + y
        # items 0..n-1: move a_i; items n..2n-1: move a_hat_i. "lower" items
        # raise beta_i (a up / a_hat down), "upper" items lower beta_i.
        lower = np.concatenate(
            (np.where(a < C, -grad_a, -np.inf), np.where(ah > 0, grad_ah, -np.inf))
        )
        upper = np.concatenate(
            (np.where(a > 0, -grad_a, np.inf), np.where(ah < C, grad_ah, np.inf))
        )
        i_item = int(np.argmax(lower))
        m = lower[i_item]
        gap = float(m - np.min(upper))
        if gap <= tol:
            return a - ah, w, gap, it
        i = i_item % n
        diff = m - upper  # per-item violation when paired with i_item
        x_all = np.concatenate((x, x))
        curvature = np.maximum((x[i] - x_all) ** 2, tau)
        gain = np.where(diff > 0, diff * diff / curvature, -np.inf)
        j_item = int(np.argmax(gain))
        j = j_item % n
        # unconstrained optimal step, then clipped by the two box bounds
        t = float(diff[j_item] / curvature[j_item])
        t = min(t, (C - a[i]) if i_item < n else ah[i])
        t = min(t, a[j] if j_item < n else (C - ah[j]))
        if t <= 0.0:
            raise ConvergenceError(gap, it)
        if i_item < n:
            a[i] = _snap(a[i] + t, C, dust)
        else:
            ah[i] = _snap(ah[i] - t, C, dust)
        if j_item < n:
            a[j] = _snap(a[j] - t, C, dust)
        else:
            ah[j] = _snap(ah[j] + t, C, dust)
        w += t * (x[i] - x[j])
    f = w * x
    grad_a = f + epsilon - y
    grad_ah = -f + epsilon + y
    lower = np.concatenate((np.where(a < C, -grad_a, -np.inf), np.where(ah > 0, grad_ah, -np.inf)))
    upper = np.concatenate((np.where(a > 0, -grad_a, np.inf), np.where(ah < C, grad_ah, np.inf)))
    raise ConvergenceError(float(np.max(lower) - np.min(upper)), max_iter)


def _snap(value, C, dust):
    """Land exactly on the box faces; float residue would fake free coefficients."""
    if value < dust:
        return 0.0
    if value > C - dust:
        return C
    return value


def _recover_bias(beta, x, y, w, C, epsilon):
    """Bias from KKT: y_i - w x_i - eps sign(beta_i) at free support vectors."""
    interior = (np.abs(beta) > 1e-9 * C) & (np.abs(beta) < C * (1 - 1e-9))
    if interior.any():
        signs = np.sign(beta[interior])
        return float(np.mean(y[interior] - w * x[interior] - epsilon * signs))
    # no free support vectors: midpoint of the feasible multiplier interval
    g = w * x - y
    right = g + np.where(beta >= 0, epsilon, -epsilon)
    left = g + np.where(beta > 0, epsilon, -epsilon)
    b_lower = np.max(np.where(beta < C, -right, -np.inf))
    b_upper = np.min(np.where(beta > -C, -left, np.inf))
    return float(0.5 * (b_lower + b_upper))


def train_svr(pairs, cfg: SvrTrainConfig | None = None):
    """Fit the correction model on (apparent, true) depth pairs."""
    cfg = cfg or SvrTrainConfig()
    x = np.asarray(pairs.apparent, dtype=np.float64).ravel()
    y = np.asarray(pairs.true, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0.0:
        raise DegenerateDataError("need at least 2 distinct apparent depths to fit a slope")
    beta, w, gap, n_iter = _solve_dual(x, y, cfg.C, cfg.epsilon, cfg.max_iter, cfg.tol)
    b = _recover_bias(beta, x, y, w, cfg.C, cfg.epsilon)
    model = LinearSvrModel(w=float(w), b=b)
    state = SvrTrainState(
        alpha=np.maximum(beta, 0.0),
        alpha_hat=np.maximum(-beta, 0.0),
        C=cfg.C,
        epsilon=cfg.epsilon,
        kkt_gap=gap,
        n_iter=n_iter,
    )
    return model, state


def predict(model: LinearSvrModel, z0):
    """Apply f(Z0) = w * Z0 + b elementwise."""
    z0 = np.asarray(z0, dtype=np.float64)
    return model.w * z0 + model.b


def correct_raster(model: LinearSvrModel, raster: DepthRaster) -> DepthRaster:
    """Correct every valid cell; nodata cells pass through untouched."""
    corrected = predict(model, raster.values)
    corrected = np.minimum(corrected, 0.0)
    values = np.where(raster.values == raster.nodata, raster.nodata, corrected)
    return DepthRaster(values, gsd=raster.gsd, nodata=raster.nodata)


def _fold_indices(n, folds, seed=0):
    order = np.random.default_rng(seed).permutation(n)
    return [order[k::folds] for k in range(folds)]


def grid_search_C(pairs, cfg: SvrTrainConfig | None = None, folds=5, seed=0):
    """Pick C from the grid by k-fold validation RMSE; ties go to the smaller C."""
    cfg = cfg or SvrTrainConfig()
    x = np.asarray(pairs.apparent, dtype=np.float64).ravel()
    y = np.asarray(pairs.true, dtype=np.float64).ravel()
    if not cfg.C_grid:
        raise ValueError("C_grid must not be empty")
    folds = min(folds, x.size)
    splits = _fold_indices(x.size, folds, seed)
    scores = {}
    for C in cfg.C_grid:
        errors = []
        for val_idx in splits:
            train_mask = np.ones(x.size, dtype=bool)
            train_mask[val_idx] = False
            sub = SvrTrainConfig(C=C, epsilon=cfg.epsilon, max_iter=cfg.max_iter, tol=cfg.tol)
            model, _ = train_svr(ArrayPairs(x[train_mask], y[train_mask]), sub)
            pred = predict(model, x[val_idx])
            errors.append(np.sqrt(np.mean((pred - y[val_idx]) ** 2)))
        scores[C] = float(np.mean(errors))
    best = min(sorted(cfg.C_grid), key=lambda C: (scores[C], C))
    return best, scores


@dataclass
class ArrayPairs:
    """Unvalidated (apparent, true) holder for noisy or ad-hoc pair sets."""

    apparent: np.ndarray
    true: np.ndarray


class LinearSvr(BaseEstimator, RegressorMixin):
    """Scikit-learn style wrapper around the dual solver.

    Parameters mirror ``SvrTrainConfig``; after ``fit`` the slope and
    intercept are available as ``w_`` and ``b_``.
    """

    def __init__(self, C=0.1, epsilon=0.01, max_iter=500_000, tol=1e-5):
        self.C = C
        self.epsilon = epsilon
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise ValueError(f"this corrector is univariate; got {X.shape[1]} features")
            X = X[:, 0]
        if X.shape != y.shape:
            raise ValueError(f"X and y disagree: {X.shape} vs {y.shape}")
        cfg = SvrTrainConfig(C=self.C, epsilon=self.epsilon, max_iter=self.max_iter, tol=self.tol)
        model, state = train_svr(ArrayPairs(X, y), cfg)
        self.w_ = model.w
        self.b_ = model.b
        self.state_ = state
        self.n_iter_ = state.n_iter
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2 and X.shape[1] == 1:
            X = X[:, 0]
        return self.w_ * X + self.b_

    def to_model(self) -> LinearSvrModel:
        return LinearSvrModel(w=self.w_, b=self.b_)
