"""Voxelwise ridge encoding models with nested leave-stories-out cross-validation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(10.0 ** p for p in range(7))


@dataclass
class CvPlan:
    """Outer ``(train_ids, test_ids)`` folds over stories plus the inner-CV settings."""
    folds: list
    lambdas: tuple = DEFAULT_LAMBDAS
    inner_folds: int = 3

    def __post_init__(self):
        self.folds = [(list(tr), list(te)) for tr, te in self.folds]
        self.lambdas = tuple(float(x) for x in self.lambdas)

    @property
    def stories(self) -> list:
        return sorted({s for _, te in self.folds for s in te})

    def validate(self, story_ids=None) -> None:
        if not self.folds:
            raise ValueError("plan has no folds")
        if not self.lambdas or any(x < 0 for x in self.lambdas):
            raise ValueError("lambda grid must be nonempty and nonnegative")
        seen = set()
        for tr, te in self.folds:
            if not te or not tr:
                raise ValueError("every fold needs train and test stories")
            if set(tr) & set(te):
                raise ValueError("story appears in both train and test of a fold")
            if set(te) & seen:
                raise ValueError("test sets overlap across folds")
            seen |= set(te)
        if story_ids is not None:
            ids = set(story_ids)
            if seen != ids:
                raise ValueError("test sets must cover every story exactly once")
            for tr, _ in self.folds:
                if not set(tr) <= ids:
                    raise ValueError("unknown story id in a training set")

    @classmethod
    def leave_stories_out(cls, story_ids, n_folds: int = 4, inner_folds: int = 3,
                          lambdas=DEFAULT_LAMBDAS):
        """Contiguous blocks of the sorted story ids as test sets; train on the rest."""
        ids = sorted(story_ids)
        if len(ids) < n_folds:
            raise ValueError(f"fewer stories ({len(ids)}) than folds ({n_folds})")
        blocks = [list(b) for b in np.array_split(np.array(ids, dtype=object), n_folds)]
        folds = [([s for s in ids if s not in set(b)], b) for b in blocks]
        return cls(folds, lambdas, inner_folds)

    def to_dict(self) -> dict:
        return {"folds": [[tr, te] for tr, te in self.folds],
                "lambdas": list(self.lambdas), "inner_folds": self.inner_folds}

    @classmethod
    def from_dict(cls, d: dict) -> "CvPlan":
        return cls([tuple(f) for f in d["folds"]], d.get("lambdas", DEFAULT_LAMBDAS),
                   d.get("inner_folds", 3))


@dataclass
class RidgeModel:
    """Fitted ridge: ``y_hat = ((X - x_mean) / x_scale) @ W + b``."""
    W: np.ndarray
    b: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    lambdas: np.ndarray

    def predict(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale
        return Xs @ self.W + self.b


@dataclass
class EncodingResult:
    r: np.ndarray
    r2: np.ndarray
    lambdas: np.ndarray
    fold_lambdas: np.ndarray
    mean_r: float
    ci: tuple
    model: RidgeModel | None = None
    fold_models: list = field(default_factory=list)
    predictions: np.ndarray | None = None

    @property
    def mean_r2(self) -> float:
        return float(np.mean(self.r2))

    def summary(self) -> dict:
        return {
            "mean_r": self.mean_r,
            "mean_r2": self.mean_r2,
            "ci": list(self.ci),
            "r": self.r,
            "r2": self.r2,
            "lambdas": self.lambdas,
        }


class _RidgePath:
    """SVD of a centred design, reused for every lambda in a grid."""

    def __init__(self, X, Y, standardize: bool = True):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if X.shape[0] < 2:
            raise ValueError("ridge needs at least 2 samples")
        self.x_mean = X.mean(axis=0)
        sd = X.std(axis=0)
        # spread at rounding level relative to the mean: constant, not signal
        const = sd <= 1e-10 * np.abs(self.x_mean)
        scale = sd if standardize else np.ones(X.shape[1])
        self.x_scale = np.where((scale > 0) & ~const, scale, 1.0)
        X = np.where(const, self.x_mean, X)
        self.y_mean = Y.mean(axis=0)
        Xc = (X - self.x_mean) / self.x_scale
        U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        self.s = s
        self.Vt = Vt
        self.UtY = U.T @ (Y - self.y_mean)

    def _shrink(self, lam):
        s = self.s
        lam = np.asarray(lam, dtype=float)
        if np.any(lam == 0):
            tol = s.max(initial=0.0) * max(self.Vt.shape) * np.finfo(float).eps
            if s.size < self.Vt.shape[1] or np.any(s <= tol):
                raise np.linalg.LinAlgError("singular system: rank-deficient X with lambda=0")
        return s[:, None] / (s[:, None] ** 2 + lam)

    def weights(self, lam) -> np.ndarray:
        """Weights for a scalar lambda or one lambda per voxel."""
        lam = np.asarray(lam, dtype=float)
        if lam.ndim == 0:
            return self.Vt.T @ (self._shrink(lam) * self.UtY)
        W = np.empty((self.Vt.shape[1], self.UtY.shape[1]))
        for value in np.unique(lam):
            cols = lam == value
            W[:, cols] = self.Vt.T @ (self._shrink(value) * self.UtY[:, cols])
        return W

    def model(self, lam) -> RidgeModel:
        W = self.weights(lam)
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (W.shape[1],)).copy()
        return RidgeModel(W, self.y_mean.copy(), self.x_mean, self.x_scale, lam)

    def grid_predictions(self, X_test, lambdas) -> np.ndarray:
        """Predictions for every lambda: ``(n_lambdas, n_test, n_voxels)``."""
        P = ((np.asarray(X_test, dtype=np.float64) - self.x_mean) / self.x_scale) @ self.Vt.T
        return np.stack([P @ (self._shrink(lam) * self.UtY) + self.y_mean for lam in lambdas])


def ridge_fit(X, y, lam: float, standardize: bool = False):
    """Ridge with an unpenalised intercept; returns ``(w, b)``.

    ``w = (Xc'Xc + lam I)^-1 Xc'yc`` on column-centred data and ``b`` restores
    the means. ``y`` may be a vector or an ``(n, V)`` matrix.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    path = _RidgePath(X, y_arr, standardize=standardize)
    m = path.model(lam)
    w = m.W / m.x_scale[:, None]
    b = m.b - m.x_mean @ w
    if y_arr.ndim == 1:
        return w[:, 0], float(b[0])
    return w, b


def pearson_r(y_hat, y) -> np.ndarray | float:
    """Product-moment correlation, column-wise for 2-D inputs."""
    a = np.asarray(y_hat, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    den = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0))
    if np.any(den == 0):
        raise ValueError("zero variance input")
    r = np.clip(np.sum(a * b, axis=0) / den, -1.0, 1.0)
    return float(r) if np.ndim(r) == 0 else r


def cv_r2(y_hat, y) -> np.ndarray:
    """Held-out coefficient of determination per column, ``1 - SSE / SST``."""
    y = np.asarray(y, dtype=np.float64)
    sst = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    sse = np.sum((y - y_hat) ** 2, axis=0)
    return 1.0 - sse / np.where(sst > 0, sst, np.nan)


def _stack(blocks: dict, ids) -> np.ndarray:
    return np.concatenate([np.asarray(blocks[s], dtype=np.float64) for s in ids], axis=0)


def _inner_groups(ids, k):
    ids = list(ids)
    k = min(k, len(ids))
    if k < 2:
        raise ValueError("inner CV needs at least 2 training stories")
    return [list(g) for g in np.array_split(np.array(ids, dtype=object), k)]


def select_lambdas(designs: dict, voxels: dict, train_ids, lambdas, inner_folds: int = 3,
                   standardize: bool = True) -> np.ndarray:
    """Per-voxel lambda minimising summed inner-fold squared error (ties go to the smaller lambda)."""
    groups = _inner_groups(train_ids, inner_folds)
    sse = None
    for g in groups:
        fit_ids = [s for s in train_ids if s not in set(g)]
        path = _RidgePath(_stack(designs, fit_ids), _stack(voxels, fit_ids), standardize)
        Y_val = _stack(voxels, g)
        if Y_val.ndim == 1:
            Y_val = Y_val[:, None]
        pred = path.grid_predictions(_stack(designs, g), lambdas)
        err = np.sum((pred - Y_val[None]) ** 2, axis=1)
        sse = err if sse is None else sse + err
    return np.asarray(lambdas)[np.argmin(sse, axis=0)]


def fit_fold(designs: dict, voxels: dict, train_ids, lambdas, inner_folds: int = 3,
             standardize: bool = True) -> RidgeModel:
    """Inner-CV lambda selection then refit on all ``train_ids``; touches nothing else."""
    lam = select_lambdas(designs, voxels, train_ids, lambdas, inner_folds, standardize)
    path = _RidgePath(_stack(designs, train_ids), _stack(voxels, train_ids), standardize)
    return path.model(lam)


def nested_cv_encode(designs: dict, voxels: dict, plan: CvPlan, standardize: bool = True,
                     final_fit: bool = True, n_boot: int = 1000, seed: int = 0,
                     keep_predictions: bool = False) -> EncodingResult:
    """Nested leave-stories-out CV for every voxel.

    ``designs`` and ``voxels`` map story id to ``(n_TR, k)`` and ``(n_TR, V)``
    arrays. Held-out predictions of all outer folds are concatenated and scored
    per voxel with Pearson r and CV R^2.
    """
    ids = sorted(designs)
    if set(voxels) != set(ids):
        raise ValueError("designs and voxels cover different stories")
    plan.validate(ids)
    preds, truth, fold_models = [], [], []
    for tr, te in plan.folds:
        m = fit_fold(designs, voxels, tr, plan.lambdas, plan.inner_folds, standardize)
        fold_models.append(m)
        preds.append(m.predict(_stack(designs, te)))
        y = _stack(voxels, te)
        truth.append(y[:, None] if y.ndim == 1 else y)
    P = np.concatenate(preds)
    Y = np.concatenate(truth)
    r = np.atleast_1d(pearson_r_safe(P, Y))
    r2 = np.atleast_1d(cv_r2(P, Y))
    fold_lambdas = np.stack([m.lambdas for m in fold_models])
    final = None
    if final_fit:
        all_tr = [s for tr, _ in plan.folds for s in tr]
        all_ids = sorted(set(all_tr) | set(plan.stories))
        final = fit_fold(designs, voxels, all_ids, plan.lambdas,
                         max(plan.inner_folds, 2), standardize)
        lambdas = final.lambdas
    else:
        lambdas = fold_lambdas[0]
    ci = bootstrap_ci(r, n_boot=n_boot, seed=seed) if r.size > 1 else (float(r[0]),) * 2
    return EncodingResult(
        r=r, r2=r2, lambdas=lambdas, fold_lambdas=fold_lambdas,
        mean_r=float(np.mean(r)), ci=ci, model=final, fold_models=fold_models,
        predictions=P if keep_predictions else None,
    )


def pearson_r_safe(P, Y) -> np.ndarray:
    """Column-wise Pearson r with zero for constant columns."""
    a = P - P.mean(axis=0)
    b = Y - Y.mean(axis=0)
    den = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, np.sum(a * b, axis=0) / den, 0.0)
    return np.clip(r, -1.0, 1.0)


def bootstrap_ci(scores, n_boot: int = 1000, level: float = 95.0, seed: int = 0):
    """Percentile interval of the mean over units resampled with replacement."""
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no scores")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    alpha = (100.0 - level) / 2.0
    lo, hi = np.percentile(means, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


def mean_over_subjects(results) -> float:
    """Average voxels within each subject, then subjects."""
    return float(np.mean([res.mean_r for res in results]))
