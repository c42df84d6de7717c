"""Cross-layer feature alignment and prediction-error residuals.

A feature ``i`` at the upper layer is matched to the lower-layer feature with
the most similar decoder direction. Its prediction error is what remains after
regressing it on that matched feature:

    eps_i = f_i - (alpha_i * f_pi(i) + beta_i)
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .encoding import CvPlan, _stack, fit_fold, pearson_r_safe

VIF_WARN = 10.0


@dataclass
class CrossLayerMap:
    hi_ids: np.ndarray
    lo_ids: np.ndarray
    cosines: np.ndarray
    floor: float
    n_hi: int
    offset: int = 4

    @property
    def matched_fraction(self) -> float:
        return self.hi_ids.size / self.n_hi if self.n_hi else 0.0

    def to_dict(self) -> dict:
        return {"hi_ids": self.hi_ids.tolist(), "lo_ids": self.lo_ids.tolist(),
                "cosines": self.cosines.tolist(), "floor": self.floor,
                "n_hi": self.n_hi, "offset": self.offset,
                "matched_fraction": self.matched_fraction}


@dataclass
class PredErrorModel:
    cmap: CrossLayerMap
    alpha: np.ndarray
    beta: np.ndarray

    def residuals(self, F_hi, F_lo) -> np.ndarray:
        F_hi = np.asarray(F_hi, dtype=np.float64)
        F_lo = np.asarray(F_lo, dtype=np.float64)
        return (F_hi[:, self.cmap.hi_ids]
                - (self.alpha * F_lo[:, self.cmap.lo_ids] + self.beta))


def _unit_columns(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    n = np.linalg.norm(D, axis=0, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero decoder column")
    return D / n


def align_layers(dec_hi, dec_lo, floor: float = 0.5, offset: int = 4) -> CrossLayerMap:
    """Best lower-layer match per upper-layer decoder column, kept when cosine >= ``floor``.

    Ties in the argmax resolve to the lowest lower-layer id.
    """
    A = _unit_columns(dec_hi)
    B = _unit_columns(dec_lo)
    if A.shape[0] != B.shape[0]:
        raise ValueError("decoders have different input dimensions")
    S = np.clip(A.T @ B, -1.0, 1.0)
    best = np.argmax(S, axis=1)
    cos = S[np.arange(S.shape[0]), best]
    keep = cos >= floor
    return CrossLayerMap(np.flatnonzero(keep), best[keep], cos[keep], float(floor),
                         A.shape[1], int(offset))


def _ols_columns(y, x):
    """Column-wise univariate OLS ``y ~ alpha * x + beta``; alpha=0 for a constant predictor."""
    xm = x.mean(axis=0)
    ym = y.mean(axis=0)
    xc = x - xm
    sxx = np.sum(xc * xc, axis=0)
    sxy = np.sum(xc * (y - ym), axis=0)
    const = sxx <= 1e-12 * np.maximum(1.0, np.sum(x * x, axis=0))
    alpha = np.where(const, 0.0, sxy / np.where(const, 1.0, sxx))
    beta = ym - alpha * xm
    return alpha, beta


def fit_pred_error(F_hi, F_lo, cmap: CrossLayerMap, train_rows=None) -> tuple[PredErrorModel, np.ndarray]:
    """Fit alpha, beta per matched feature (on ``train_rows`` if given); return model and residuals.

    Residuals cover all rows and only matched upper-layer features, in
    ``cmap.hi_ids`` order.
    """
    F_hi = np.asarray(F_hi, dtype=np.float64)
    F_lo = np.asarray(F_lo, dtype=np.float64)
    if F_hi.shape[0] != F_lo.shape[0]:
        raise ValueError("layers have different sample counts")
    rows = slice(None) if train_rows is None else np.asarray(train_rows)
    y = F_hi[rows][:, cmap.hi_ids]
    x = F_lo[rows][:, cmap.lo_ids]
    alpha, beta = _ols_columns(y, x)
    model = PredErrorModel(cmap, alpha, beta)
    return model, model.residuals(F_hi, F_lo)


def vif_between(u, v) -> float:
    """``1 / (1 - r^2)`` for the Pearson correlation of two series (flattened)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size != v.size:
        raise ValueError("series differ in length")
    uc, vc = u - u.mean(), v - v.mean()
    den = np.sqrt(np.sum(uc * uc) * np.sum(vc * vc))
    if den == 0:
        raise ValueError("zero-variance series")
    r = float(np.clip(np.sum(uc * vc) / den, -1.0, 1.0))
    return vif_from_r(r)


def vif_from_r(r: float) -> float:
    if abs(r) >= 1.0:
        return float("inf")
    vif = 1.0 / (1.0 - r * r)
    if vif > VIF_WARN:
        warnings.warn(f"high collinearity: VIF={vif:.1f}", stacklevel=2)
    return vif


def pred_error_designs(hi: dict, lo: dict, cmap: CrossLayerMap, train_ids) -> dict:
    """Prediction-error designs for every story with alpha, beta fit on ``train_ids`` only."""
    ids = sorted(hi)
    F_hi = _stack(hi, ids)
    F_lo = _stack(lo, ids)
    bounds = np.cumsum([0] + [np.asarray(hi[s]).shape[0] for s in ids])
    train = set(train_ids)
    rows = np.concatenate([np.arange(bounds[i], bounds[i + 1])
                           for i, s in enumerate(ids) if s in train])
    _, eps = fit_pred_error(F_hi, F_lo, cmap, train_rows=rows)
    return {s: eps[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)}


def _cv_r(raw: dict, extra_fn, voxels: dict, plan: CvPlan, standardize: bool):
    preds, ys = [], []
    for tr, te in plan.folds:
        designs = raw if extra_fn is None else _concat(raw, extra_fn(tr))
        enc = fit_fold(designs, voxels, tr, plan.lambdas, plan.inner_folds, standardize)
        preds.append(enc.predict(_stack(designs, te)))
        y = _stack(voxels, te)
        ys.append(y[:, None] if y.ndim == 1 else y)
    return np.atleast_1d(pearson_r_safe(np.concatenate(preds), np.concatenate(ys)))


def _concat(a: dict, b: dict) -> dict:
    return {s: np.hstack([np.asarray(a[s], dtype=np.float64), np.asarray(b[s], dtype=np.float64)])
            for s in a}


def subject_bootstrap(deltas, n_boot: int = 10_000, seed: int = 0) -> dict:
    """Percentile CI and one-sided add-one p for ``mean(delta) > 0`` by resampling subjects."""
    d = np.asarray(deltas, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = d[rng.integers(0, d.size, size=(n_boot, d.size))].mean(axis=1)
    p = (1 + int(np.sum(means <= 0))) / (n_boot + 1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return {"mean": float(d.mean()), "ci": [float(lo), float(hi)], "p": float(p),
            "n_positive": int(np.sum(d > 0)), "n_subjects": int(d.size)}


def combined_encode(raw: dict, pe, voxels_by_subject: list, plan: CvPlan,
                    standardize: bool = True, n_boot: int = 10_000, seed: int = 0) -> dict:
    """Encoding with raw features alone vs. raw plus prediction errors, per subject.

    ``pe`` is either a dict of designs or a callable ``train_ids -> designs`` so
    the cross-layer regression is refit inside each outer fold. Reports the
    per-subject mean r of both models, their difference and a subject bootstrap.
    """
    pe_fn = pe if callable(pe) else (lambda _ids: pe)
    r_raw, r_comb = [], []
    for vox in voxels_by_subject:
        r_raw.append(float(np.mean(_cv_r(raw, None, vox, plan, standardize))))
        r_comb.append(float(np.mean(_cv_r(raw, pe_fn, vox, plan, standardize))))
    delta = np.asarray(r_comb) - np.asarray(r_raw)
    return {"r_raw": r_raw, "r_combined": r_comb, "delta_r": delta.tolist(),
            "mean_r_raw": float(np.mean(r_raw)), "mean_r_combined": float(np.mean(r_comb)),
            "bootstrap": subject_bootstrap(delta, n_boot, seed)}


def offset_sweep(hi: dict, lo_by_offset: dict, dec_hi, dec_lo_by_offset: dict,
                 voxels_by_subject: list, plan: CvPlan, floor: float = 0.5,
                 n_boot: int = 10_000, seed: int = 0) -> dict:
    """Combined-vs-raw encoding for each lower layer offset, with fold-wise residual fits."""
    out = {}
    for off in sorted(lo_by_offset):
        cmap = align_layers(dec_hi, dec_lo_by_offset[off], floor, off)
        lo = lo_by_offset[off]
        res = combined_encode(hi, lambda tr, cmap=cmap, lo=lo: pred_error_designs(hi, lo, cmap, tr),
                              voxels_by_subject, plan, n_boot=n_boot, seed=seed)
        res["matched_fraction"] = cmap.matched_fraction
        out[int(off)] = res
    return out
