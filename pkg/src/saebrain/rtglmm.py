"""Linear mixed model with crossed subject and item random intercepts, fit by ML.

    y = X b + Z_s u_s + Z_i u_i + e,   u_s ~ N(0, s2_s), u_i ~ N(0, s2_i), e ~ N(0, s2)

For fixed variance ratios ``g = (s2_s / s2, s2_i / s2)`` the fixed effects and
``s2`` have closed forms (GLS), so the likelihood is profiled down to ``g``
and maximised with a simplex search over ``log g``. Boundary fits with one or
both ratios at zero are always evaluated too, since the log scale cannot reach
them.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, stats

from .partition import pca_topk

LOG_RATIO_BOUNDS = (-25.0, 10.0)


@dataclass
class RtDesign:
    response: np.ndarray
    fixed: dict
    subject: np.ndarray
    item: np.ndarray
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=np.float64)
        n = self.response.size
        self.fixed = {k: np.asarray(v, dtype=np.float64) for k, v in self.fixed.items()}
        self.subject = np.asarray(self.subject)
        self.item = np.asarray(self.item)
        for name, col in self.fixed.items():
            if col.shape != (n,):
                raise ValueError(f"fixed regressor {name!r} has wrong length")
        if self.subject.shape != (n,) or self.item.shape != (n,):
            raise ValueError("subject/item ids must have one entry per row")
        if not np.all(np.isfinite(self.response)) or any(
                not np.all(np.isfinite(c)) for c in self.fixed.values()):
            raise ValueError("missing or non-finite values in design")
        for b, cols in self.blocks.items():
            missing = set(cols) - set(self.fixed)
            if missing:
                raise ValueError(f"block {b!r} names unknown regressors {sorted(missing)}")

    def columns_for(self, expr: str) -> list:
        """Regressor names for a block expression like ``"base+sae"``."""
        cols = []
        for part in expr.split("+"):
            part = part.strip()
            if not part:
                continue
            names = self.blocks.get(part, [part] if part in self.fixed else None)
            if names is None:
                raise ValueError(f"unknown block or regressor {part!r}")
            cols.extend(c for c in names if c not in cols)
        return cols

    @classmethod
    def from_dict(cls, d: dict) -> "RtDesign":
        unknown = set(d) - {"response", "fixed", "subject", "item", "blocks"}
        if unknown:
            raise ValueError(f"unknown design keys {sorted(unknown)}")
        return cls(d["response"], d["fixed"], d["subject"], d["item"], d.get("blocks", {}))


@dataclass
class LmmFit:
    columns: list
    beta: np.ndarray
    sigma2_subject: float
    sigma2_item: float
    sigma2_resid: float
    loglik: float
    converged: bool
    n_params: int
    n_obs: int

    def to_dict(self) -> dict:
        return {"columns": self.columns, "beta": self.beta.tolist(),
                "sigma2_subject": self.sigma2_subject, "sigma2_item": self.sigma2_item,
                "sigma2_resid": self.sigma2_resid, "loglik": self.loglik,
                "converged": self.converged, "n_params": self.n_params, "n_obs": self.n_obs}


class _Profile:
    """Profiled ML log-likelihood over variance ratios via the Woodbury identity."""

    def __init__(self, y, X, subj_codes, item_codes, n_s, n_i):
        self.y, self.X = y, X
        self.n = y.size
        self.q = (n_s, n_i)
        # Z = [one-hot subject | one-hot item]; only Z'Z, Z'X, Z'y are needed.
        cols = np.concatenate([subj_codes, n_s + item_codes])
        q = n_s + n_i
        self.ZtZ = np.zeros((q, q))
        np.add.at(self.ZtZ, (subj_codes, subj_codes), 1.0)
        np.add.at(self.ZtZ, (n_s + item_codes, n_s + item_codes), 1.0)
        np.add.at(self.ZtZ, (subj_codes, n_s + item_codes), 1.0)
        np.add.at(self.ZtZ, (n_s + item_codes, subj_codes), 1.0)
        ZtX = np.zeros((q, X.shape[1]))
        np.add.at(ZtX, subj_codes, X)
        np.add.at(ZtX, n_s + item_codes, X)
        Zty = np.bincount(cols, weights=np.concatenate([y, y]), minlength=q)
        self.ZtX, self.Zty = ZtX, Zty
        self.XtX, self.Xty, self.yty = X.T @ X, X.T @ y, float(y @ y)

    def evaluate(self, g_s: float, g_i: float):
        n_s, n_i = self.q
        lam = np.sqrt(np.concatenate([np.full(n_s, g_s), np.full(n_i, g_i)]))
        A = np.eye(lam.size) + lam[:, None] * self.ZtZ * lam[None, :]
        cf = linalg.cho_factor(A)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        LX = lam[:, None] * self.ZtX
        Ly = lam * self.Zty
        # a' V0^-1 b = a'b - (Lam Z'a)' A^-1 (Lam Z'b)
        AiX = linalg.cho_solve(cf, LX)
        Aiy = linalg.cho_solve(cf, Ly)
        XVX = self.XtX - LX.T @ AiX
        XVy = self.Xty - LX.T @ Aiy
        yVy = self.yty - float(Ly @ Aiy)
        beta = np.linalg.solve(XVX, XVy)
        rss = max(yVy - float(XVy @ beta), 1e-300)
        s2 = rss / self.n
        ll = -0.5 * self.n * (math.log(2 * math.pi) + math.log(s2) + 1.0) - 0.5 * logdet
        return ll, beta, s2


def _codes(ids):
    _, inv = np.unique(ids, return_inverse=True)
    return inv.astype(np.int64), int(inv.max()) + 1


def _zscore(cols):
    out = []
    for c in cols:
        sd = c.std()
        if sd == 0:
            raise ValueError("constant fixed regressor")
        out.append((c - c.mean()) / sd)
    return out


def fit_lmm(design: RtDesign, columns=None, standardize: bool = True,
            max_iter: int = 2000) -> LmmFit:
    """ML fit of fixed effects (intercept + ``columns``) with crossed random intercepts."""
    columns = list(design.fixed) if columns is None else list(columns)
    subj, n_s = _codes(design.subject)
    item, n_i = _codes(design.item)
    if n_s < 2:
        raise ValueError("need at least 2 subjects")
    if n_i < 2:
        raise ValueError("need at least 2 items")
    regs = [design.fixed[c] for c in columns]
    if standardize:
        regs = _zscore(regs)
    X = np.column_stack([np.ones(design.response.size)] + regs)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("fixed-effect design is rank deficient")
    prof = _Profile(design.response, X, subj, item, n_s, n_i)

    def neg(theta):
        return -prof.evaluate(math.exp(theta[0]), math.exp(theta[1]))[0]

    def neg1(t, which):
        g = math.exp(t)
        return -prof.evaluate(g if which == 0 else 0.0, g if which == 1 else 0.0)[0]

    candidates = [((0.0, 0.0), True)]
    res = optimize.minimize(neg, x0=np.zeros(2), method="Nelder-Mead",
                            bounds=[LOG_RATIO_BOUNDS] * 2,
                            options={"xatol": 1e-6, "fatol": 1e-8, "maxiter": max_iter})
    candidates.append(((math.exp(res.x[0]), math.exp(res.x[1])), bool(res.success)))
    for which in (0, 1):
        r1 = optimize.minimize_scalar(neg1, bounds=LOG_RATIO_BOUNDS, args=(which,),
                                      method="bounded", options={"xatol": 1e-9})
        g = math.exp(r1.x)
        candidates.append(((g, 0.0) if which == 0 else (0.0, g), bool(r1.success)))
    best = None
    for (gs, gi), ok in candidates:
        ll, beta, s2 = prof.evaluate(gs, gi)
        if best is None or ll > best[0] + 1e-12:
            best = (ll, beta, s2, gs, gi, ok)
    ll, beta, s2, gs, gi, ok = best
    if not res.success:
        warnings.warn("variance-ratio search hit the iteration limit", stacklevel=2)
    return LmmFit(columns, beta, gs * s2, gi * s2, s2, float(ll), ok,
                  X.shape[1] + 3, design.response.size)


def ols_loglik(y, X) -> float:
    """Gaussian ML log-likelihood of ordinary least squares."""
    y = np.asarray(y, dtype=np.float64)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    n = y.size
    return float(-0.5 * n * (math.log(2 * math.pi) + math.log(r @ r / n) + 1.0))


def lrt(null_fit: LmmFit, alt_fit: LmmFit) -> dict:
    """Likelihood-ratio test ``2 (logL_alt - logL_null)`` against chi^2 with the parameter difference."""
    if null_fit.n_obs != alt_fit.n_obs:
        raise ValueError("fits use different data")
    if not set(null_fit.columns) <= set(alt_fit.columns):
        raise ValueError("null model is not nested in the alternative")
    ddf = alt_fit.n_params - null_fit.n_params
    chi2 = 2.0 * (alt_fit.loglik - null_fit.loglik)
    if chi2 < 0:
        if chi2 < -1e-6:
            warnings.warn(f"alternative fits worse than null (chi2={chi2:.3g}); clamped to 0",
                          stacklevel=2)
        chi2 = 0.0
    p = 1.0 if chi2 == 0.0 or ddf == 0 else float(stats.chi2.sf(chi2, ddf))
    return {"chi2": chi2, "df": ddf, "p": p, "delta_loglik": chi2 / 2.0}


def feature_block(features, k: int = 50, train_rows=None, prefix: str = "pc") -> dict:
    """Top-``k`` principal-component scores as named fixed regressors."""
    scores = pca_topk(features, k, train_rows)
    return {f"{prefix}{j:02d}": scores[:, j] for j in range(scores.shape[1])}
