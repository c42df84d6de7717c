"""Subcategory x region topography and the convergence-statistics battery.

Permutation p-values use the add-one estimator ``(1 + #{null >= obs}) / (1 + n_perm)``.
Permutations are generated in fixed-size chunks, each from its own
``SeedSequence`` child, so the null counts do not depend on the number of
worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .matio import REGIONS

SUBCATEGORIES = ("concreteness", "event", "affect", "social", "spatial")

# predicted-primary cells: at least two of three source programmes agree
APRIORI_PRIMARY = {
    "concreteness": ("posterior temporal", "angular gyrus"),
    "event": ("posterior temporal", "inferior frontal"),
    "affect": ("anterior temporal", "dmPFC"),
    "social": ("inferior frontal", "anterior temporal"),
    "spatial": ("angular gyrus", "posterior temporal"),
}

CHUNK = 1000


@dataclass
class TestResult:
    statistic: float
    p: float
    n_perm: int | None = None
    exact: bool = False
    seed: int | None = None
    ci: tuple | None = None
    extra: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["ci"] is not None:
            d["ci"] = list(d["ci"])
        return d


@dataclass
class TopographyPair:
    predicted: np.ndarray
    observed: np.ndarray
    rows: tuple = SUBCATEGORIES
    cols: tuple = REGIONS

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=float)
        self.observed = np.asarray(self.observed, dtype=float)
        if self.predicted.shape != self.observed.shape:
            raise ValueError("predicted and observed shapes differ")
        if self.predicted.shape != (len(self.rows), len(self.cols)):
            raise ValueError("label lengths do not match matrix shape")
        if not np.all(np.isin(self.predicted, (0.0, 1.0))):
            raise ValueError("predicted entries must be 0 or 1")


def apriori_matrix() -> np.ndarray:
    P = np.zeros((len(SUBCATEGORIES), len(REGIONS)))
    for i, sub in enumerate(SUBCATEGORIES):
        for region in APRIORI_PRIMARY[sub]:
            P[i, REGIONS.index(region)] = 1.0
    return P


def apriori_json() -> dict:
    return {"rows": list(SUBCATEGORIES), "cols": list(REGIONS),
            "predicted": apriori_matrix().astype(int).tolist()}


def load_predicted(d: dict) -> np.ndarray:
    P = np.asarray(d["predicted"], dtype=float)
    if list(d.get("rows", SUBCATEGORIES)) != list(SUBCATEGORIES) or \
            list(d.get("cols", REGIONS)) != list(REGIONS):
        raise ValueError("predicted matrix labels must follow the canonical order")
    return P


def build_observed(cells: dict) -> np.ndarray:
    """5x5 matrix of mean r from ``{(subcategory, region): r-values or EncodingResult}``."""
    M = np.full((len(SUBCATEGORIES), len(REGIONS)), np.nan)
    for (sub, region), val in cells.items():
        if sub not in SUBCATEGORIES or region not in REGIONS:
            raise ValueError(f"unknown cell ({sub}, {region})")
        r = getattr(val, "r", val)
        M[SUBCATEGORIES.index(sub), REGIONS.index(region)] = float(np.mean(r))
    if np.isnan(M).any():
        raise ValueError("incomplete grid")
    return M


def bh_fdr(p_values, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up significance mask."""
    p = np.asarray(p_values, dtype=float).ravel()
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    passed = p[order] <= q * np.arange(1, m + 1) / m
    mask = np.zeros(m, dtype=bool)
    if passed.any():
        kmax = np.flatnonzero(passed).max()
        mask[order[:kmax + 1]] = True
    return mask.reshape(np.shape(p_values))


def _chunked_counts(stat_fn, observed: float, n_perm: int, seed: int, n_jobs: int = 1):
    children = np.random.SeedSequence(seed).spawn(math.ceil(n_perm / CHUNK))
    sizes = [min(CHUNK, n_perm - i * CHUNK) for i in range(len(children))]

    def run(args):
        ss, size = args
        null = stat_fn(np.random.default_rng(ss), size)
        return int(np.sum(null >= observed - 1e-12 * max(1.0, abs(observed)))), null

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            out = list(ex.map(run, zip(children, sizes)))
    else:
        out = [run(a) for a in zip(children, sizes)]
    count = sum(c for c, _ in out)
    null = np.concatenate([n for _, n in out])
    return count, null


def _perm_p(count: int, n_perm: int) -> float:
    return (1.0 + count) / (1.0 + n_perm)


def interaction_f(scores) -> float:
    """Two-way repeated-measures interaction F for a ``(subjects, A, B)`` array."""
    Y = np.asarray(scores, dtype=float)
    S, a, b = Y.shape
    Z = (Y - Y.mean(axis=2, keepdims=True) - Y.mean(axis=1, keepdims=True)
         + Y.mean(axis=(1, 2), keepdims=True))
    return _f_from_centered(Z[None])[0]


def _f_from_centered(Z) -> np.ndarray:
    # Z: (batch, S, a, b) double-centred within subject
    _, S, a, b = Z.shape
    zbar = Z.mean(axis=1)
    ss_ab = S * np.sum(zbar ** 2, axis=(1, 2))
    ss_err = np.sum((Z - zbar[:, None]) ** 2, axis=(1, 2, 3))
    df1 = (a - 1) * (b - 1)
    df2 = df1 * (S - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (ss_ab / df1) / (ss_err / df2)


def perm_interaction_F(scores, n_perm: int = 10_000, seed: int = 0,
                       n_jobs: int = 1) -> TestResult:
    """Subcategory x region interaction F with a within-subject region-label permutation null.

    Each null draw applies an independent random permutation of the region
    axis to every subject. Under no interaction the double-centred subject
    matrices are exchangeable under such relabelling, so the null is exact.
    """
    Y = np.asarray(scores, dtype=float)
    if Y.ndim != 3:
        raise ValueError("scores must be (subjects, subcategories, regions)")
    S, a, b = Y.shape
    if S < 2:
        raise ValueError("insufficient subjects")
    Z = (Y - Y.mean(axis=2, keepdims=True) - Y.mean(axis=1, keepdims=True)
         + Y.mean(axis=(1, 2), keepdims=True))
    F_obs = float(_f_from_centered(Z[None])[0])

    def null(rng, size):
        perms = np.argsort(rng.random((size, S, b)), axis=2)
        Zp = np.take_along_axis(Z[None], perms[:, :, None, :], axis=3)
        return _f_from_centered(Zp)

    count, _ = _chunked_counts(null, F_obs, n_perm, seed, n_jobs)
    df1, df2 = (a - 1) * (b - 1), (a - 1) * (b - 1) * (S - 1)
    return TestResult(F_obs, _perm_p(count, n_perm), n_perm, False, seed,
                      extra={"df1": df1, "df2": df2,
                             "p_parametric": float(stats.f.sf(F_obs, df1, df2))})


def _rowcol_perm_indices(rng, size, n_rows, n_cols):
    rp = np.argsort(rng.random((size, n_rows)), axis=1)
    cp = np.argsort(rng.random((size, n_cols)), axis=1)
    return (rp[:, :, None] * n_cols + cp[:, None, :]).reshape(size, -1)


def _pearson_rows(A, b):
    # correlation of each row of A with vector b
    Ac = A - A.mean(axis=1, keepdims=True)
    bc = b - b.mean()
    den = np.sqrt(np.sum(Ac * Ac, axis=1) * np.sum(bc * bc))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, Ac @ bc / den, 0.0)


def spearman_perm(pair: TopographyPair, n_perm: int = 10_000, seed: int = 0,
                  n_jobs: int = 1) -> TestResult:
    """Spearman rho between flattened predicted and observed matrices (mid-ranks for ties).

    Null: the observed matrix under independent random row and column relabelling.
    """
    pred_rank = stats.rankdata(pair.predicted.ravel())
    obs_rank = stats.rankdata(pair.observed.ravel())
    rho = float(_pearson_rows(obs_rank[None], pred_rank)[0])
    n_rows, n_cols = pair.observed.shape

    def null(rng, size):
        idx = _rowcol_perm_indices(rng, size, n_rows, n_cols)
        return _pearson_rows(obs_rank[idx], pred_rank)

    count, _ = _chunked_counts(null, rho, n_perm, seed, n_jobs)
    return TestResult(rho, _perm_p(count, n_perm), n_perm, False, seed)


def mantel(A, B, n_perm: int = 10_000, seed: int = 0, n_jobs: int = 1,
           return_null: bool = False):
    """Pearson correlation of flattened ``A`` and ``B``; null permutes B's rows and columns."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError("A and B must be same-shape matrices")
    a = A.ravel()
    b = B.ravel()
    r = float(_pearson_rows(b[None], a)[0])
    n_rows, n_cols = B.shape

    def null(rng, size):
        idx = _rowcol_perm_indices(rng, size, n_rows, n_cols)
        return _pearson_rows(b[idx], a)

    count, null_vals = _chunked_counts(null, r, n_perm, seed, n_jobs)
    res = TestResult(r, _perm_p(count, n_perm), n_perm, False, seed)
    return (res, null_vals) if return_null else res


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def hypergeom_pmf(N: int, K: int, n: int, k: int) -> float:
    if k < max(0, n - (N - K)) or k > min(K, n):
        return 0.0
    return math.exp(_log_comb(K, k) + _log_comb(N - K, n - k) - _log_comb(N, n))


def hypergeom_tail(N: int, K: int, n: int, k: int) -> float:
    """``P(X >= k)`` for ``X ~ Hypergeometric(N, K, n)`` via log-factorials."""
    if not (0 <= K <= N and 0 <= n <= N):
        raise ValueError("need 0 <= K, n <= N")
    if k < 0 or k > min(K, n):
        raise ValueError("k out of range")
    hi = min(K, n)
    terms = [hypergeom_pmf(N, K, n, j) for j in range(k, hi + 1)]
    return min(1.0, math.fsum(terms))


@dataclass
class FisherResult:
    odds_ratio: float
    p: float
    haldane_or: float

    def to_dict(self) -> dict:
        return asdict(self)


def fisher_exact_or(table) -> FisherResult:
    """Sample odds ratio ``ad/bc`` and the exact two-sided p at fixed margins.

    A zero in ``b`` or ``c`` gives ``inf``; ``haldane_or`` adds 0.5 to every cell.
    """
    (a, b), (c, d) = np.asarray(table, dtype=int)
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be nonnegative")
    if b * c == 0:
        odds = math.inf if a * d > 0 else math.nan
    else:
        odds = (a * d) / (b * c)
    haldane = ((a + 0.5) * (d + 0.5)) / ((b + 0.5) * (c + 0.5))
    N, K, n = a + b + c + d, a + b, a + c
    p_obs = hypergeom_pmf(N, K, n, a)
    lo, hi = max(0, n - (N - K)), min(K, n)
    probs = [hypergeom_pmf(N, K, n, j) for j in range(lo, hi + 1)]
    p = math.fsum(q for q in probs if q <= p_obs * (1 + 1e-7))
    return FisherResult(float(odds), min(1.0, p), float(haldane))


def overlap_counts(predicted, significant):
    """``(N, K, n, k)`` and the 2x2 table for predicted cells vs. significant cells."""
    P = np.asarray(predicted, dtype=bool).ravel()
    S = np.asarray(significant, dtype=bool).ravel()
    a = int(np.sum(P & S))
    b = int(np.sum(P & ~S))
    c = int(np.sum(~P & S))
    d = int(np.sum(~P & ~S))
    return (P.size, int(P.sum()), int(S.sum()), a), [[a, b], [c, d]]


def cell_pvalues(scores, alternative: str = "greater") -> np.ndarray:
    """Per-cell one-sample t-test across subjects of (cell - subject's grid mean)."""
    Y = np.asarray(scores, dtype=float)
    D = Y - Y.mean(axis=(1, 2), keepdims=True)
    res = stats.ttest_1samp(D, 0.0, axis=0, alternative=alternative)
    return np.clip(res.pvalue, np.finfo(float).tiny, 1.0)


def convergence_battery(predicted, scores, n_perm: int = 10_000, seed: int = 0,
                        q: float = 0.05, n_jobs: int = 1) -> dict:
    """Run interaction F, BH-FDR cell tests, Spearman, hypergeometric/Fisher and Mantel."""
    P = np.asarray(predicted, dtype=float)
    Y = np.asarray(scores, dtype=float)
    observed = Y.mean(axis=0)
    pair = TopographyPair(P, observed)
    pvals = cell_pvalues(Y)
    sig = bh_fdr(pvals, q)
    (N, K, n, k), table = overlap_counts(P, sig)
    out = {
        "observed": observed,
        "interaction": perm_interaction_F(Y, n_perm, seed, n_jobs).to_dict(),
        "cell_p": pvals,
        "fdr_mask": sig.astype(int),
        "spearman": spearman_perm(pair, n_perm, seed + 1, n_jobs).to_dict(),
        "mantel": mantel(P, observed, n_perm, seed + 2, n_jobs).to_dict(),
        "overlap": {"N": N, "K": K, "n": n, "k": k,
                    "p_hypergeom": hypergeom_tail(N, K, n, k) if n else 1.0},
        "fisher": fisher_exact_or(table).to_dict(),
    }
    return out
