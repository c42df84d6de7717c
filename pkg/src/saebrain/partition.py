"""Variance partitioning, Shapley attribution, matched baselines and dimensionality controls."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import CvPlan, EncodingResult, bootstrap_ci, nested_cv_encode


@dataclass
class PartitionResult:
    r2_full: float
    r2_type: dict
    unique: dict
    unique_ci: dict
    shared: float
    percent_total: dict
    r2_full_voxels: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "r2_full": self.r2_full,
            "r2_type": self.r2_type,
            "unique": self.unique,
            "unique_ci": {k: list(v) for k, v in self.unique_ci.items()},
            "shared": self.shared,
            "percent_total": self.percent_total,
        }


@dataclass
class ShapleyResult:
    values: dict
    n_orderings: int
    block_mad: list
    v_all: float
    v_empty: float

    @property
    def efficiency_gap(self) -> float:
        return abs(sum(self.values.values()) - (self.v_all - self.v_empty))

    def to_dict(self) -> dict:
        return {"values": self.values, "n_orderings": self.n_orderings,
                "block_mad": self.block_mad, "v_all": self.v_all, "v_empty": self.v_empty}


def _check_disjoint(subsets: dict, n_features: int):
    seen = set()
    for name, ids in subsets.items():
        ids = set(int(i) for i in ids)
        if any(i < 0 or i >= n_features for i in ids):
            raise ValueError(f"subset {name!r} has feature ids out of range")
        if ids & seen:
            raise ValueError("subsets must be disjoint")
        seen |= ids


def _n_features(designs: dict) -> int:
    return next(iter(designs.values())).shape[1]


def restrict(designs: dict, columns, weights=None) -> dict:
    """Column subset of every story design, optionally scaled per column."""
    cols = np.asarray(sorted(int(c) for c in columns), dtype=int)
    if weights is None:
        return {s: np.asarray(X)[:, cols] for s, X in designs.items()}
    w = np.asarray(weights, dtype=float)[cols]
    return {s: np.asarray(X)[:, cols] * w for s, X in designs.items()}


def encode_subset(designs, voxels, plan, columns, weights=None, **kw) -> EncodingResult:
    if len(columns) == 0:
        raise ValueError("empty feature subset")
    kw.setdefault("final_fit", False)
    return nested_cv_encode(restrict(designs, columns, weights), voxels, plan, **kw)


def _assemble(full_r2, own_r2: dict, rest_r2: dict, n_boot: int, seed: int) -> PartitionResult:
    r2_full = float(np.mean(full_r2))
    r2_type, unique, unique_ci, pct = {}, {}, {}, {}
    for name in own_r2:
        r2_type[name] = float(np.mean(own_r2[name]))
        per_voxel = full_r2 - rest_r2[name]
        unique[name] = float(np.mean(per_voxel))
        unique_ci[name] = (bootstrap_ci(per_voxel, n_boot=n_boot, seed=seed)
                           if per_voxel.size > 1 else (unique[name], unique[name]))
        pct[name] = 100.0 * unique[name] / r2_full if r2_full else float("nan")
    shared = r2_full - sum(unique.values())
    pct["shared"] = 100.0 * shared / r2_full if r2_full else float("nan")
    return PartitionResult(r2_full, r2_type, unique, unique_ci, shared, pct, full_r2)


def unique_variance(designs: dict, voxels: dict, subsets: dict, plan: CvPlan,
                    n_boot: int = 1000, seed: int = 0) -> PartitionResult:
    """Leave-one-subset-out unique variance with shared variance by identity.

    All fits use the same CV plan; R^2 is the voxel-mean held-out R^2.
    """
    k = _n_features(designs)
    _check_disjoint(subsets, k)
    all_cols = sorted({int(i) for ids in subsets.values() for i in ids})
    full = encode_subset(designs, voxels, plan, all_cols)
    own, rest_r2 = {}, {}
    for name, ids in subsets.items():
        own[name] = encode_subset(designs, voxels, plan, ids).r2
        drop = set(int(i) for i in ids)
        rest = [c for c in all_cols if c not in drop]
        rest_r2[name] = (encode_subset(designs, voxels, plan, rest).r2 if rest
                         else np.zeros_like(full.r2))
    return _assemble(full.r2, own, rest_r2, n_boot, seed)


def zscore_designs(designs: dict) -> dict:
    """Z-score every column with statistics pooled over all stories (constant columns left at 0)."""
    X = np.concatenate([np.asarray(v, dtype=np.float64) for v in designs.values()])
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return {s: (np.asarray(v, dtype=np.float64) - mu) / sd for s, v in designs.items()}


def soft_unique_variance(designs: dict, voxels: dict, weights, names, plan: CvPlan,
                         n_boot: int = 1000, seed: int = 0) -> PartitionResult:
    """Unique variance under fractional group membership.

    ``weights`` is a ``(n_features, n_groups)`` row-stochastic matrix. Columns
    are z-scored once, then group ``g`` alone is the design scaled by
    ``w[:, g]`` and "everything but ``g``" is scaled by ``1 - w[:, g]``. The
    ridge penalty acts on the scaled columns, so a feature that mostly belongs
    to ``g`` is mostly removed with it. One-hot weights reduce to the hard
    leave-one-group-out partition.
    """
    W = np.asarray(weights, dtype=np.float64)
    names = list(names)
    k = _n_features(designs)
    if W.shape != (k, len(names)):
        raise ValueError(f"weights must be ({k}, {len(names)})")
    if np.any(W < 0) or not np.allclose(W.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("weights must be row-stochastic")
    Z = zscore_designs(designs)

    def r2_of(scale):
        cols = np.flatnonzero(scale > 0)
        if cols.size == 0:
            return None
        return encode_subset(Z, voxels, plan, cols, weights=scale, standardize=False).r2

    full = r2_of(np.ones(k))
    own, rest_r2 = {}, {}
    for j, name in enumerate(names):
        o = r2_of(W[:, j])
        own[name] = np.zeros_like(full) if o is None else o
        r = r2_of(1.0 - W[:, j])
        rest_r2[name] = np.zeros_like(full) if r is None else r
    return _assemble(full, own, rest_r2, n_boot, seed)


def shared_from_table(r2_full: float, unique_values) -> float:
    """Shared variance implied by a reported full-model R^2 and unique contributions."""
    return r2_full - float(sum(unique_values))


def _all_orderings_stream(n: int, rng: np.random.Generator):
    # Shuffled passes through every permutation; plain random draws once n! is large.
    if math.factorial(n) <= 5040:
        perms = list(itertools.permutations(range(n)))
        while True:
            for i in rng.permutation(len(perms)):
                yield perms[i]
    else:
        while True:
            yield tuple(rng.permutation(n))


def shapley_sample(players, value_fn, n_orderings: int = 1000, block: int = 100,
                   seed: int = 0, tol: float | None = 1e-3) -> ShapleyResult:
    """Permutation-sampling Shapley values with a block convergence trace.

    Orderings are drawn as shuffled passes over all ``n!`` permutations (for
    ``n <= 7``), so any whole number of passes gives the exact Shapley value.
    After each block of ``block`` orderings the mean absolute change of the
    running estimate is recorded; sampling stops early once it drops below
    ``tol`` (pass ``tol=None`` to always use ``n_orderings``).

    ``value_fn`` receives a ``frozenset`` of player names and is cached.
    """
    players = list(players)
    n = len(players)
    if n == 0:
        raise ValueError("no players")
    cache = {}

    def v(coalition):
        key = frozenset(coalition)
        if key not in cache:
            cache[key] = float(value_fn(key))
        return cache[key]

    rng = np.random.default_rng(seed)
    stream = _all_orderings_stream(n, rng)
    totals = np.zeros(n)
    trace = []
    prev = None
    done = 0
    while done < n_orderings:
        this_block = min(block, n_orderings - done)
        for _ in range(this_block):
            order = next(stream)
            coalition = []
            before = v(coalition)
            for idx in order:
                coalition.append(players[idx])
                after = v(coalition)
                totals[idx] += after - before
                before = after
        done += this_block
        est = totals / done
        if prev is not None:
            trace.append(float(np.mean(np.abs(est - prev))))
            if tol is not None and trace[-1] < tol:
                break
        prev = est
    values = {p: float(totals[i] / done) for i, p in enumerate(players)}
    return ShapleyResult(values, done, trace, v(players), v([]))


def shapley_exact(players, value_fn) -> dict:
    """Exact Shapley values by enumerating all orderings (small ``n`` only)."""
    players = list(players)
    n = len(players)
    totals = dict.fromkeys(players, 0.0)
    cache = {}

    def v(c):
        key = frozenset(c)
        if key not in cache:
            cache[key] = float(value_fn(key))
        return cache[key]

    for order in itertools.permutations(players):
        coalition = []
        for p in order:
            before = v(coalition)
            coalition.append(p)
            totals[p] += v(coalition) - before
    nf = math.factorial(n)
    return {p: totals[p] / nf for p in players}


def coalition_value_fn(designs, voxels, subsets: dict, plan: CvPlan):
    """Mean held-out R^2 of the model on the union of a coalition's features (0 for empty)."""
    def value(coalition):
        cols = sorted(int(c) for name in coalition for c in subsets[name])
        if not cols:
            return 0.0
        return float(np.mean(encode_subset(designs, voxels, plan, cols).r2))
    return value


def count_matched_baseline(designs, voxels, target, plan: CvPlan, n_seeds: int = 10,
                           seed: int = 0):
    """Mean encoding over ``n_seeds`` random same-size subsets drawn from the complement of ``target``."""
    k = _n_features(designs)
    target = sorted(set(int(i) for i in target))
    complement = np.setdiff1d(np.arange(k), target)
    if complement.size == 0:
        raise ValueError("no complement to sample from")
    size = min(len(target), complement.size)
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_seeds):
        cols = np.sort(rng.choice(complement, size=size, replace=False))
        results.append(encode_subset(designs, voxels, plan, cols))
    mean_r = float(np.mean([res.mean_r for res in results]))
    return mean_r, results


def feature_variances(designs: dict) -> np.ndarray:
    X = np.concatenate([np.asarray(v, dtype=np.float64) for v in designs.values()])
    return X.var(axis=0)


def variance_matched_selection(variances, target, seed: int = 0,
                               exclude_target: bool = False) -> np.ndarray:
    """Random features, added one at a time until their summed variance reaches the target's.

    Draws from all features unless ``exclude_target``.
    """
    var = np.asarray(variances, dtype=float)
    target = sorted(set(int(i) for i in target))
    goal = float(var[target].sum()) if target else 0.0
    if goal <= 0:
        return np.array([], dtype=int)
    pool = np.arange(var.size)
    if exclude_target:
        pool = np.setdiff1d(pool, target)
    rng = np.random.default_rng(seed)
    order = rng.permutation(pool)
    csum = np.cumsum(var[order])
    n = int(np.searchsorted(csum, goal - 1e-12 * goal) + 1)
    return np.sort(order[:min(n, order.size)])


def variance_matched_baseline(designs, voxels, target, plan: CvPlan, seed: int = 0,
                              exclude_target: bool = False):
    cols = variance_matched_selection(feature_variances(designs), target, seed, exclude_target)
    if cols.size == 0:
        return cols, None
    return cols, encode_subset(designs, voxels, plan, cols)


def participation_ratio(features) -> float:
    """``(sum eig)^2 / sum eig^2`` of the sample covariance."""
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    ev = np.clip(np.linalg.eigvalsh(np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1])),
                 0.0, None)
    return float(ev.sum() ** 2 / np.sum(ev ** 2))


def participation_ratio_from_eigs(eigs) -> float:
    ev = np.asarray(eigs, dtype=float)
    return float(ev.sum() ** 2 / np.sum(ev ** 2))


@dataclass
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (k, n_features), orthonormal rows
    explained_variance: np.ndarray
    total_variance: float

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    @property
    def explained_ratio(self) -> float:
        return float(self.explained_variance.sum() / self.total_variance)


def pca_fit(features, k: int, train_rows=None) -> PcaProjection:
    """Top-``k`` principal axes estimated from ``train_rows`` only."""
    X = np.asarray(features, dtype=np.float64)
    Xt = X if train_rows is None else X[np.asarray(train_rows)]
    mu = Xt.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xt - mu, full_matrices=False)
    rank = int(np.sum(s > s.max(initial=0.0) * max(Xt.shape) * np.finfo(float).eps))
    if k < 1 or k > rank:
        raise ValueError(f"k={k} must be in [1, rank={rank}]")
    ev = s ** 2 / max(Xt.shape[0] - 1, 1)
    return PcaProjection(mu, Vt[:k], ev[:k], float(ev.sum()))


def pca_topk(features, k: int, train_rows=None) -> np.ndarray:
    """Project all rows onto the top-``k`` axes fitted on ``train_rows``."""
    return pca_fit(features, k, train_rows).transform(features)


def pca_designs(designs: dict, k: int, train_ids) -> dict:
    """Fit PCA on the training stories' rows and project every story."""
    Xtr = np.concatenate([np.asarray(designs[s], dtype=np.float64) for s in train_ids])
    proj = pca_fit(Xtr, k)
    return {s: proj.transform(X) for s, X in designs.items()}


def random_projection_control(features, target_dim: int, seed: int = 0,
                              orthogonalize: bool = False) -> np.ndarray:
    """Gaussian random projection scaled by ``1/sqrt(target_dim)``."""
    X = np.asarray(features, dtype=np.float64)
    k = X.shape[1]
    if not 1 <= target_dim <= k:
        raise ValueError("target_dim must be between 1 and the feature count")
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((k, target_dim))
    if orthogonalize:
        R = np.linalg.qr(R)[0] * np.sqrt(target_dim)
    return X @ R / np.sqrt(target_dim)
