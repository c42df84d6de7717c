"""Mean-ablation of SAE feature subsets and its effect on encoding performance.

Ablation happens in decoder space: each ablated feature's activation is
replaced by its corpus mean and the difference is pushed back through its
decoder column, leaving the SAE reconstruction error untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import (CvPlan, EncodingResult, _stack, bootstrap_ci, fit_fold,
                       nested_cv_encode, pearson_r_safe)
from .partition import encode_subset, variance_matched_selection
from .sae import SaeModel, sae_encode

MODES = ("mean_feature", "variance_matched_random", "count_matched_random")


@dataclass(frozen=True)
class AblationSpec:
    subset: tuple
    mode: str = "mean_feature"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        object.__setattr__(self, "subset", tuple(sorted(int(i) for i in self.subset)))
        if len(set(self.subset)) != len(self.subset):
            raise ValueError("duplicate feature ids in subset")

    def to_dict(self) -> dict:
        return {"subset": list(self.subset), "mode": self.mode, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        unknown = set(d) - {"subset", "mode", "seed"}
        if unknown:
            raise ValueError(f"unknown ablation keys {sorted(unknown)}")
        return cls(tuple(d["subset"]), d.get("mode", "mean_feature"), int(d.get("seed", 0)))


@dataclass
class DeltaR2:
    per_voxel: np.ndarray
    mean: float
    ci: tuple
    r2_original: np.ndarray
    r2_ablated: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci": list(self.ci),
                "per_voxel": self.per_voxel.tolist(),
                "r2_original_mean": float(np.mean(self.r2_original)),
                "r2_ablated_mean": float(np.mean(self.r2_ablated))}


def resolve_subset(spec: AblationSpec, codes, M: int | None = None) -> np.ndarray:
    """Feature ids actually ablated: the subset itself or a random control matched to it."""
    F = np.asarray(codes, dtype=np.float64)
    M = F.shape[1] if M is None else M
    if any(i < 0 or i >= M for i in spec.subset):
        raise ValueError("ablation subset has feature ids out of range")
    if spec.mode == "mean_feature":
        return np.asarray(spec.subset, dtype=int)
    if spec.mode == "variance_matched_random":
        return variance_matched_selection(F.var(axis=0), spec.subset, seed=spec.seed)
    complement = np.setdiff1d(np.arange(M), spec.subset)
    if complement.size < len(spec.subset):
        raise ValueError("complement smaller than the subset")
    rng = np.random.default_rng(spec.seed)
    return np.sort(rng.choice(complement, size=len(spec.subset), replace=False))


def mean_ablate(model: SaeModel, X, subset, means=None, codes=None, return_codes: bool = False):
    """``X - sum_{i in S} (f_i - mean_i) * W_dec[:, i]``.

    ``means`` defaults to the mean code over ``X`` itself; pass corpus means when
    ``X`` is only part of the corpus. With ``codes`` the supplied activations are
    used instead of re-encoding, and ``return_codes`` also returns the codes with
    the ablated entries set to their means, so a second ablation is a no-op.
    """
    X = np.asarray(X, dtype=np.float64)
    F = sae_encode(model, X) if codes is None else np.asarray(codes, dtype=np.float64)
    S = np.asarray(sorted(int(i) for i in subset), dtype=int)
    if means is None:
        means = F.mean(axis=0)
    means = np.asarray(means, dtype=np.float64)
    if S.size == 0:
        out = X.copy()
        return (out, F.copy()) if return_codes else out
    diff = F[:, S] - means[S]
    out = X - diff @ model.W_dec[:, S].T
    if return_codes:
        G = F.copy()
        G[:, S] = means[S]
        return out, G
    return out


def ablate_stories(model: SaeModel, acts: dict, subset, means=None) -> dict:
    """Ablate every story's token activations with one set of corpus means."""
    codes = {s: sae_encode(model, np.asarray(a, dtype=np.float64)) for s, a in acts.items()}
    if means is None:
        means = np.concatenate([codes[s] for s in sorted(codes)]).mean(axis=0)
    return {s: mean_ablate(model, acts[s], subset, means=means, codes=codes[s]) for s in acts}


def squared_r(P, Y) -> np.ndarray:
    return pearson_r_safe(P, Y) ** 2


def delta_r2(encoder, X, X_ablated, y, n_boot: int = 1000, seed: int = 0) -> DeltaR2:
    """Per-voxel ``r^2(encoder(X_ablated), y) - r^2(encoder(X), y)`` for a frozen encoder."""
    Y = np.asarray(y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    r2_o = squared_r(encoder.predict(X), Y)
    r2_a = squared_r(encoder.predict(X_ablated), Y)
    return _delta(r2_o, r2_a, n_boot, seed)


def _delta(r2_o, r2_a, n_boot, seed) -> DeltaR2:
    d = r2_a - r2_o
    ci = bootstrap_ci(d, n_boot=n_boot, seed=seed) if d.size > 1 else (float(d[0]),) * 2
    return DeltaR2(d, float(np.mean(d)), ci, r2_o, r2_a)


def cv_delta_r2(designs: dict, ablated: dict, voxels: dict, plan: CvPlan,
                standardize: bool = True, n_boot: int = 1000, seed: int = 0) -> DeltaR2:
    """Frozen-encoder Delta r^2 scored on held-out stories.

    Each outer fold fits on unablated training stories and predicts its test
    stories twice (original and ablated); the concatenated held-out predictions
    are scored per voxel.
    """
    plan.validate(sorted(designs))
    po, pa, ys = [], [], []
    for tr, te in plan.folds:
        enc = fit_fold(designs, voxels, tr, plan.lambdas, plan.inner_folds, standardize)
        po.append(enc.predict(_stack(designs, te)))
        pa.append(enc.predict(_stack(ablated, te)))
        y = _stack(voxels, te)
        ys.append(y[:, None] if y.ndim == 1 else y)
    Y = np.concatenate(ys)
    return _delta(squared_r(np.concatenate(po), Y), squared_r(np.concatenate(pa), Y),
                  n_boot, seed)


def refit_on_ablated(ablated: dict, voxels: dict, plan: CvPlan, **kw) -> EncodingResult:
    """Full nested-CV encoding refit on ablated designs."""
    return nested_cv_encode(ablated, voxels, plan, **kw)


def exclusive_subset_model(designs: dict, voxels: dict, columns, plan: CvPlan, **kw) -> EncodingResult:
    """Encoding model trained from scratch on the given columns only."""
    return encode_subset(designs, voxels, plan, columns, **kw)


def patch_report(model: SaeModel, acts: dict, voxels: dict, spec: AblationSpec,
                 plan: CvPlan, n_controls: int = 10, n_boot: int = 1000,
                 align_fn=None) -> dict:
    """Frozen and refit results for one subset plus the matched random controls.

    ``acts`` are per-story activation matrices. Ablation happens on them
    directly; ``align_fn`` (story dict -> story dict) then maps both original
    and ablated activations to the voxel sampling rate. Without it the rows
    are taken to be TRs already.
    """
    acts = {s: np.asarray(v, dtype=np.float64) for s, v in acts.items()}
    codes = np.concatenate([sae_encode(model, acts[s]) for s in sorted(acts)])
    to_tr = align_fn or (lambda blocks: blocks)
    designs = to_tr(acts)

    def frozen_delta(ids):
        abl = to_tr(ablate_stories(model, acts, ids))
        return abl, cv_delta_r2(designs, abl, voxels, plan, n_boot=n_boot, seed=spec.seed)

    ids = resolve_subset(spec, codes, model.M)
    abl, frozen = frozen_delta(ids)
    refit = refit_on_ablated(abl, voxels, plan, final_fit=False, n_boot=n_boot)
    out = {
        "spec": spec.to_dict(),
        "ablated_ids": ids.tolist(),
        "frozen": frozen.to_dict(),
        "refit": refit.summary(),
    }
    if spec.mode == "mean_feature" and n_controls > 0:
        controls = {}
        for mode in ("variance_matched_random", "count_matched_random"):
            deltas = []
            for k in range(n_controls):
                cspec = AblationSpec(spec.subset, mode, spec.seed + 1 + k)
                deltas.append(frozen_delta(resolve_subset(cspec, codes, model.M))[1].mean)
            controls[mode] = {"mean": float(np.mean(deltas)), "runs": deltas}
        out["controls"] = controls
    return out
