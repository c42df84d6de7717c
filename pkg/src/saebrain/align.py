"""Word-to-TR alignment: HRF convolution, TR binning, DCT high-pass, censoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .matio import StoryManifest


@dataclass(frozen=True)
class HrfParams:
    """Double-gamma HRF ``g(t; a1, b1) - c * g(t; a2, b2)``.

    ``a`` are gamma shapes and ``b`` scales, so the positive lobe peaks at
    ``(a1 - 1) * b1`` seconds (5 s for the defaults) and the undershoot near
    ``(a2 - 1) * b2`` (15 s).
    """
    a1: float = 6.0
    b1: float = 1.0
    a2: float = 16.0
    b2: float = 1.0
    c: float = 1.0 / 6.0
    dt: float = 0.01
    duration: float = 32.0

    def __post_init__(self):
        for name in ("a1", "b1", "a2", "b2", "dt", "duration"):
            if getattr(self, name) <= 0:
                raise ValueError(f"HRF parameter {name} must be positive")
        if self.c < 0:
            raise ValueError("undershoot ratio c must be >= 0")


@dataclass
class TrDesign:
    matrix: np.ndarray
    story_id: str
    censored: bool = False


def double_gamma_kernel(p: HrfParams = HrfParams()):
    """Sample the HRF on ``[0, duration)`` at step ``dt``; returns ``(t, h)`` with ``max(h) == 1``."""
    t = np.arange(int(round(p.duration / p.dt))) * p.dt
    h = stats.gamma.pdf(t, p.a1, scale=p.b1) - p.c * stats.gamma.pdf(t, p.a2, scale=p.b2)
    return t, h / h.max()


def _samples_per_tr(tr_seconds: float, dt: float) -> int:
    spt = tr_seconds / dt
    n = int(round(spt))
    if abs(spt - n) > 1e-6:
        raise ValueError(f"TR {tr_seconds}s is not a whole number of dt={dt}s samples")
    return n


def convolve_and_bin(manifest: StoryManifest, word_features, hrf: HrfParams = HrfParams(),
                     n_tr: int | None = None) -> TrDesign:
    """Build the ``(n_tr, k)`` design for one story.

    Each word contributes an impulse at its onset (snapped to the nearest ``dt``
    sample) scaled by its feature values. The impulse train is convolved with
    the HRF at ``dt`` resolution and averaged within each TR window.
    """
    F = np.asarray(word_features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    onsets = manifest.word_onsets
    if F.shape[0] != onsets.size:
        raise ValueError(f"{F.shape[0]} feature rows for {onsets.size} words")
    n_tr = manifest.n_trs if n_tr is None else int(n_tr)
    spt = _samples_per_tr(manifest.tr_seconds, hrf.dt)
    n_samp = n_tr * spt
    idx = np.rint(onsets / hrf.dt).astype(int)
    if idx.size and (idx.min() < 0 or idx.max() >= n_samp):
        raise ValueError("word onset outside the scan window")

    train = np.zeros((n_samp, F.shape[1]))
    np.add.at(train, idx, F)
    _, h = double_gamma_kernel(hrf)
    conv = signal.oaconvolve(train, h[:, None], mode="full", axes=0)[:n_samp]
    binned = conv.reshape(n_tr, spt, -1).mean(axis=1)
    return TrDesign(binned, manifest.story_id)


def dct_basis(n: int, tr_seconds: float, cutoff_hz: float = 1.0 / 128) -> np.ndarray:
    """Orthonormal DCT-II regressors with frequency below ``cutoff_hz`` (constant included)."""
    # k-th regressor has frequency k / (2 n TR)
    k_max = int(np.floor(2 * n * tr_seconds * cutoff_hz - 1e-12))
    k = np.arange(0, max(k_max, 0) + 1)
    t = np.arange(n)
    B = np.cos(np.pi * (2 * t[:, None] + 1) * k[None, :] / (2 * n))
    B[:, 0] = 1.0
    return B / np.linalg.norm(B, axis=0, keepdims=True)


def highpass(design, cutoff_hz: float = 1.0 / 128, tr_seconds: float = 2.0) -> np.ndarray:
    """Project out the low-frequency DCT subspace column by column."""
    X = np.asarray(design, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    if X.shape[0] < 8:
        raise ValueError("high-pass filter needs at least 8 TRs")
    B = dct_basis(X.shape[0], tr_seconds, cutoff_hz)
    out = X - B @ (B.T @ X)
    return out[:, 0] if squeeze else out


def apply_censor(design, voxels, mask):
    """Drop TRs whose keep flag is false from both the design and the voxel data."""
    mask = np.asarray(mask, dtype=bool)
    X = np.asarray(design)
    Y = np.asarray(voxels)
    if not (X.shape[0] == Y.shape[0] == mask.size):
        raise ValueError("design, voxels and mask lengths differ")
    if not mask.any():
        raise ValueError("no samples remain after censoring")
    return X[mask], Y[mask]


def align_story(manifest: StoryManifest, word_features, hrf: HrfParams = HrfParams(),
                cutoff_hz: float | None = 1.0 / 128) -> np.ndarray:
    """Convolve, bin and (optionally) high-pass one story; censoring is applied separately."""
    X = convolve_and_bin(manifest, word_features, hrf).matrix
    if cutoff_hz:
        X = highpass(X, cutoff_hz, manifest.tr_seconds)
    return X
