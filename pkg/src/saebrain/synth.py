"""Planted-ground-truth generators.

Every generator is a pure function of its seed and returns the generated data
together with a ``truth`` dict that is enough to recompute the expected
statistics independently of the pipeline under test.
"""
from __future__ import annotations

import numpy as np


def gen_dictionary_data(d: int, M_true: int, l0_true: float, T: int,
                        noise: float = 0.0, seed: int = 0,
                        amplitude=(0.0, 2.0), orthogonal: bool = False):
    """Sparse nonnegative codes times a random unit-norm dictionary, plus noise.

    Each code entry is active independently with probability ``l0_true / M_true``
    and, when active, drawn uniformly from ``amplitude``. With ``orthogonal``
    (requires ``M_true <= d``) the atoms are columns of a random orthogonal matrix.

    Returns
    -------
    X : (T, d) ndarray
    truth : dict with ``dictionary`` (d, M_true), ``codes`` (T, M_true) and the
        generating parameters.
    """
    if not 0 < l0_true <= M_true:
        raise ValueError("need 0 < l0_true <= M_true")
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((d, M_true))
    if orthogonal:
        if M_true > d:
            raise ValueError("orthogonal dictionary needs M_true <= d")
        D = np.linalg.qr(D)[0][:, :M_true]
    D /= np.linalg.norm(D, axis=0, keepdims=True)
    active = rng.random((T, M_true)) < l0_true / M_true
    lo, hi = amplitude
    codes = np.where(active, rng.uniform(lo, hi, size=(T, M_true)), 0.0)
    X = codes @ D.T
    if noise:
        X = X + noise * rng.standard_normal(X.shape)
    truth = {
        "kind": "dictionary",
        "d": d, "M_true": M_true, "l0_true": l0_true, "T": T,
        "noise": noise, "seed": seed, "amplitude": list(amplitude),
        "orthogonal": orthogonal,
        "dictionary": D, "codes": codes,
    }
    return X, truth


def dictionary_recovery(W_dec: np.ndarray, true_dict: np.ndarray) -> np.ndarray:
    """Max cosine between each true atom and any learned decoder column."""
    A = true_dict / np.linalg.norm(true_dict, axis=0, keepdims=True)
    B = W_dec / np.maximum(np.linalg.norm(W_dec, axis=0, keepdims=True), 1e-12)
    return np.max(A.T @ B, axis=1)


def gen_encoding_scenario(groups: dict, group_r2: dict, n_tr: int, n_voxels: int,
                          n_stories: int = 8, seed: int = 0, duplicate: dict | None = None):
    """TR-level designs and voxels with a planted population R^2 per feature group.

    Features are iid standard normal. For every voxel and group ``g`` a random
    weight vector is scaled so ``var(X_g w_g) = group_r2[g]``; white noise fills
    the remaining variance, so the population R^2 of ``g`` alone is exactly its
    target and the total variance of each voxel is 1.

    ``duplicate={"B": "A"}`` makes group B an exact copy of A's columns (same
    width required); B then carries no weight of its own.

    Returns ``(designs, voxels, truth)`` with designs/voxels keyed by story id.
    """
    duplicate = dict(duplicate or {})
    total = sum(group_r2.get(g, 0.0) for g in groups if g not in duplicate)
    if total > 0.95:
        raise ValueError("sum of group R^2 targets must be <= 0.95")
    rng = np.random.default_rng(seed)
    names = list(groups)
    cols, start = {}, 0
    for g in names:
        cols[g] = list(range(start, start + int(groups[g])))
        start += int(groups[g])
    k = start
    X = rng.standard_normal((n_tr, k))
    for b, a in duplicate.items():
        if groups[b] != groups[a]:
            raise ValueError("duplicated groups need equal widths")
        X[:, cols[b]] = X[:, cols[a]]
    W = np.zeros((k, n_voxels))
    for g in names:
        r2 = 0.0 if g in duplicate else float(group_r2.get(g, 0.0))
        if r2 <= 0:
            continue
        w = rng.standard_normal((len(cols[g]), n_voxels))
        w *= np.sqrt(r2) / np.linalg.norm(w, axis=0, keepdims=True)
        W[cols[g]] = w
    signal = X @ W
    noise = np.sqrt(1.0 - total) * rng.standard_normal((n_tr, n_voxels))
    Y = signal + noise
    bounds = np.linspace(0, n_tr, n_stories + 1).round().astype(int)
    ids = [f"story{i:02d}" for i in range(n_stories)]
    designs = {s: X[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)}
    voxels = {s: Y[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)}
    truth = {
        "kind": "encoding",
        "groups": cols,
        "group_r2": {g: (0.0 if g in duplicate else float(group_r2.get(g, 0.0)))
                     for g in names},
        "duplicate": duplicate,
        "total_r2": total,
        "weights": W,
        "noise_sd": float(np.sqrt(1.0 - total)),
        "seed": seed,
    }
    return designs, voxels, truth


def oracle_r2(designs: dict, voxels: dict, truth: dict, group: str | None = None) -> float:
    """R^2 of the true weights (one group or all) on generated data, averaged over voxels."""
    X = np.concatenate([designs[s] for s in sorted(designs)])
    Y = np.concatenate([voxels[s] for s in sorted(voxels)])
    W = truth["weights"]
    if group is not None:
        mask = np.zeros(W.shape[0], dtype=bool)
        mask[truth["groups"][group]] = True
        W = W * mask[:, None]
    pred = X @ W
    num = np.sum((pred - pred.mean(axis=0)) ** 2, axis=0)
    den = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    return float(np.mean(num / den))


def gen_topography_scenario(effects, n_subjects: int, seed: int = 0, noise: float = 0.02,
                            row_sd: float = 0.01, col_sd: float = 0.01,
                            subject_sd: float = 0.01, baseline: float = 0.1):
    """Per-subject 5x5 cell scores: baseline + effects + row/column/subject nuisance + noise.

    Row, column and subject offsets are additive, so they never create an
    interaction; only ``effects`` does.
    """
    E = np.asarray(effects, dtype=float)
    rng = np.random.default_rng(seed)
    rows = rng.normal(0, row_sd, size=E.shape[0])
    cols = rng.normal(0, col_sd, size=E.shape[1])
    subj = rng.normal(0, subject_sd, size=n_subjects)
    scores = (baseline + E[None] + rows[None, :, None] + cols[None, None, :]
              + subj[:, None, None] + rng.normal(0, noise, size=(n_subjects,) + E.shape))
    truth = {"kind": "topography", "effects": E, "row_offsets": rows, "col_offsets": cols,
             "subject_offsets": subj, "noise": noise, "seed": seed}
    return scores, truth


def perfect_sae(d: int, M: int, seed: int = 0):
    """SAE whose orthonormal decoder inverts exactly on nonnegative codes (``M <= d``)."""
    from .sae import SaeModel

    if M > d:
        raise ValueError("perfect SAE needs M <= d")
    rng = np.random.default_rng(seed)
    D = np.linalg.qr(rng.standard_normal((d, M)))[0][:, :M]
    return SaeModel(W_enc=D.T.copy(), W_dec=D, b_e=np.zeros(M), b_d=np.zeros(d), seed=seed)


def gen_patching_scenario(groups: dict, group_r2: dict, d: int, n_tr: int,
                          n_voxels: int, n_stories: int = 8, seed: int = 0):
    """Activations built from a perfect SAE's features, with voxels driven by feature groups.

    Codes are iid exponential (nonnegative, mean 1, variance 1), so encoding the
    activations returns them exactly. Voxel weights give every group its target
    population R^2 as in :func:`gen_encoding_scenario`.

    Returns ``(model, designs, voxels, truth)``; designs are per-story activations.
    """
    total = sum(group_r2.get(g, 0.0) for g in groups)
    if total > 0.95:
        raise ValueError("sum of group R^2 targets must be <= 0.95")
    M = int(sum(groups.values()))
    model = perfect_sae(d, M, seed)
    rng = np.random.default_rng(seed + 1)
    F = rng.exponential(1.0, size=(n_tr, M))
    cols, start = {}, 0
    for g, width in groups.items():
        cols[g] = list(range(start, start + int(width)))
        start += int(width)
    W = np.zeros((M, n_voxels))
    for g in groups:
        r2 = float(group_r2.get(g, 0.0))
        if r2 > 0:
            w = rng.standard_normal((len(cols[g]), n_voxels))
            W[cols[g]] = w * np.sqrt(r2) / np.linalg.norm(w, axis=0, keepdims=True)
    Y = (F - 1.0) @ W + np.sqrt(1.0 - total) * rng.standard_normal((n_tr, n_voxels))
    X = F @ model.W_dec.T
    bounds = np.linspace(0, n_tr, n_stories + 1).round().astype(int)
    ids = [f"story{i:02d}" for i in range(n_stories)]
    designs = {s: X[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)}
    voxels = {s: Y[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)}
    truth = {"kind": "patching", "groups": cols,
             "group_r2": {g: float(group_r2.get(g, 0.0)) for g in groups},
             "codes": F, "weights": W, "seed": seed}
    return model, designs, voxels, truth


def gen_prederr_scenario(n_features: int, d: int, n_tr: int, n_voxels: int,
                         n_subjects: int = 8, offsets=(4, 8, 12), lo_noise: float = 0.1,
                         raw_r2: float = 0.1, surprise_r2: float = 0.1,
                         n_stories: int = 8, seed: int = 0):
    """Two-layer features where voxels also respond to the unpredictable part.

    Upper-layer codes are ``f = s + e`` with a predictable part ``s`` and a
    surprise ``e`` (both standard normal). The layer ``offset`` below carries
    ``s + n`` with noise SD ``lo_noise * offset``, so the further the layer,
    the worse it predicts ``s``. Lower decoders are the upper ones plus noise,
    column-shuffled. Each subject's voxels load on ``f`` and on ``e``.

    Returns ``(hi, lo_by_offset, dec_hi, dec_lo_by_offset, voxels_by_subject, truth)``.
    """
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((n_tr, n_features))
    E = rng.standard_normal((n_tr, n_features))
    F_hi = S + E
    dec_hi = rng.standard_normal((d, n_features))
    dec_hi /= np.linalg.norm(dec_hi, axis=0, keepdims=True)
    lo, dec_lo, perms = {}, {}, {}
    for off in offsets:
        perm = rng.permutation(n_features)
        F_lo = S + lo_noise * off * rng.standard_normal((n_tr, n_features))
        D = dec_hi + 0.1 * rng.standard_normal(dec_hi.shape) / np.sqrt(d)
        lo[int(off)] = F_lo[:, perm]
        dec_lo[int(off)] = D[:, perm]
        perms[int(off)] = perm
    bounds = np.linspace(0, n_tr, n_stories + 1).round().astype(int)
    ids = [f"story{i:02d}" for i in range(n_stories)]

    def split(A):
        return {s: A[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)}

    def scaled(width, r2, var):
        w = rng.standard_normal((width, n_voxels))
        return w * np.sqrt(r2 / var) / np.linalg.norm(w, axis=0, keepdims=True)

    subjects = []
    for _ in range(n_subjects):
        Y = (F_hi @ scaled(n_features, raw_r2, 2.0) + E @ scaled(n_features, surprise_r2, 1.0)
             + np.sqrt(1.0 - raw_r2 - surprise_r2) * rng.standard_normal((n_tr, n_voxels)))
        subjects.append(split(Y))
    truth = {"kind": "prederr", "offsets": [int(o) for o in offsets], "lo_noise": lo_noise,
             "permutations": perms, "raw_r2": raw_r2, "surprise_r2": surprise_r2, "seed": seed}
    return (split(F_hi), {o: split(v) for o, v in lo.items()}, dec_hi, dec_lo, subjects, truth)


def gen_rt_scenario(n_subjects: int, n_items: int, sigma_subject: float = 0.5,
                    sigma_item: float = 0.3, sigma_resid: float = 0.5,
                    n_base: int = 3, n_block: int = 0, block_effect: float = 0.0,
                    balanced_noise: bool = False, seed: int = 0):
    """Fully crossed reading-time design (every subject reads every item).

    Base regressors get small random effects; the optional ``block`` regressors
    carry ``block_effect`` each. ``balanced_noise`` double-centres the residual
    noise on the subject x item grid so it has exactly zero subject and item
    means. Returns ``(design_dict, truth)`` in the layout read by
    :class:`saebrain.rtglmm.RtDesign`; ``truth`` also holds the realized SDs of
    the drawn random intercepts.
    """
    rng = np.random.default_rng(seed)
    subj = np.repeat(np.arange(n_subjects), n_items)
    item = np.tile(np.arange(n_items), n_subjects)
    n = subj.size
    fixed, y = {}, np.zeros(n)
    base = [f"x{j}" for j in range(n_base)]
    block = [f"z{j}" for j in range(n_block)]
    coefs = {}
    for name in base:
        fixed[name] = rng.standard_normal(n)
        coefs[name] = float(rng.normal(0, 0.2))
    for name in block:
        fixed[name] = rng.standard_normal(n)
        coefs[name] = float(block_effect)
    for name, c in coefs.items():
        y += c * fixed[name]
    u_s = rng.normal(0, sigma_subject, n_subjects) if sigma_subject > 0 else np.zeros(n_subjects)
    u_i = rng.normal(0, sigma_item, n_items) if sigma_item > 0 else np.zeros(n_items)
    e = rng.normal(0, sigma_resid, (n_subjects, n_items))
    if balanced_noise:
        e = e - e.mean(axis=1, keepdims=True) - e.mean(axis=0, keepdims=True) + e.mean()
    y += 6.0 + u_s[subj] + u_i[item] + e.ravel()
    design = {"response": y, "fixed": fixed,
              "subject": [f"s{i:03d}" for i in subj], "item": [f"w{i:04d}" for i in item],
              "blocks": {"base": base, "sae": block} if block else {"base": base}}
    truth = {"kind": "rt", "sigma_subject": sigma_subject, "sigma_item": sigma_item,
             "sigma_resid": sigma_resid, "coefs": coefs, "seed": seed,
             "realized_sd_subject": float(u_s.std()), "realized_sd_item": float(u_i.std())}
    return design, truth


PIPELINE_ATOMS = (
    # (category, subcategory) per true atom
    [("semantic", s) for s in ("concreteness", "event", "affect", "social", "spatial")
     for _ in range(2)]
    + [("syntactic", None)] * 4 + [("lexical", None)] * 3
    + [("prediction", None)] * 2 + [("other", None)]
)


def gen_pipeline_scenario(d: int = 24, n_stories: int = 6, n_trs: int = 120,
                          n_subjects: int = 3, voxels_per_region: int = 6,
                          l0_true: float = 3.0, word_rate: float = 2.0,
                          effect: float = 1.0, total_r2: float = 0.4,
                          censor_rate: float = 0.03, seed: int = 0):
    """Token activations, story timing and multi-subject voxels with a planted topography.

    Activations are sparse codes over an orthonormal dictionary whose atoms carry
    category labels (``PIPELINE_ATOMS``). Voxels in region ``r`` load on the
    HRF-aligned codes; semantic atoms of subcategory ``s`` get an extra
    ``effect * predicted[s, r]`` weight, so the encoding topography follows the
    a-priori matrix.

    Returns a dict with ``acts`` and ``manifests`` per story, ``subjects``
    (list of per-story voxel dicts), ``regions`` (voxel id -> region), and ``truth``.
    """
    from .align import align_story
    from .matio import REGIONS, StoryManifest
    from .topostats import SUBCATEGORIES, apriori_matrix

    atoms = PIPELINE_ATOMS
    M_true = len(atoms)
    rng = np.random.default_rng(seed)
    D = np.linalg.qr(rng.standard_normal((d, M_true)))[0][:, :M_true]
    ids = [f"story{i:02d}" for i in range(n_stories)]
    acts, codes, manifests = {}, {}, {}
    duration = n_trs * 2.0
    for s in ids:
        gaps = rng.uniform(0.5, 1.5, size=int(duration * word_rate * 1.2)) / word_rate
        onsets = np.round(0.5 + np.cumsum(gaps) - gaps[0], 2)
        onsets = onsets[onsets < duration - 1.0]
        C = np.where(rng.random((onsets.size, M_true)) < l0_true / M_true,
                     rng.uniform(0.0, 2.0, size=(onsets.size, M_true)), 0.0)
        codes[s] = C
        acts[s] = C @ D.T + 0.01 * rng.standard_normal((onsets.size, d))
        mask = rng.random(n_trs) >= censor_rate
        manifests[s] = StoryManifest(s, onsets, n_trs, 2.0, mask)
    tr_codes = {s: align_story(manifests[s], codes[s]) for s in ids}

    P = apriori_matrix()
    regions = {}
    n_vox = voxels_per_region * len(REGIONS)
    region_of = np.repeat(np.arange(len(REGIONS)), voxels_per_region)
    for v in range(n_vox):
        regions[str(v)] = REGIONS[region_of[v]]
    sub_of = np.array([SUBCATEGORIES.index(sc) if sc else -1 for _, sc in atoms])
    X = np.concatenate([tr_codes[s] for s in ids])
    subjects = []
    for _ in range(n_subjects):
        W = 0.3 * np.abs(rng.standard_normal((M_true, n_vox)))
        for a in range(M_true):
            if sub_of[a] >= 0:
                W[a] += effect * P[sub_of[a], region_of] * (0.5 + rng.random(n_vox))
        sig = X @ W
        sig_var = sig.var(axis=0)
        noise_sd = np.sqrt(sig_var * (1.0 - total_r2) / total_r2)
        Y = sig + noise_sd * rng.standard_normal(sig.shape)
        bounds = np.cumsum([0] + [tr_codes[s].shape[0] for s in ids])
        subjects.append({s: Y[bounds[i]:bounds[i + 1]] for i, s in enumerate(ids)})
    truth = {"kind": "pipeline", "dictionary": D, "atoms": [list(a) for a in atoms],
             "d": d, "M_true": M_true, "effect": effect, "total_r2": total_r2, "seed": seed}
    return {"acts": acts, "manifests": manifests, "subjects": subjects,
            "regions": regions, "truth": truth}


def labels_from_truth(W_dec, dictionary, atoms, floor: float = 0.9) -> list:
    """Label learned features by their best-matching planted atom (``other`` below ``floor``)."""
    A = dictionary / np.linalg.norm(dictionary, axis=0, keepdims=True)
    B = W_dec / np.maximum(np.linalg.norm(W_dec, axis=0, keepdims=True), 1e-12)
    S = B.T @ A
    rows = []
    for j in range(S.shape[0]):
        k = int(np.argmax(S[j]))
        if S[j, k] >= floor:
            cat, sub = atoms[k]
        else:
            cat, sub = "other", None
        row = {"feature_id": j, "category": cat}
        if sub:
            row["subcategory"] = sub
        rows.append(row)
    return rows
