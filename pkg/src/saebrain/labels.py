"""Feature-category labels, inter-rater agreement and labeling-error audits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .topostats import SUBCATEGORIES

CATEGORIES = ("semantic", "syntactic", "lexical", "prediction", "other")

# Published rater confusion (% of 100 features per GPT-4 category).
# Rows: GPT-4 label, columns: human label, both in CATEGORIES order.
PUBLISHED_CONFUSION = np.array([
    [82, 4, 3, 2, 9],
    [3, 86, 2, 1, 8],
    [5, 3, 84, 1, 7],
    [4, 2, 1, 79, 14],
    [6, 5, 10, 17, 62],
])


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureLabel:
    category: str
    confidences: dict | None = None
    subcategory: str | None = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise LabelError(f"unknown category {self.category!r}")
        if self.subcategory is not None:
            if self.category != "semantic":
                raise LabelError("subcategory only allowed on semantic features")
            if self.subcategory not in SUBCATEGORIES:
                raise LabelError(f"unknown subcategory {self.subcategory!r}")
        if self.confidences is not None:
            bad = set(self.confidences) - set(CATEGORIES)
            if bad:
                raise LabelError(f"confidences for unknown categories {sorted(bad)}")
            vals = [float(v) for v in self.confidences.values()]
            if any(v < 0 or v > 1 for v in vals):
                raise LabelError("confidences must lie in [0, 1]")
            if abs(sum(vals) - 1.0) > 1e-6:
                raise LabelError("confidences must sum to 1")

    def confidence_vector(self) -> np.ndarray:
        if self.confidences is None:
            v = np.zeros(len(CATEGORIES))
            v[CATEGORIES.index(self.category)] = 1.0
            return v
        return np.array([float(self.confidences.get(c, 0.0)) for c in CATEGORIES])


@dataclass
class LabelSet:
    labels: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def ids(self) -> list:
        return sorted(self.labels, key=_id_key)

    def categories(self, ids=None) -> list:
        return [self.labels[i].category for i in (self.ids() if ids is None else ids)]

    def group_columns(self) -> dict:
        """Category -> sorted feature ids; ids are design column indices."""
        out = {c: [] for c in CATEGORIES}
        for i in self.ids():
            out[self.labels[i].category].append(i)
        return {c: v for c, v in out.items() if v}

    def subcategory_columns(self) -> dict:
        out = {s: [] for s in SUBCATEGORIES}
        for i in self.ids():
            sub = self.labels[i].subcategory
            if sub is not None:
                out[sub].append(i)
        return {s: v for s, v in out.items() if v}

    def to_list(self) -> list:
        rows = []
        for i in self.ids():
            lab = self.labels[i]
            row = {"feature_id": i, "category": lab.category}
            if lab.confidences is not None:
                row["confidences"] = dict(lab.confidences)
            if lab.subcategory is not None:
                row["subcategory"] = lab.subcategory
            rows.append(row)
        return rows


def _id_key(i):
    return (0, i, "") if isinstance(i, int) else (1, 0, str(i))


def labels_from_list(rows) -> LabelSet:
    out = {}
    for row in rows:
        unknown = set(row) - {"feature_id", "category", "confidences", "subcategory"}
        if unknown:
            raise LabelError(f"unknown label keys {sorted(unknown)}")
        fid = row["feature_id"]
        if fid in out:
            raise LabelError(f"duplicate feature id {fid!r}")
        out[fid] = FeatureLabel(row["category"], row.get("confidences"), row.get("subcategory"))
    return LabelSet(out)


def load_labels(path) -> LabelSet:
    with open(path, "r", encoding="utf-8") as fh:
        return labels_from_list(json.load(fh))


def _paired(a: LabelSet, b: LabelSet):
    common = sorted(set(a.labels) & set(b.labels), key=_id_key)
    if not common:
        raise LabelError("label sets share no feature ids")
    return common


def confusion_matrix(a: LabelSet, b: LabelSet) -> np.ndarray:
    """5x5 counts, rows = rater ``a``, columns = rater ``b``, over shared ids."""
    C = np.zeros((len(CATEGORIES), len(CATEGORIES)), dtype=np.int64)
    for i in _paired(a, b):
        C[CATEGORIES.index(a.labels[i].category), CATEGORIES.index(b.labels[i].category)] += 1
    return C


def kappa_from_confusion(C) -> float:
    C = np.asarray(C, dtype=np.float64)
    n = C.sum()
    if n <= 0:
        raise LabelError("empty confusion matrix")
    p_o = np.trace(C) / n
    p_e = float(np.sum(C.sum(axis=1) * C.sum(axis=0))) / n ** 2
    if math.isclose(p_e, 1.0):
        raise LabelError("chance agreement is 1; kappa undefined")
    return float((p_o - p_e) / (1.0 - p_e))


def cohen_kappa(a: LabelSet, b: LabelSet) -> float:
    return kappa_from_confusion(confusion_matrix(a, b))


def one_vs_rest(C, k: int) -> np.ndarray:
    """Collapse a confusion matrix to 2x2 for category index ``k`` (first row/col = k)."""
    C = np.asarray(C)
    rest = [j for j in range(C.shape[0]) if j != k]
    return np.array([[C[k, k], C[k, rest].sum()],
                     [C[rest, k].sum(), C[np.ix_(rest, rest)].sum()]])


def per_category_kappa_from_confusion(C, category: str) -> float:
    k = CATEGORIES.index(category)
    B = one_vs_rest(C, k)
    if B[0].sum() == 0 or B[:, 0].sum() == 0:
        raise LabelError("degenerate marginal: a rater never uses this category")
    return kappa_from_confusion(B)


def per_category_kappa(a: LabelSet, b: LabelSet, category: str) -> float:
    return per_category_kappa_from_confusion(confusion_matrix(a, b), category)


def labelsets_from_confusion(C) -> tuple[LabelSet, LabelSet]:
    """Two label sets whose confusion matrix is exactly ``C`` (ids 0..n-1)."""
    C = np.asarray(C, dtype=np.int64)
    a, b = {}, {}
    fid = 0
    for i, ca in enumerate(CATEGORIES):
        for j, cb in enumerate(CATEGORIES):
            for _ in range(int(C[i, j])):
                a[fid] = FeatureLabel(ca)
                b[fid] = FeatureLabel(cb)
                fid += 1
    return LabelSet(a), LabelSet(b)


def perturb_labels(labels: LabelSet, p: float, seed: int = 0) -> LabelSet:
    """Flip exactly ``floor(p * n)`` labels, each uniformly to one of the other categories.

    Flipped features lose their confidences and subcategory, which no longer
    describe the new category.
    """
    if not 0.0 <= p <= 1.0:
        raise LabelError("p must lie in [0, 1]")
    ids = labels.ids()
    n_flip = int(math.floor(p * len(ids) + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=n_flip, replace=False) if n_flip else []
    out = dict(labels.labels)
    for idx in chosen:
        fid = ids[int(idx)]
        others = [c for c in CATEGORIES if c != labels.labels[fid].category]
        out[fid] = FeatureLabel(others[int(rng.integers(len(others)))])
    return LabelSet(out)


def confidence_filter(labels: LabelSet, threshold: float) -> LabelSet:
    """Features whose maximum category confidence is strictly above ``threshold``."""
    kept = {}
    for fid, lab in labels.labels.items():
        if lab.confidences is None:
            raise LabelError(f"feature {fid!r} has no confidences")
        if max(float(v) for v in lab.confidences.values()) > threshold:
            kept[fid] = lab
    return LabelSet(kept)


def soft_group_weights(labels: LabelSet, n_features: int | None = None) -> np.ndarray:
    """Row-stochastic feature x category matrix; hard labels give one-hot rows.

    With ``n_features`` the rows are indexed by integer feature id and
    unlabeled features get zero rows (they are then in no group).
    """
    ids = labels.ids()
    if n_features is None:
        return np.stack([labels.labels[i].confidence_vector() for i in ids])
    W = np.zeros((n_features, len(CATEGORIES)))
    for i in ids:
        W[int(i)] = labels.labels[i].confidence_vector()
    return W


def audit_report(a: LabelSet, b: LabelSet) -> dict:
    C = confusion_matrix(a, b)
    per_cat = {}
    for c in CATEGORIES:
        try:
            per_cat[c] = per_category_kappa_from_confusion(C, c)
        except LabelError:
            per_cat[c] = None
    n = int(C.sum())
    return {
        "n_shared": n,
        "kappa": kappa_from_confusion(C),
        "per_category_kappa": per_cat,
        "confusion": C.tolist(),
        "disagreement": float(1.0 - np.trace(C) / n),
        "categories": list(CATEGORIES),
    }
