import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saebrain.labels import (CATEGORIES, PUBLISHED_CONFUSION, FeatureLabel, LabelError, LabelSet,
                             audit_report, cohen_kappa, confidence_filter, confusion_matrix,
                             labels_from_list, labelsets_from_confusion, load_labels,
                             per_category_kappa, perturb_labels, soft_group_weights)


def kappa_oracle(xs, ys):
    n = len(xs)
    p_o = sum(a == b for a, b in zip(xs, ys)) / n
    p_e = sum((xs.count(c) / n) * (ys.count(c) / n) for c in set(xs) | set(ys))
    return (p_o - p_e) / (1 - p_e)


def hard(cats):
    return LabelSet({i: FeatureLabel(c) for i, c in enumerate(cats)})


def test_identical_labels():
    a = hard(["semantic", "lexical", "other", "semantic", "prediction"])
    assert cohen_kappa(a, a) == pytest.approx(1.0)
    assert per_category_kappa(a, a, "semantic") == pytest.approx(1.0)


def test_independent_uniform_raters():
    rng = np.random.default_rng(0)
    a = hard(rng.choice(CATEGORIES, 20_000))
    b = hard(rng.choice(CATEGORIES, 20_000))
    assert abs(cohen_kappa(a, b)) < 0.02


def test_published_table_kappa_matches_count_oracle():
    a, b = labelsets_from_confusion(PUBLISHED_CONFUSION)
    assert len(a) == 500
    assert np.array_equal(confusion_matrix(a, b), PUBLISHED_CONFUSION)
    ref = kappa_oracle(a.categories(), b.categories())
    assert cohen_kappa(a, b) == pytest.approx(ref, abs=1e-12)


def test_published_table_semantic_one_vs_rest():
    a, b = labelsets_from_confusion(PUBLISHED_CONFUSION)
    xs = ["s" if c == "semantic" else "r" for c in a.categories()]
    ys = ["s" if c == "semantic" else "r" for c in b.categories()]
    assert per_category_kappa(a, b, "semantic") == pytest.approx(kappa_oracle(xs, ys), abs=1e-12)


def test_degenerate_marginal():
    a = hard(["semantic", "lexical", "other"])
    b = hard(["other", "lexical", "other"])
    with pytest.raises(LabelError, match="degenerate marginal"):
        per_category_kappa(a, b, "semantic")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(CATEGORIES), st.sampled_from(CATEGORIES)),
                min_size=2, max_size=60))
def test_kappa_property(pairs):
    xs = [p[0] for p in pairs]
    ys = [p[1] for p in pairs]
    a, b = hard(xs), hard(ys)
    try:
        k = cohen_kappa(a, b)
    except LabelError:
        return
    assert k == pytest.approx(kappa_oracle(xs, ys), abs=1e-12)


def test_perturb_counts():
    rng = np.random.default_rng(1)
    labels = hard(rng.choice(CATEGORIES, 1000))
    assert perturb_labels(labels, 0.0).to_list() == labels.to_list()
    flipped = perturb_labels(labels, 0.1, seed=2)
    diff = sum(labels.labels[i].category != flipped.labels[i].category for i in labels.ids())
    assert diff == 100
    allf = perturb_labels(labels, 1.0, seed=3)
    assert all(labels.labels[i].category != allf.labels[i].category for i in labels.ids())
    with pytest.raises(LabelError):
        perturb_labels(labels, 1.5)


def _conf(top, value):
    rest = (1.0 - value) / 4
    return {c: (value if c == top else rest) for c in CATEGORIES}


def test_confidence_filter():
    labels = LabelSet({
        0: FeatureLabel("semantic", _conf("semantic", 0.9)),
        1: FeatureLabel("lexical", _conf("lexical", 0.8)),
        2: FeatureLabel("other", _conf("other", 0.5)),
        3: FeatureLabel("syntactic", _conf("syntactic", 0.85)),
    })
    assert confidence_filter(labels, 0.8).ids() == [0, 3]
    assert len(confidence_filter(labels, 0.0)) == 4
    assert len(confidence_filter(labels, 1.0)) == 0
    with pytest.raises(LabelError):
        confidence_filter(hard(["semantic"]), 0.5)


def test_soft_group_weights():
    W = soft_group_weights(hard(["semantic", "other"]))
    assert np.array_equal(W, np.eye(5)[[0, 4]])
    uni = LabelSet({0: FeatureLabel("semantic", {c: 0.2 for c in CATEGORIES})})
    assert np.allclose(soft_group_weights(uni), 0.2)
    rng = np.random.default_rng(4)
    labs = {}
    for i in range(30):
        p = rng.dirichlet(np.ones(5))
        labs[i] = FeatureLabel(CATEGORIES[int(np.argmax(p))], dict(zip(CATEGORIES, p.tolist())))
    W = soft_group_weights(LabelSet(labs), n_features=40)
    assert np.allclose(W[:30].sum(axis=1), 1.0, atol=1e-6)
    assert not W[30:].any()


def test_feature_label_validation():
    with pytest.raises(LabelError):
        FeatureLabel("phonetic")
    with pytest.raises(LabelError):
        FeatureLabel("lexical", subcategory="affect")
    with pytest.raises(LabelError):
        FeatureLabel("semantic", {"semantic": 0.5})
    assert FeatureLabel("semantic", subcategory="affect").subcategory == "affect"


def test_load_and_columns(tmp_path):
    rows = [{"feature_id": 3, "category": "semantic", "subcategory": "event"},
            {"feature_id": 1, "category": "lexical"},
            {"feature_id": 0, "category": "semantic", "subcategory": "event"}]
    p = tmp_path / "labels.json"
    p.write_text(json.dumps(rows))
    ls = load_labels(p)
    assert ls.ids() == [0, 1, 3]
    assert ls.group_columns() == {"semantic": [0, 3], "lexical": [1]}
    assert ls.subcategory_columns() == {"event": [0, 3]}
    with pytest.raises(LabelError, match="duplicate"):
        labels_from_list(rows + [rows[0]])
    with pytest.raises(LabelError, match="unknown label keys"):
        labels_from_list([{"feature_id": 0, "category": "other", "note": "x"}])


def test_audit_report():
    a, b = labelsets_from_confusion(PUBLISHED_CONFUSION)
    rep = audit_report(a, b)
    assert rep["n_shared"] == 500
    assert rep["disagreement"] == pytest.approx(1 - 393 / 500)
    assert set(rep["per_category_kappa"]) == set(CATEGORIES)
