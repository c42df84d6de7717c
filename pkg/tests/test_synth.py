import numpy as np
import pytest

from saebrain.encoding import CvPlan, nested_cv_encode
from saebrain.sae import sae_encode
from saebrain.synth import (PIPELINE_ATOMS, dictionary_recovery, gen_dictionary_data,
                            gen_encoding_scenario, gen_patching_scenario, gen_pipeline_scenario,
                            gen_prederr_scenario, gen_rt_scenario, gen_topography_scenario,
                            labels_from_truth, oracle_r2, perfect_sae)
from saebrain.topostats import TopographyPair, apriori_matrix, spearman_perm


def test_dictionary_single_active_rows_are_atoms():
    X, truth = gen_dictionary_data(10, 6, 1.0, 2000, noise=0.0, seed=0)
    C, D = truth["codes"], truth["dictionary"]
    one = np.flatnonzero((C > 0).sum(axis=1) == 1)
    assert one.size > 100
    for t in one[:50]:
        j = int(np.flatnonzero(C[t])[0])
        assert np.allclose(X[t], C[t, j] * D[:, j])
    assert np.allclose(np.linalg.norm(D, axis=0), 1.0)


def test_dictionary_l0_and_determinism():
    X, truth = gen_dictionary_data(32, 64, 4.0, 10_000, noise=0.01, seed=1)
    assert abs((truth["codes"] > 0).sum(axis=1).mean() / 4.0 - 1) < 0.05
    X2, _ = gen_dictionary_data(32, 64, 4.0, 10_000, noise=0.01, seed=1)
    assert np.array_equal(X, X2)
    with pytest.raises(ValueError):
        gen_dictionary_data(4, 4, 5.0, 10)


def test_dictionary_recovery_identity():
    _, truth = gen_dictionary_data(16, 8, 2.0, 10, seed=2, orthogonal=True)
    D = truth["dictionary"]
    assert np.allclose(D.T @ D, np.eye(8), atol=1e-10)
    assert np.allclose(dictionary_recovery(D[:, ::-1], D), 1.0)


def test_encoding_scenario_population_r2():
    designs, voxels, truth = gen_encoding_scenario({"A": 10, "B": 10}, {"A": 0.3, "B": 0.1},
                                                   n_tr=10_000, n_voxels=30, seed=3)
    assert abs(oracle_r2(designs, voxels, truth, "A") - 0.3) < 0.02
    assert abs(oracle_r2(designs, voxels, truth, "B") - 0.1) < 0.02
    assert abs(oracle_r2(designs, voxels, truth) - 0.4) < 0.02
    with pytest.raises(ValueError):
        gen_encoding_scenario({"A": 2}, {"A": 0.99}, 10, 1)


def test_encoding_scenario_null():
    designs, voxels, _ = gen_encoding_scenario({"A": 5}, {"A": 0.0}, n_tr=4000, n_voxels=6,
                                               seed=4)
    res = nested_cv_encode(designs, voxels, CvPlan.leave_stories_out(designs, 4),
                           final_fit=False)
    assert np.all(np.abs(res.r) < 0.06)


def test_encoding_scenario_duplicate():
    designs, _, truth = gen_encoding_scenario({"A": 3, "B": 3}, {"A": 0.2}, 100, 2, seed=5,
                                              duplicate={"B": "A"})
    X = designs["story00"]
    assert np.array_equal(X[:, truth["groups"]["A"]], X[:, truth["groups"]["B"]])


def test_topography_determinism_and_additivity():
    a, _ = gen_topography_scenario(np.zeros((5, 5)), 4, seed=6)
    b, _ = gen_topography_scenario(np.zeros((5, 5)), 4, seed=6)
    assert np.array_equal(a, b)
    s, truth = gen_topography_scenario(np.zeros((5, 5)), 3, seed=7, noise=0.0)
    expected = (0.1 + truth["row_offsets"][None, :, None] + truth["col_offsets"][None, None, :]
                + truth["subject_offsets"][:, None, None])
    assert np.allclose(s, expected)


def test_topography_spearman_expectation():
    P = apriori_matrix()
    rhos = []
    for seed in range(40):
        scores, _ = gen_topography_scenario(0.05 * P, 8, seed=seed)
        rhos.append(spearman_perm(TopographyPair(P, scores.mean(axis=0)), 10, seed=0).statistic)
    assert np.mean(rhos) >= 0.6


def test_perfect_sae_inverts_codes():
    m = perfect_sae(12, 8, 0)
    F = np.random.default_rng(0).exponential(1.0, (30, 8))
    assert np.allclose(sae_encode(m, F @ m.W_dec.T), F)
    with pytest.raises(ValueError):
        perfect_sae(4, 8)


def test_patching_scenario_truth():
    model, designs, voxels, truth = gen_patching_scenario({"a": 4, "n": 4}, {"a": 0.3}, d=10,
                                                          n_tr=400, n_voxels=3, seed=1)
    X = np.concatenate([designs[s] for s in sorted(designs)])
    assert np.allclose(sae_encode(model, X), truth["codes"])
    assert not truth["weights"][truth["groups"]["n"]].any()


def test_prederr_scenario_layout():
    hi, lo, dec_hi, dec_lo, subjects, truth = gen_prederr_scenario(6, 16, 240, 4, n_subjects=2,
                                                                   seed=2)
    assert set(lo) == {4, 8, 12} and len(subjects) == 2
    perm = truth["permutations"][8]
    assert dec_lo[8].shape == dec_hi.shape
    cos = np.sum(dec_hi[:, perm] * dec_lo[8], axis=0) / np.linalg.norm(dec_lo[8], axis=0)
    assert np.all(cos > 0.9)


def test_rt_scenario_balanced_noise():
    design, truth = gen_rt_scenario(6, 7, sigma_subject=0.0, sigma_item=0.0,
                                    balanced_noise=True, n_base=0, seed=3)
    y = np.asarray(design["response"]).reshape(6, 7)
    assert np.allclose(y.mean(axis=1), 6.0) and np.allclose(y.mean(axis=0), 6.0)
    assert truth["realized_sd_subject"] == 0.0


def test_pipeline_scenario_and_labels():
    sc = gen_pipeline_scenario(seed=3)
    sc2 = gen_pipeline_scenario(seed=3)
    assert sorted(sc["acts"]) == sorted(sc["manifests"])
    for s in sc["acts"]:
        assert np.array_equal(sc["acts"][s], sc2["acts"][s])
        assert sc["acts"][s].shape[0] == sc["manifests"][s].word_onsets.size
    D = sc["truth"]["dictionary"]
    rows = labels_from_truth(D, D, PIPELINE_ATOMS)
    assert [r["category"] for r in rows] == [a[0] for a in PIPELINE_ATOMS]
    assert rows[0]["subcategory"] == "concreteness"
    # an unrelated decoder matches nothing
    rnd = np.linalg.qr(np.random.default_rng(0).standard_normal((D.shape[0], 5)))[0]
    rnd = rnd - D @ (D.T @ rnd)
    assert all(r["category"] == "other" for r in labels_from_truth(rnd, D, PIPELINE_ATOMS))
