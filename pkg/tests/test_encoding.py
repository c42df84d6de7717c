import numpy as np
import pytest

from saebrain.encoding import (CvPlan, bootstrap_ci, cv_r2, mean_over_subjects,
                               nested_cv_encode, pearson_r, ridge_fit, select_lambdas)


def _split(A, n=8):
    parts = np.array_split(A, n)
    return {f"story{i:02d}": p for i, p in enumerate(parts)}


def test_ridge_huge_lambda_shrinks_to_mean():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((50, 4)), rng.standard_normal(50)
    w, b = ridge_fit(X, y, 1e9)
    assert np.linalg.norm(w) < 1e-6
    assert np.allclose(X @ w + b, y.mean(), atol=1e-6)


def test_ridge_exact_least_squares():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 5))
    w_true = rng.standard_normal(5)
    w, b = ridge_fit(X, X @ w_true + 2.0, 0.0)
    assert np.allclose(w, w_true, atol=1e-6) and b == pytest.approx(2.0)


def test_ridge_normal_equations():
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((20, 5)), rng.standard_normal(20)
    lam = 3.0
    Xc, yc = X - X.mean(0), y - y.mean()
    w_ref = np.linalg.solve(Xc.T @ Xc + lam * np.eye(5), Xc.T @ yc)
    w, b = ridge_fit(X, y, lam)
    assert np.allclose(w, w_ref, atol=1e-8)
    assert b == pytest.approx(y.mean() - X.mean(0) @ w_ref, abs=1e-8)


def test_ridge_rank_deficient_zero_lambda():
    X = np.ones((10, 2))
    X[:, 1] = np.arange(10)
    X = np.hstack([X, X[:, 1:2]])
    with pytest.raises(np.linalg.LinAlgError):
        ridge_fit(X, np.arange(10.0), 0.0)


def test_pearson_r_cases():
    rng = np.random.default_rng(3)
    y = rng.standard_normal(30)
    assert pearson_r(y, y) == pytest.approx(1.0)
    assert pearson_r(-y + 4.0, y) == pytest.approx(-1.0)
    a, b = rng.standard_normal(30), rng.standard_normal(30)
    ref = np.sum((a - a.mean()) * (b - b.mean())) / np.sqrt(
        np.sum((a - a.mean()) ** 2) * np.sum((b - b.mean()) ** 2))
    assert abs(pearson_r(a, b) - ref) < 1e-10
    with pytest.raises(ValueError):
        pearson_r(np.ones(5), y[:5])


def test_cv_r2_formula():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    p = np.array([1.5, 2.0, 2.5, 4.0])
    assert cv_r2(p, y) == pytest.approx(1 - 0.5 / 5.0)


def test_plan_validation():
    ids = [f"s{i}" for i in range(6)]
    plan = CvPlan.leave_stories_out(ids, 3)
    plan.validate(ids)
    assert plan.stories == ids
    bad = CvPlan([(["s0", "s1"], ["s1", "s2"])])
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        CvPlan.leave_stories_out(ids[:2], 3)
    assert CvPlan.from_dict(plan.to_dict()).folds == plan.folds


def test_noiseless_planted_voxel():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((800, 6))
    y = X @ rng.standard_normal((6, 3))
    res = nested_cv_encode(_split(X), _split(y), CvPlan.leave_stories_out(_split(X), 4),
                           final_fit=False)
    assert res.r.min() >= 0.999


def test_pure_noise_voxel():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((10_000, 5))
    y = rng.standard_normal((10_000, 4))
    res = nested_cv_encode(_split(X), _split(y), CvPlan.leave_stories_out(_split(X), 4),
                           final_fit=False)
    assert np.all(np.abs(res.r) < 0.05)


def test_snr_sweep_monotone():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((1600, 8))
    s = X @ rng.standard_normal(8)
    s /= s.std()
    e = rng.standard_normal(1600)
    designs = _split(X)
    plan = CvPlan.leave_stories_out(designs, 4)
    rs = [nested_cv_encode(designs, _split(s + sd * e), plan, final_fit=False).mean_r
          for sd in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert all(a >= b for a, b in zip(rs, rs[1:]))


def test_lambda_selection_prefers_small_for_clean_data():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((400, 4))
    y = X @ np.ones(4)
    designs, voxels = _split(X), _split(y)
    lam = select_lambdas(designs, voxels, sorted(designs), (1.0, 100.0, 1e4), 3)
    assert lam.tolist() == [1.0]


def test_bootstrap_ci_cases():
    assert bootstrap_ci(np.full(10, 0.3)) == pytest.approx((0.3, 0.3))
    lo, hi = bootstrap_ci(np.array([0.0, 1.0] * 5), n_boot=2000, seed=1)
    assert 0 <= lo <= 0.5 <= hi <= 1
    x = np.random.default_rng(8).standard_normal(200)
    lo, hi = bootstrap_ci(x, n_boot=5000, seed=2)
    half = (hi - lo) / 2
    target = 1.96 * x.std(ddof=1) / np.sqrt(200)
    assert abs(half - target) < 0.2 * target
    with pytest.raises(ValueError):
        bootstrap_ci(x, n_boot=10)


def test_final_fit_and_mean_over_subjects():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((400, 3))
    y = X[:, :1] + rng.standard_normal((400, 1))
    designs = _split(X)
    res = nested_cv_encode(designs, _split(y), CvPlan.leave_stories_out(designs, 4))
    assert res.model is not None and res.fold_lambdas.shape == (4, 1)
    assert mean_over_subjects([res, res]) == pytest.approx(res.mean_r)


def test_rounding_level_column_not_amplified():
    rng = np.random.default_rng(10)
    signal = rng.standard_normal(400)
    X = np.column_stack([rng.standard_normal(400), 3.0 + 1e-15 * signal])
    y = signal[:, None]
    designs, voxels = _split(X), _split(y)
    res = nested_cv_encode(designs, voxels, CvPlan.leave_stories_out(designs, 4), final_fit=False)
    assert abs(res.mean_r) < 0.2
