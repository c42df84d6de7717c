import numpy as np
import pytest

from saebrain.sae import (SaeHyper, SaeModel, TrainingDivergedError, _loss_and_grads, l0_stats,
                          load_model, reconstruction_r2, sae_decode, sae_encode, sae_init,
                          sae_train, save_model)
from saebrain.synth import gen_dictionary_data


def _random_model(d=5, M=9, seed=0):
    rng = np.random.default_rng(seed)
    return SaeModel(rng.standard_normal((M, d)), rng.standard_normal((d, M)),
                    rng.standard_normal(M), rng.standard_normal(d), seed)


def test_init_deterministic():
    a, b = sae_init(4, 8, 42), sae_init(4, 8, 42)
    for name in ("W_enc", "W_dec", "b_e", "b_d"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_init_unit_columns():
    m = sae_init(16, 40, 3)
    assert np.allclose(np.linalg.norm(m.W_dec, axis=0), 1.0, atol=1e-6)


def test_init_empty_dimension():
    with pytest.raises(ValueError, match="empty dimension"):
        sae_init(0, 4, 0)


def test_encode_at_decoder_bias():
    m = _random_model()
    m.b_e[:] = 0.0
    assert np.array_equal(sae_encode(m, m.b_d), np.zeros((1, m.M)))
    m = _random_model()
    assert np.allclose(sae_encode(m, m.b_d)[0], np.maximum(m.b_e, 0.0))


def test_encode_matches_loop():
    m = _random_model()
    X = np.random.default_rng(1).standard_normal((3, m.d))
    F = sae_encode(m, X)
    for t in range(3):
        for i in range(m.M):
            pre = sum(m.W_enc[i, j] * (X[t, j] - m.b_d[j]) for j in range(m.d)) + m.b_e[i]
            assert abs(F[t, i] - max(pre, 0.0)) < 1e-6


def test_decode_cases():
    m = _random_model()
    assert np.allclose(sae_decode(m, np.zeros(m.M)), m.b_d[None])
    f = np.zeros(m.M)
    f[4] = 1.0
    assert np.allclose(sae_decode(m, f)[0], m.b_d + m.W_dec[:, 4])


def test_decode_matches_loop():
    m = _random_model()
    F = np.abs(np.random.default_rng(2).standard_normal((3, m.M)))
    Xh = sae_decode(m, F)
    for t in range(3):
        for j in range(m.d):
            v = m.b_d[j] + sum(m.W_dec[j, i] * F[t, i] for i in range(m.M))
            assert abs(Xh[t, j] - v) < 1e-6


def test_dim_mismatch():
    m = _random_model()
    with pytest.raises(ValueError, match="dim mismatch"):
        sae_encode(m, np.zeros((2, m.d + 1)))


def test_reconstruction_r2_perfect_and_constant():
    d = 6
    eye = SaeModel(np.eye(d), np.eye(d), np.zeros(d), np.zeros(d))
    X = np.abs(np.random.default_rng(0).standard_normal((50, d)))
    assert reconstruction_r2(eye, X) == pytest.approx(1.0)
    const = SaeModel(np.zeros((d, d)), np.zeros((d, d)), np.zeros(d), X.mean(axis=0))
    assert reconstruction_r2(const, X) == pytest.approx(0.0, abs=1e-12)


def test_reconstruction_r2_formula():
    m = _random_model(4, 6, 5)
    X = np.random.default_rng(7).standard_normal((9, 4))
    Xh = np.maximum((X - m.b_d) @ m.W_enc.T + m.b_e, 0) @ m.W_dec.T + m.b_d
    sse = ((X - Xh) ** 2).sum()
    sst = ((X - X.mean(0)) ** 2).sum()
    assert abs(reconstruction_r2(m, X) - (1 - sse / sst)) < 1e-8


def test_l0_stats():
    F = np.zeros((4, 5))
    mean, dead = l0_stats(F)
    assert mean == 0 and dead.tolist() == [0, 1, 2, 3, 4]
    F = np.eye(5)[[0, 2, 2, 4]]
    mean, dead = l0_stats(F)
    assert mean == 1.0 and dead.tolist() == [1, 3]
    R = np.random.default_rng(0).random((30, 8)) * (np.random.default_rng(1).random((30, 8)) > 0.7)
    mean, dead = l0_stats(R, 0.1)
    count = sum(1 for t in range(30) for i in range(8) if R[t, i] > 0.1) / 30
    assert mean == count
    assert dead.tolist() == [i for i in range(8) if not any(R[t, i] > 0.1 for t in range(30))]


def test_gradients_match_finite_differences():
    m = _random_model(4, 6, 11)
    x = np.random.default_rng(3).standard_normal((7, 4))
    l1 = 0.3
    _, grads, _, _ = _loss_and_grads(m, x, l1)
    h = 1e-6
    for name in ("W_enc", "W_dec", "b_e", "b_d"):
        P = getattr(m, name)
        num = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            lp = _loss_and_grads(m, x, l1)[0]
            P[idx] = old - h
            lm = _loss_and_grads(m, x, l1)[0]
            P[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        assert np.allclose(grads[name], num, atol=1e-5), name


def test_hyper_validation():
    with pytest.raises(ValueError):
        SaeHyper(l1=-1)
    with pytest.raises(ValueError):
        SaeHyper(steps=100, resample_every=30)


def test_unregularized_overcomplete_reconstructs():
    X, _ = gen_dictionary_data(8, 8, 3, 4000, seed=1)
    hyper = SaeHyper(l1=0.0, lr=3e-3, batch_tokens=256, steps=1500, resample_every=0,
                     lr_decay_frac=0.2)
    _, rep = sae_train(sae_init(8, 16, 0), X, hyper)
    assert rep.reconstruction_r2 >= 0.99


def test_huge_l1_kills_activity():
    X, _ = gen_dictionary_data(8, 8, 3, 2000, seed=1)
    hyper = SaeHyper(l1=1e3, lr=3e-3, batch_tokens=256, steps=300, resample_every=0)
    _, rep = sae_train(sae_init(8, 16, 0), X, hyper)
    assert rep.mean_l0 < 0.05


def test_training_deterministic_and_renormalized():
    X, _ = gen_dictionary_data(8, 8, 2, 2000, seed=4)
    hyper = SaeHyper(l1=0.1, lr=3e-3, batch_tokens=128, steps=200, resample_every=100)
    a, ra = sae_train(sae_init(8, 12, 5), X, hyper)
    b, rb = sae_train(sae_init(8, 12, 5), X, hyper)
    assert np.array_equal(a.W_dec, b.W_dec) and ra.loss_trace == rb.loss_trace
    assert np.allclose(np.linalg.norm(a.W_dec, axis=0), 1.0, atol=1e-9)


def test_resampling_revives_dead_features():
    X, _ = gen_dictionary_data(8, 8, 2, 2000, seed=4)
    m = sae_init(8, 12, 5)
    m.b_e[:4] = -100.0  # never fire
    hyper = SaeHyper(l1=0.1, lr=3e-3, batch_tokens=128, steps=400, resample_every=200)
    _, rep = sae_train(m, X, hyper)
    assert rep.n_resampled >= 4


def test_divergence_raises():
    X, _ = gen_dictionary_data(8, 8, 2, 500, seed=0)
    X = X * 1e200
    hyper = SaeHyper(l1=0.0, lr=1.0, batch_tokens=64, steps=50, resample_every=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        sae_train(sae_init(8, 8, 0), X, hyper)


def test_save_load_roundtrip(tmp_path):
    m = _random_model()
    save_model(tmp_path / "sub" / "sae.json", m)
    m2 = load_model(tmp_path / "sub" / "sae.json")
    for name in ("W_enc", "W_dec", "b_e", "b_d"):
        assert np.array_equal(getattr(m2, name), getattr(m, name).astype(np.float32))
    assert m2.seed == m.seed
