"""Sparse autoencoder: ReLU encoder with a pre-encoder bias, linear decoder, L1 penalty.

    f(x)  = ReLU(W_enc (x - b_d) + b_e)
    x_hat = W_dec f(x) + b_d
    L     = ||x - x_hat||^2 + lam * ||f(x)||_1

Training is plain numpy in float64 with hand-derived gradients and Adam, so a
run is bitwise reproducible from ``(seed, hyper, data)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import matio

log = logging.getLogger(__name__)

DEAD_THRESHOLD = 1e-8
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class SaeModel:
    W_enc: np.ndarray  # (M, d)
    W_dec: np.ndarray  # (d, M)
    b_e: np.ndarray    # (M,)
    b_d: np.ndarray    # (d,)
    seed: int = 0

    @property
    def d(self) -> int:
        return self.W_dec.shape[0]

    @property
    def M(self) -> int:
        return self.W_dec.shape[1]

    def copy(self) -> "SaeModel":
        return SaeModel(self.W_enc.copy(), self.W_dec.copy(), self.b_e.copy(),
                        self.b_d.copy(), self.seed)

    def check(self) -> None:
        M, d = self.W_enc.shape
        if self.W_dec.shape != (d, M) or self.b_e.shape != (M,) or self.b_d.shape != (d,):
            raise ValueError("inconsistent SAE parameter shapes")
        for name in ("W_enc", "W_dec", "b_e", "b_d"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")


@dataclass
class SaeHyper:
    l1: float = 5e-4
    lr: float = 3e-4
    batch_tokens: int = 4096
    steps: int = 50_000
    resample_every: int = 5_000
    target_l0: float = 50.0
    lr_decay_frac: float = 0.2

    def __post_init__(self):
        if self.l1 < 0:
            raise ValueError("l1 coefficient must be nonnegative")
        if self.lr <= 0 or self.batch_tokens < 1 or self.steps < 1:
            raise ValueError("lr, batch_tokens and steps must be positive")
        if self.resample_every < 0 or (
                self.resample_every and self.steps % self.resample_every):
            raise ValueError("resample_every must divide steps (or be 0)")


@dataclass
class TrainReport:
    final_loss: float
    reconstruction_r2: float
    mean_l0: float
    dead_feature_count: int
    n_resampled: int
    loss_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def sae_init(d: int, M: int, seed: int) -> SaeModel:
    """Random unit-norm decoder columns, encoder initialised to the decoder transpose."""
    if d < 1 or M < 1:
        raise ValueError("empty dimension")
    rng = np.random.default_rng(seed)
    W_dec = rng.standard_normal((d, M))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    return SaeModel(
        W_enc=W_dec.T.copy(),
        W_dec=W_dec,
        b_e=np.zeros(M),
        b_d=np.zeros(d),
        seed=int(seed),
    )


def _as_batch(model: SaeModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValueError(f"dim mismatch: expected (*, {model.d}), got {X.shape}")
    return X


def sae_encode(model: SaeModel, X) -> np.ndarray:
    X = _as_batch(model, X)
    return np.maximum((X - model.b_d) @ model.W_enc.T + model.b_e, 0.0)


def sae_decode(model: SaeModel, F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[None, :]
    if F.ndim != 2 or F.shape[1] != model.M:
        raise ValueError(f"dim mismatch: expected (*, {model.M}), got {F.shape}")
    return F @ model.W_dec.T + model.b_d


def reconstruction_r2(model: SaeModel, X) -> float:
    """Pooled R^2: one minus total squared error over total variance around the column means."""
    X = _as_batch(model, X)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    sst = np.sum((X - X.mean(axis=0)) ** 2)
    if sst <= 0:
        raise ValueError("zero-variance data")
    sse = np.sum((X - sae_decode(model, sae_encode(model, X))) ** 2)
    return float(1.0 - sse / sst)


def l0_stats(F, threshold: float = 0.0):
    """Return ``(mean active count per row, ids of features never above threshold)``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    active = np.asarray(F) > threshold
    mean_l0 = float(active.sum(axis=1).mean()) if active.shape[0] else 0.0
    dead = np.flatnonzero(~active.any(axis=0))
    return mean_l0, dead


class _Adam:
    def __init__(self, params: dict, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - ADAM_BETA1 ** self.t
        c2 = 1 - ADAM_BETA2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def _loss_and_grads(model: SaeModel, x: np.ndarray, l1: float):
    B = x.shape[0]
    xc = x - model.b_d
    pre = xc @ model.W_enc.T + model.b_e
    f = np.maximum(pre, 0.0)
    err = f @ model.W_dec.T + model.b_d - x
    row_sq = np.sum(err * err, axis=1)
    loss = float(np.mean(row_sq) + l1 * np.sum(f) / B)

    g_xhat = (2.0 / B) * err
    g_f = g_xhat @ model.W_dec + l1 / B
    g_pre = g_f * (pre > 0)
    grads = {
        "W_dec": g_xhat.T @ f,
        "W_enc": g_pre.T @ xc,
        "b_e": g_pre.sum(axis=0),
        "b_d": g_xhat.sum(axis=0) - (g_pre @ model.W_enc).sum(axis=0),
    }
    return loss, grads, f, row_sq


def _batches(data_source, batch: int, rng: np.random.Generator):
    if isinstance(data_source, np.ndarray):
        X = np.asarray(data_source, dtype=np.float64)
        n = X.shape[0]
        while True:
            order = rng.permutation(n)
            for start in range(0, n - batch + 1 if n >= batch else 1, batch):
                yield X[order[start:start + batch]]
    else:
        for b in data_source:
            yield np.asarray(b, dtype=np.float64)


def _lr_at(step: int, hyper: SaeHyper) -> float:
    # constant, then linear decay to zero over the final ``lr_decay_frac`` of steps
    start = hyper.steps * (1.0 - hyper.lr_decay_frac)
    if step <= start or hyper.lr_decay_frac <= 0:
        return hyper.lr
    return hyper.lr * max(hyper.steps - step + 1, 0) / (hyper.steps - start)


def _resample(model, opt, dead, pool_x, pool_loss):
    """Point dead features at the worst-reconstructed inputs of the last window."""
    alive = np.setdiff1d(np.arange(model.M), dead)
    enc_scale = 0.2 * (np.linalg.norm(model.W_enc[alive], axis=1).mean()
                       if alive.size else 1.0)
    order = np.argsort(-pool_loss, kind="stable")
    for j, i in enumerate(dead):
        x = pool_x[order[j % len(order)]]
        direction = x - model.b_d
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            continue
        direction = direction / norm
        model.W_dec[:, i] = direction
        model.W_enc[i] = enc_scale * direction
        model.b_e[i] = 0.0
        for state in (opt.m, opt.v):
            state["W_dec"][:, i] = 0.0
            state["W_enc"][i] = 0.0
            state["b_e"][i] = 0.0


def sae_train(model: SaeModel, data_source, hyper: SaeHyper, eval_X=None,
              log_every: int = 0):
    """Train a copy of ``model`` and return ``(trained_model, TrainReport)``.

    ``data_source`` is either a ``(T, d)`` array (shuffled each epoch with the
    model seed) or an iterable of ``(B, d)`` batches. ``eval_X`` defaults to the
    array data source and is used for the report metrics.
    """
    model = model.copy()
    model.check()
    rng = np.random.default_rng(model.seed)
    if isinstance(data_source, np.ndarray):
        data_source = np.asarray(data_source, dtype=np.float64)
        if data_source.ndim != 2 or data_source.shape[1] != model.d:
            raise ValueError("dim mismatch between data and model")
        model.b_d = data_source.mean(axis=0)
        if eval_X is None:
            eval_X = data_source
    batches = _batches(data_source, hyper.batch_tokens, rng)

    names = ("W_enc", "W_dec", "b_e", "b_d")
    params = {k: getattr(model, k) for k in names}
    opt = _Adam(params, hyper.lr)
    fired = np.zeros(model.M, dtype=bool)
    pool_cap = max(4 * model.M, hyper.batch_tokens)
    pool_x, pool_loss = [], []
    trace = []
    n_resampled = 0
    first = True
    loss = float("nan")

    for step in range(1, hyper.steps + 1):
        try:
            x = next(batches)
        except StopIteration:
            log.warning("data source exhausted at step %d", step)
            break
        if first and not isinstance(data_source, np.ndarray):
            model.b_d[:] = x.mean(axis=0)
        first = False

        loss, grads, f, row_sq = _loss_and_grads(model, x, hyper.l1)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became non-finite at step {step}; last finite "
                f"loss {trace[-1] if trace else 'n/a'}, lr={hyper.lr}")
        trace.append(loss)
        opt.lr = _lr_at(step, hyper)
        opt.step(params, grads)
        model.W_dec /= np.maximum(np.linalg.norm(model.W_dec, axis=0), 1e-12)

        fired |= (f > DEAD_THRESHOLD).any(axis=0)
        if hyper.resample_every:
            worst = np.argsort(-row_sq, kind="stable")[:8]
            pool_x.extend(x[worst])
            pool_loss.extend(row_sq[worst])
            if len(pool_x) > pool_cap:
                del pool_x[:-pool_cap], pool_loss[:-pool_cap]
            if step % hyper.resample_every == 0 and step < hyper.steps:
                dead = np.flatnonzero(~fired)
                if dead.size:
                    _resample(model, opt, dead, np.asarray(pool_x),
                              np.asarray(pool_loss))
                    n_resampled += int(dead.size)
                    log.info("step %d: resampled %d dead features", step, dead.size)
                fired[:] = False
                pool_x, pool_loss = [], []
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6f", step, loss)

    if eval_X is not None:
        Fe = sae_encode(model, eval_X)
        mean_l0, dead = l0_stats(Fe, DEAD_THRESHOLD)
        r2 = reconstruction_r2(model, eval_X)
    else:
        mean_l0, dead = l0_stats(f, DEAD_THRESHOLD)
        r2 = float("nan")
    report = TrainReport(
        final_loss=float(loss),
        reconstruction_r2=r2,
        mean_l0=mean_l0,
        dead_feature_count=int(dead.size),
        n_resampled=n_resampled,
        loss_trace=trace,
    )
    return model, report


def save_model(path, model: SaeModel) -> None:
    """Write ``<stem>.json`` metadata plus one NMAT1 block per parameter."""
    path = Path(path)
    stem = path.with_suffix("")
    blocks = {}
    for name in ("W_enc", "W_dec", "b_e", "b_d"):
        fname = f"{stem.name}.{name}.nmat"
        matio.write_matrix(stem.parent / fname, np.atleast_2d(getattr(model, name)))
        blocks[name] = fname
    matio.write_json(stem.with_suffix(".json"), {
        "format": "sae-v1",
        "d": model.d,
        "M": model.M,
        "seed": model.seed,
        "blocks": blocks,
    })


def load_model(path) -> SaeModel:
    path = Path(path)
    meta = matio.read_json(path)
    if meta.get("format") != "sae-v1":
        raise ValueError(f"{path}: not an sae-v1 model file")
    arr = {k: matio.read_matrix(path.parent / v).astype(np.float64)
           for k, v in meta["blocks"].items()}
    model = SaeModel(
        W_enc=arr["W_enc"],
        W_dec=arr["W_dec"],
        b_e=arr["b_e"].ravel(),
        b_d=arr["b_d"].ravel(),
        seed=int(meta["seed"]),
    )
    if model.d != meta["d"] or model.M != meta["M"]:
        raise ValueError("model metadata does not match weight blocks")
    model.check()
    return model
