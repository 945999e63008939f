"""Model training (BPTT + adaptive per-parameter updates), evaluation in
denormalized units, and forecast emission."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..datalake import SEQ_LEN, Normalization, SequenceWindow, SeriesKey
from ..errors import Diverged, EmptySplit, ShapeMismatch
from ..simulator import WINDOW_S
from .nets import LstmParams, backward_batch, forward_batch, init_lstm_params

MAPE_FLOOR = 1.0  # vehicles; guards percentage errors on near-zero night flows


@dataclass(frozen=True)
class Hyper:
    hidden_dim: int = 64
    epochs: int = 200
    learning_rate: float = 1e-3
    batch: int = 32
    seed: int = 0
    patience: int = 10

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(doc: dict) -> "Hyper":
        return Hyper(**doc)


@dataclass(frozen=True)
class EvalMetrics:
    rmse: float
    mae: float
    mape: float  # percent
    n: int

    def to_json(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape, "n": self.n}

    @staticmethod
    def from_json(doc: dict) -> "EvalMetrics":
        return EvalMetrics(rmse=doc["rmse"], mae=doc["mae"],
                           mape=doc["mape"], n=doc["n"])


@dataclass(frozen=True)
class Forecast:
    key: SeriesKey
    horizon: int                # windows ahead
    value: float                # vehicles per 5 minutes, clamped at 0
    issued_at: float            # window_start of the last input

    def to_json(self) -> dict:
        return {"key": str(self.key), "h": self.horizon,
                "value": self.value, "issued_at": self.issued_at}


@dataclass
class TrainedModel:
    kind: str                          # "lstm" | "bilstm"
    params: tuple[LstmParams, ...]
    norm: Normalization
    hyper: Hyper
    val_metrics: EvalMetrics | None = None
    version: str = "v0"

    @property
    def hidden_dim(self) -> int:
        return self.params[0].hidden_dim

    @property
    def input_dim(self) -> int:
        return self.params[0].input_dim


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_rmse: float
    best_val_rmse: float


class AdamState:
    """Per-parameter first/second moment estimates (beta1 0.9, beta2 0.999)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [{name: np.zeros_like(a) for name, a in p.arrays()} for p in params]
        self.v = [{name: np.zeros_like(a) for name, a in p.arrays()} for p in params]

    def step(self, params, grads, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for name, arr in p.arrays():
                gr = g[name]
                m[name] = self.beta1 * m[name] + (1.0 - self.beta1) * gr
                v[name] = self.beta2 * v[name] + (1.0 - self.beta2) * gr * gr
                update = lr * (m[name] / b1c) / (np.sqrt(v[name] / b2c) + self.eps)
                arr -= update


def _arrays_from(windows: list[SequenceWindow]):
    X = np.asarray([w.inputs for w in windows], dtype=float)[..., None]
    y = np.asarray([w.target for w in windows], dtype=float)
    return X, y


def _denorm_coeffs(windows, norm: Normalization):
    lo = np.empty(len(windows))
    scale = np.empty(len(windows))
    from ..datalake import NORM_EPS
    for k, w in enumerate(windows):
        a, b = norm.bounds[w.key]
        lo[k] = a
        scale[k] = max(b - a, NORM_EPS)
    return lo, scale


def metrics_from_predictions(y_true, y_pred) -> EvalMetrics:
    """RMSE, MAE, MAPE of paired actual/predicted values (vehicles)."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise EmptySplit("need matching non-empty actual/predicted arrays")
    err = y_true - y_pred
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    mape = float(100.0 * np.mean(np.abs(err) / np.maximum(np.abs(y_true), MAPE_FLOOR)))
    return EvalMetrics(rmse=rmse, mae=mae, mape=mape, n=len(y_true))


def _init_params(kind: str, rng, input_dim: int, hidden_dim: int):
    if kind == "lstm":
        return (init_lstm_params(rng, input_dim, hidden_dim),)
    if kind == "bilstm":
        return (init_lstm_params(rng, input_dim, hidden_dim),
                init_lstm_params(rng, input_dim, hidden_dim))
    raise ValueError(f"unknown model kind {kind!r}")


def train(kind: str, dataset, hyper: Hyper = Hyper()) -> tuple[TrainedModel, list[EpochLog]]:
    """Minimize train MSE with BPTT; early-stop on denormalized val RMSE;
    return the parameters at the best validation epoch. Deterministic per seed."""
    if not dataset.train:
        raise EmptySplit("training split is empty")
    rng = np.random.default_rng(hyper.seed)
    X, y = _arrays_from(dataset.train)
    params = _init_params(kind, rng, X.shape[2], hyper.hidden_dim)
    adam = AdamState(params)
    val_windows = dataset.val if dataset.val else dataset.train
    Xv, yv = _arrays_from(val_windows)
    lo_v, scale_v = _denorm_coeffs(val_windows, dataset.normalization)
    yv_raw = yv * scale_v + lo_v

    log: list[EpochLog] = []
    best = float("inf")
    best_params = tuple(p.copy() for p in params)
    since_best = 0
    n = len(dataset.train)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        sq_sum = 0.0
        for s in range(0, n, hyper.batch):
            idx = order[s:s + hyper.batch]
            xb, yb = X[idx], y[idx]
            preds, caches = forward_batch(kind, params, xb)
            err = preds - yb
            sq_sum += float(np.sum(err ** 2))
            dy = 2.0 * err / len(idx)
            grads = backward_batch(kind, params, caches, dy)
            adam.step(params, grads, hyper.learning_rate)
        train_mse = sq_sum / n
        preds_v, _ = forward_batch(kind, params, Xv)
        val_rmse = float(np.sqrt(np.mean((preds_v * scale_v + lo_v - yv_raw) ** 2)))
        if not (np.isfinite(train_mse) and np.isfinite(val_rmse)):
            raise Diverged(f"non-finite loss at epoch {epoch}")
        if val_rmse < best:
            best = val_rmse
            best_params = tuple(p.copy() for p in params)
            since_best = 0
        else:
            since_best += 1
        log.append(EpochLog(epoch=epoch, train_mse=train_mse,
                            val_rmse=val_rmse, best_val_rmse=best))
        if since_best >= hyper.patience:
            break

    model = TrainedModel(kind=kind, params=best_params,
                         norm=dataset.normalization, hyper=hyper)
    model.val_metrics = evaluate(model, val_windows)
    return model, log


def evaluate(model: TrainedModel, split: list[SequenceWindow],
             encoded_with: Normalization | None = None) -> EvalMetrics:
    """RMSE/MAE/MAPE on denormalized values. `encoded_with` names the
    normalization the windows carry when it differs from the model's own
    (the inputs are re-encoded so the model sees its native scale)."""
    if not split:
        raise EmptySplit("cannot evaluate an empty split")
    src = encoded_with or model.norm
    X, y = _arrays_from(split)
    lo_s, scale_s = _denorm_coeffs(split, src)
    y_raw = y * scale_s + lo_s
    if encoded_with is not None:
        lo_m, scale_m = _denorm_coeffs(split, model.norm)
        X = (X * scale_s[:, None, None] + lo_s[:, None, None]
             - lo_m[:, None, None]) / scale_m[:, None, None]
    else:
        lo_m, scale_m = lo_s, scale_s
    preds, _ = forward_batch(model.kind, model.params, X)
    preds_raw = np.maximum(preds * scale_m + lo_m, 0.0)
    return metrics_from_predictions(y_raw, preds_raw)


def predict(model: TrainedModel, window: SequenceWindow) -> Forecast:
    """One-window-ahead forecast in vehicles/5min, clamped at zero."""
    if len(window.inputs) != SEQ_LEN:
        raise ShapeMismatch(f"window must carry {SEQ_LEN} inputs")
    X = np.asarray(window.inputs, dtype=float)[None, :, None]
    preds, _ = forward_batch(model.kind, model.params, X)
    value = max(0.0, model.norm.denormalize(float(preds[0]), window.key))
    return Forecast(key=window.key, horizon=1, value=value,
                    issued_at=window.start + (SEQ_LEN - 1) * WINDOW_S)


def predict_multi(model: TrainedModel, window: SequenceWindow, h: int) -> list[Forecast]:
    """Recursive multi-step forecast: each prediction is fed back as the next
    input in normalized space."""
    if h < 1:
        raise ValueError("horizon must be >= 1")
    buf = list(window.inputs)
    issued = window.start + (SEQ_LEN - 1) * WINDOW_S
    out = []
    for step in range(1, h + 1):
        X = np.asarray(buf[-SEQ_LEN:], dtype=float)[None, :, None]
        preds, _ = forward_batch(model.kind, model.params, X)
        normed = float(preds[0])
        buf.append(normed)
        value = max(0.0, model.norm.denormalize(normed, window.key))
        out.append(Forecast(key=window.key, horizon=step, value=value,
                            issued_at=issued))
    return out


def encode_window(model: TrainedModel, key: SeriesKey, start: float,
                  raw_values: list[float]) -> SequenceWindow:
    """Build a model-ready window from raw (vehicles/5min) values."""
    if len(raw_values) != SEQ_LEN:
        raise ShapeMismatch(f"need exactly {SEQ_LEN} values")
    normed = tuple(model.norm.normalize(v, key) for v in raw_values)
    # target unused at inference; carry the persistence value
    return SequenceWindow(inputs=normed, target=normed[-1], key=key, start=start)
