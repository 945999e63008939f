"""LSTM / BiLSTM recurrences with backpropagation through time.

Everything is plain float64 numpy. The forward pass follows the standard
gated recurrence: i, f, o are logistic gates, g the tanh candidate,
c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t), with h_0 = c_0 = 0; a linear head
maps the final hidden state to a scalar.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from ..errors import ShapeMismatch

GATE_NAMES = ("i", "f", "g", "o")
PARAM_NAMES = (
    "W_i", "W_f", "W_g", "W_o",
    "U_i", "U_f", "U_g", "U_o",
    "b_i", "b_f", "b_g", "b_o",
    "w_out", "b_out",
)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class LstmParams:
    """One direction's gate weights plus its scalar output head."""

    W_i: np.ndarray
    W_f: np.ndarray
    W_g: np.ndarray
    W_o: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_g: np.ndarray
    U_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray  # shape ()

    def __post_init__(self):
        H, D = self.W_i.shape
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ShapeMismatch(f"{name} contains non-finite values")
        for g in GATE_NAMES:
            if getattr(self, f"W_{g}").shape != (H, D):
                raise ShapeMismatch(f"W_{g} shape mismatch")
            if getattr(self, f"U_{g}").shape != (H, H):
                raise ShapeMismatch(f"U_{g} shape mismatch")
            if getattr(self, f"b_{g}").shape != (H,):
                raise ShapeMismatch(f"b_{g} shape mismatch")
        if self.w_out.shape != (H,):
            raise ShapeMismatch("w_out shape mismatch")

    @property
    def hidden_dim(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1]

    def arrays(self):
        for name in PARAM_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "LstmParams":
        return LstmParams(**{name: arr.copy() for name, arr in self.arrays()})


def init_lstm_params(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> LstmParams:
    H, D = hidden_dim, input_dim
    s_in = 1.0 / math.sqrt(D + H)
    kw = {}
    for g in GATE_NAMES:
        kw[f"W_{g}"] = rng.standard_normal((H, D)) * s_in
        kw[f"U_{g}"] = rng.standard_normal((H, H)) * s_in
        kw[f"b_{g}"] = np.zeros(H)
    kw["b_f"] = np.ones(H)  # open forget gate at init
    kw["w_out"] = rng.standard_normal(H) / math.sqrt(H)
    kw["b_out"] = np.zeros(())
    return LstmParams(**kw)


def zero_like_grads(p: LstmParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in p.arrays()}


def _check_inputs(p: LstmParams, xs: np.ndarray):
    if xs.ndim != 3 or xs.shape[2] != p.input_dim:
        raise ShapeMismatch(
            f"inputs must be (batch, steps, {p.input_dim}), got {xs.shape}"
        )


def cell_run(p: LstmParams, xs: np.ndarray):
    """Batched recurrence. Returns (final hidden (B,H), hidden trace (B,T,H),
    cache for backward)."""
    _check_inputs(p, xs)
    B, T, _ = xs.shape
    H = p.hidden_dim
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    cache = []
    for t in range(T):
        x = xs[:, t, :]
        i = _sigmoid(x @ p.W_i.T + h @ p.U_i.T + p.b_i)
        f = _sigmoid(x @ p.W_f.T + h @ p.U_f.T + p.b_f)
        g = np.tanh(x @ p.W_g.T + h @ p.U_g.T + p.b_g)
        o = _sigmoid(x @ p.W_o.T + h @ p.U_o.T + p.b_o)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache.append((x, h, c, i, f, g, o, tc))
        h, c = h_new, c_new
        hs[:, t, :] = h
    return h, hs, cache


def cell_backward(p: LstmParams, cache, dh: np.ndarray) -> tuple[dict, np.ndarray]:
    """Backprop dh (gradient w.r.t. final hidden state) through the unrolled
    recurrence. Returns (gate/bias gradients, gradient w.r.t. inputs)."""
    grads = zero_like_grads(p)
    B = dh.shape[0]
    T = len(cache)
    dxs = np.empty((B, T, p.input_dim))
    dc = np.zeros_like(dh)
    for t in range(T - 1, -1, -1):
        x, h_prev, c_prev, i, f, g, o, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        da_i = di * i * (1.0 - i)
        da_f = df * f * (1.0 - f)
        da_g = dg * (1.0 - g * g)
        da_o = do * o * (1.0 - o)
        grads["W_i"] += da_i.T @ x
        grads["W_f"] += da_f.T @ x
        grads["W_g"] += da_g.T @ x
        grads["W_o"] += da_o.T @ x
        grads["U_i"] += da_i.T @ h_prev
        grads["U_f"] += da_f.T @ h_prev
        grads["U_g"] += da_g.T @ h_prev
        grads["U_o"] += da_o.T @ h_prev
        grads["b_i"] += da_i.sum(axis=0)
        grads["b_f"] += da_f.sum(axis=0)
        grads["b_g"] += da_g.sum(axis=0)
        grads["b_o"] += da_o.sum(axis=0)
        dxs[:, t, :] = (da_i @ p.W_i + da_f @ p.W_f + da_g @ p.W_g + da_o @ p.W_o)
        dh = da_i @ p.U_i + da_f @ p.U_f + da_g @ p.U_g + da_o @ p.U_o
        dc = dc * f
    return grads, dxs


def forward_batch(kind: str, params: tuple[LstmParams, ...], xs: np.ndarray):
    """Predictions for a batch. Returns (preds (B,), caches)."""
    if kind == "lstm":
        (p,) = params
        h, _, cache = cell_run(p, xs)
        preds = h @ p.w_out + float(p.b_out)
        return preds, (h, cache)
    if kind == "bilstm":
        pf, pb = params
        if pf.hidden_dim != pb.hidden_dim:
            raise ShapeMismatch("forward/backward hidden_dim differ")
        hf, _, cf = cell_run(pf, xs)
        hb, _, cb = cell_run(pb, xs[:, ::-1, :])
        preds = hf @ pf.w_out + hb @ pb.w_out + float(pf.b_out) + float(pb.b_out)
        return preds, (hf, cf, hb, cb)
    raise ValueError(f"unknown model kind {kind!r}")


def backward_batch(kind: str, params, caches, dy: np.ndarray):
    """Gradients of a scalar loss with dL/dpred = dy, one dict per param set."""
    if kind == "lstm":
        (p,) = params
        h, cache = caches
        grads, _ = cell_backward(p, cache, np.outer(dy, p.w_out))
        grads["w_out"] = h.T @ dy
        grads["b_out"] = np.asarray(dy.sum())
        return (grads,)
    if kind == "bilstm":
        pf, pb = params
        hf, cf, hb, cb = caches
        gf, _ = cell_backward(pf, cf, np.outer(dy, pf.w_out))
        gf["w_out"] = hf.T @ dy
        gf["b_out"] = np.asarray(dy.sum())
        gb, _ = cell_backward(pb, cb, np.outer(dy, pb.w_out))
        gb["w_out"] = hb.T @ dy
        gb["b_out"] = np.asarray(dy.sum())
        return (gf, gb)
    raise ValueError(f"unknown model kind {kind!r}")


def lstm_forward(params: LstmParams, inputs: np.ndarray):
    """Single-sequence forward pass. Returns (prediction, hidden trace (T,H))."""
    xs = np.asarray(inputs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.ndim != 2:
        raise ShapeMismatch(f"inputs must be (steps, features), got {xs.shape}")
    h, hs, _ = cell_run(params, xs[None])
    pred = float(h[0] @ params.w_out + float(params.b_out))
    return pred, hs[0]


def bilstm_forward(params_fwd: LstmParams, params_bwd: LstmParams,
                   inputs: np.ndarray) -> float:
    """Bidirectional pass: one recurrence over the inputs, one over the
    reversed inputs; the concatenated final states feed the output head."""
    xs = np.asarray(inputs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    if xs.ndim != 2:
        raise ShapeMismatch(f"inputs must be (steps, features), got {xs.shape}")
    preds, _ = forward_batch("bilstm", (params_fwd, params_bwd), xs[None])
    return float(preds[0])


# -- gradient verification ----------------------------------------------------

def sample_loss(kind: str, params, x: np.ndarray, y: float) -> float:
    """Squared error of a single sample."""
    preds, _ = forward_batch(kind, params, x[None])
    return float((preds[0] - y) ** 2)


def analytic_gradients(kind: str, params, x: np.ndarray, y: float):
    preds, caches = forward_batch(kind, params, x[None])
    dy = np.array([2.0 * (preds[0] - y)])
    return backward_batch(kind, params, caches, dy)


def numeric_gradients(kind: str, params, x: np.ndarray, y: float,
                      eps: float = 1e-5):
    """Central finite differences on every parameter."""
    out = []
    for p in params:
        grads = {}
        for name, arr in p.arrays():
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + eps
                hi = sample_loss(kind, params, x, y)
                arr[idx] = orig - eps
                lo = sample_loss(kind, params, x, y)
                arr[idx] = orig
                g[idx] = (hi - lo) / (2.0 * eps)
                it.iternext()
            grads[name] = g
        out.append(grads)
    return tuple(out)


def max_relative_error(analytic, numeric) -> float:
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        for name in ga:
            a = np.asarray(ga[name], dtype=float).ravel()
            n = np.asarray(gn[name], dtype=float).ravel()
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            err = np.abs(a - n) / denom
            if err.size:
                worst = max(worst, float(err.max()))
    return worst


def gradient_check(kind: str, params, sample: tuple[np.ndarray, float],
                   eps: float = 1e-5) -> float:
    """Max relative error between BPTT gradients and finite differences."""
    x, y = sample
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return max_relative_error(
        analytic_gradients(kind, params, x, y),
        numeric_gradients(kind, params, x, y, eps),
    )
