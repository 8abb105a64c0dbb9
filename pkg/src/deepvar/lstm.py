"""LSTM value-at-risk estimator written directly in numpy.

Pipeline for one window ``w`` of ``n`` returns::

    transform_window(w)          -> (n, 5) Chebyshev features
    scale_features(., scaler)    -> min/max scaled with training-split statistics
    lstm_forward(., params)      -> LSTM layer(s) -> dense ReLU -> batch-norm -> dense
                                    -> risk (capital amount; the quantile is -risk)

The network is trained on the mean quantile score with analytic
back-propagation through time and Adam.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .core import InvalidInputError, _check_prob
from .estimators import BaseVaREstimator, check_windows
from .scoring import quantile_score, quantile_score_slope

__all__ = [
    "GATES",
    "InvalidParamsError",
    "InvalidStateError",
    "TrainingError",
    "ModelFormatError",
    "LstmParams",
    "TrainConfig",
    "chebyshev",
    "transform_window",
    "transform_windows",
    "fit_scaler",
    "scale_features",
    "init_params",
    "lstm_forward",
    "lstm_backward",
    "objective",
    "gradients",
    "Adam",
    "train",
    "var_lstm",
    "save_params",
    "load_params",
    "LSTMVaR",
]

GATES = ("in", "f", "o", "g")
N_FEATURES = 5


class InvalidParamsError(InvalidInputError):
    pass


class InvalidStateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


# -- data transformation ----------------------------------------------------

def chebyshev(j: int, x):
    """Chebyshev polynomial of the first kind of degree ``j`` (1 to 4)."""
    x = np.asarray(x, dtype=np.float64)
    if j == 1:
        out = x
    elif j == 2:
        out = 2.0 * x**2 - 1.0
    elif j == 3:
        out = 4.0 * x**3 - 3.0 * x
    elif j == 4:
        out = 8.0 * x**4 - 8.0 * x**2 + 1.0
    else:
        raise InvalidInputError(f"Chebyshev degree must be 1..4, got {j}")
    return float(out) if out.ndim == 0 else out


def transform_windows(W) -> np.ndarray:
    """Batch version of ``transform_window``: (m, n) -> (m, n, 5)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] < 1:
        raise InvalidInputError(f"expected (m, n) windows, got shape {W.shape}")
    mean = W.mean(axis=1, keepdims=True)
    c = W - mean
    out = np.empty(W.shape + (N_FEATURES,))
    out[..., 0] = mean
    for j in range(1, 5):
        out[..., j] = chebyshev(j, c)
    return out


def transform_window(w) -> np.ndarray:
    """Rows ``[mean(w), f1(w_j - mean), ..., f4(w_j - mean)]`` for each ``w_j``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise InvalidInputError("transform_window needs a non-empty 1-d window")
    return transform_windows(w[None, :])[0]


def fit_scaler(features) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature min and max over every row of every training window."""
    F = np.asarray(features, dtype=np.float64).reshape(-1, N_FEATURES)
    return F.min(axis=0), F.max(axis=0)


def scale_features(features, scaler) -> np.ndarray:
    """Affine map onto [0, 1] using training min/max; no clamping.

    Features whose training range is empty map to 0.5.
    """
    lo, hi = (np.asarray(s, dtype=np.float64) for s in scaler)
    F = np.asarray(features, dtype=np.float64)
    span = hi - lo
    flat = span <= 0
    safe = np.where(flat, 1.0, span)
    out = (F - lo) / safe
    return np.where(flat, 0.5, out)


# -- parameters -------------------------------------------------------------

@dataclass
class LstmParams:
    """All network state.

    ``weights`` holds the trainable arrays: for recurrent layer ``h`` and gate
    ``k`` in ``GATES``, ``A{h}_{k}`` of shape ``(d_h + d_{h-1}, d_h)`` (rows for
    the previous hidden state come first) and bias ``a{h}_{k}``; for dense
    layer ``l``, ``B{l}`` and ``b{l}``; and the batch-norm scale/shift
    ``bn_gamma``/``bn_beta``.  Batch-norm sits on the input of the last dense
    layer.
    """

    hidden_sizes: tuple
    dense_sizes: tuple
    weights: dict
    bn_mean: np.ndarray
    bn_var: np.ndarray
    scaler_min: Optional[np.ndarray] = None
    scaler_max: Optional[np.ndarray] = None
    input_size: int = N_FEATURES
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    meta: dict = field(default_factory=dict)

    @property
    def n_recurrent(self) -> int:
        return len(self.hidden_sizes)

    @property
    def n_dense(self) -> int:
        return len(self.dense_sizes)

    @property
    def bn_width(self) -> int:
        return int(([self.hidden_sizes[-1]] + list(self.dense_sizes))[-2])

    @property
    def scaler(self):
        if self.scaler_min is None:
            return None
        return self.scaler_min, self.scaler_max

    def copy(self) -> "LstmParams":
        return LstmParams(
            hidden_sizes=tuple(self.hidden_sizes),
            dense_sizes=tuple(self.dense_sizes),
            weights={k: v.copy() for k, v in self.weights.items()},
            bn_mean=self.bn_mean.copy(),
            bn_var=self.bn_var.copy(),
            scaler_min=None if self.scaler_min is None else self.scaler_min.copy(),
            scaler_max=None if self.scaler_max is None else self.scaler_max.copy(),
            input_size=self.input_size,
            bn_momentum=self.bn_momentum,
            bn_epsilon=self.bn_epsilon,
            meta=dict(self.meta),
        )

    def expected_shapes(self) -> dict:
        shapes = {}
        d = [self.input_size] + list(self.hidden_sizes)
        for h in range(1, len(d)):
            for k in GATES:
                shapes[f"A{h}_{k}"] = (d[h] + d[h - 1], d[h])
                shapes[f"a{h}_{k}"] = (d[h],)
        widths = [d[-1]] + list(self.dense_sizes)
        for l in range(1, len(widths)):
            shapes[f"B{l}"] = (widths[l - 1], widths[l])
            shapes[f"b{l}"] = (widths[l],)
        shapes["bn_gamma"] = (self.bn_width,)
        shapes["bn_beta"] = (self.bn_width,)
        return shapes

    def validate(self) -> None:
        if self.dense_sizes[-1] != 1:
            raise InvalidParamsError("the last dense layer must have width 1")
        shapes = self.expected_shapes()
        if set(shapes) != set(self.weights):
            raise InvalidParamsError(
                f"weight names differ from the architecture: {sorted(set(shapes) ^ set(self.weights))}"
            )
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise InvalidParamsError(
                    f"{name} has shape {self.weights[name].shape}, expected {shape}"
                )
        if self.bn_mean.shape != (self.bn_width,) or self.bn_var.shape != (self.bn_width,):
            raise InvalidParamsError("batch-norm running statistics have the wrong shape")
        if np.any(self.bn_var <= 0):
            raise InvalidParamsError("batch-norm running variance must be positive")


def init_params(hidden_sizes=(5,), dense_sizes=(16, 1), rng=None, *, input_size=N_FEATURES,
                bn_momentum=0.99, bn_epsilon=1e-3, zero=False) -> LstmParams:
    """Xavier-uniform weights, zero biases (forget-gate bias 1), identity batch-norm.

    With ``zero=True`` every trainable array is zero except ``bn_gamma`` = 1.
    """
    rng = np.random.default_rng(rng)
    params = LstmParams(
        hidden_sizes=tuple(int(s) for s in hidden_sizes),
        dense_sizes=tuple(int(s) for s in dense_sizes),
        weights={},
        bn_mean=None,
        bn_var=None,
        input_size=input_size,
        bn_momentum=bn_momentum,
        bn_epsilon=bn_epsilon,
    )
    for name, shape in params.expected_shapes().items():
        if zero or len(shape) == 1:
            arr = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        params.weights[name] = arr
    params.weights["bn_gamma"][:] = 1.0
    if not zero:
        for h in range(1, params.n_recurrent + 1):
            params.weights[f"a{h}_f"][:] = 1.0
    params.bn_mean = np.zeros(params.bn_width)
    params.bn_var = np.ones(params.bn_width)
    params.validate()
    return params


# -- forward / backward -----------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _stacked_gate_weights(params: LstmParams, h: int):
    W = np.concatenate([params.weights[f"A{h}_{k}"] for k in GATES], axis=1)
    b = np.concatenate([params.weights[f"a{h}_{k}"] for k in GATES])
    return W, b


def _as_batch(features, params: LstmParams) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != params.input_size:
        raise InvalidParamsError(
            f"expected features of shape (batch, n, {params.input_size}), got {np.shape(features)}"
        )
    if X.shape[1] < 1:
        raise InvalidParamsError("windows must contain at least one timestep")
    return X


def lstm_forward(features, params: LstmParams, mode: str = "infer"):
    """Network output for scaled features.

    Parameters
    ----------
    features : array of shape (batch, n, d0) or (n, d0)
    params : LstmParams
    mode : {"train", "infer"}
        ``"train"`` normalises with batch statistics and returns updated
        running statistics in the cache (``cache["bn_mean_new"]``,
        ``cache["bn_var_new"]``); ``params`` is never modified.

    Returns
    -------
    risk : ndarray of shape (batch,)
    cache : dict
        Activations needed by ``lstm_backward``.
    """
    if mode not in ("train", "infer"):
        raise InvalidInputError(f"mode must be 'train' or 'infer', got {mode!r}")
    params.validate()
    X = _as_batch(features, params)
    B, n, _ = X.shape
    layer_input = X
    layers = []
    for h in range(1, params.n_recurrent + 1):
        d = params.hidden_sizes[h - 1]
        W, b = _stacked_gate_weights(params, h)
        d_in = layer_input.shape[2]
        xc = np.zeros((n, B, d + d_in))
        gates = np.empty((n, B, 4 * d))
        cells = np.zeros((n + 1, B, d))
        tanh_c = np.empty((n, B, d))
        hs = np.zeros((n + 1, B, d))
        for t in range(n):
            xc[t, :, :d] = hs[t]
            xc[t, :, d:] = layer_input[:, t, :]
            z = xc[t] @ W + b
            g = gates[t]
            g[:, :3 * d] = _sigmoid(z[:, :3 * d])
            g[:, 3 * d:] = np.tanh(z[:, 3 * d:])
            cells[t + 1] = g[:, d:2 * d] * cells[t] + g[:, :d] * g[:, 3 * d:]
            tanh_c[t] = np.tanh(cells[t + 1])
            hs[t + 1] = g[:, 2 * d:3 * d] * tanh_c[t]
        layers.append({"xc": xc, "gates": gates, "cells": cells, "tanh_c": tanh_c, "W": W})
        layer_input = np.transpose(hs[1:], (1, 0, 2))

    a = layer_input[:, -1, :]
    dense_in, dense_pre = [], []
    bn = {}
    L = params.n_dense
    for l in range(1, L + 1):
        if l == L:
            gamma, beta = params.weights["bn_gamma"], params.weights["bn_beta"]
            if mode == "train":
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                bn["mean_new"] = params.bn_momentum * params.bn_mean + (1 - params.bn_momentum) * mu
                bn["var_new"] = params.bn_momentum * params.bn_var + (1 - params.bn_momentum) * var
            else:
                mu, var = params.bn_mean, params.bn_var
            inv_std = 1.0 / np.sqrt(var + params.bn_epsilon)
            xhat = (a - mu) * inv_std
            bn.update(xhat=xhat, inv_std=inv_std)
            a = gamma * xhat + beta
        dense_in.append(a)
        z = a @ params.weights[f"B{l}"] + params.weights[f"b{l}"]
        dense_pre.append(z)
        a = np.maximum(z, 0.0) if l < L else z
    risk = a[:, 0]
    cache = {
        "mode": mode,
        "layers": layers,
        "dense_in": dense_in,
        "dense_pre": dense_pre,
        "bn": bn,
        "batch": B,
        "n": n,
    }
    if mode == "train":
        cache["bn_mean_new"] = bn["mean_new"]
        cache["bn_var_new"] = bn["var_new"]
    return risk, cache


def lstm_backward(d_risk, cache, params: LstmParams) -> dict:
    """Gradients of ``sum(d_risk * risk)`` with respect to every trainable array."""
    grads = {}
    d_risk = np.asarray(d_risk, dtype=np.float64).reshape(-1, 1)
    L = params.n_dense
    da = d_risk
    for l in range(L, 0, -1):
        z = cache["dense_pre"][l - 1]
        dz = da if l == L else da * (z > 0)
        a_in = cache["dense_in"][l - 1]
        grads[f"B{l}"] = a_in.T @ dz
        grads[f"b{l}"] = dz.sum(axis=0)
        da = dz @ params.weights[f"B{l}"].T
        if l == L:
            bn = cache["bn"]
            xhat, inv_std = bn["xhat"], bn["inv_std"]
            grads["bn_gamma"] = np.sum(da * xhat, axis=0)
            grads["bn_beta"] = da.sum(axis=0)
            dxhat = da * params.weights["bn_gamma"]
            if cache["mode"] == "train":
                B = dxhat.shape[0]
                da = inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            else:
                da = dxhat * inv_std

    n, B = cache["n"], cache["batch"]
    d_top = params.hidden_sizes[-1]
    dh_seq = np.zeros((n, B, d_top))
    dh_seq[-1] = da
    for h in range(params.n_recurrent, 0, -1):
        layer = cache["layers"][h - 1]
        d = params.hidden_sizes[h - 1]
        W = layer["W"]
        xc, gates, cells, tanh_c = layer["xc"], layer["gates"], layer["cells"], layer["tanh_c"]
        d_in = xc.shape[2] - d
        dW = np.zeros_like(W)
        db = np.zeros(W.shape[1])
        d_input = np.empty((n, B, d_in))
        dh_next = np.zeros((B, d))
        dc_next = np.zeros((B, d))
        dz = np.empty((B, 4 * d))
        for t in range(n - 1, -1, -1):
            g = gates[t]
            i_g, f_g, o_g, c_g = g[:, :d], g[:, d:2 * d], g[:, 2 * d:3 * d], g[:, 3 * d:]
            dh = dh_seq[t] + dh_next
            dc = dh * o_g * (1.0 - tanh_c[t] ** 2) + dc_next
            dz[:, :d] = dc * c_g * i_g * (1.0 - i_g)
            dz[:, d:2 * d] = dc * cells[t] * f_g * (1.0 - f_g)
            dz[:, 2 * d:3 * d] = dh * tanh_c[t] * o_g * (1.0 - o_g)
            dz[:, 3 * d:] = dc * i_g * (1.0 - c_g**2)
            dc_next = dc * f_g
            dW += xc[t].T @ dz
            db += dz.sum(axis=0)
            dxc = dz @ W.T
            dh_next = dxc[:, :d]
            d_input[t] = dxc[:, d:]
        for idx, k in enumerate(GATES):
            grads[f"A{h}_{k}"] = dW[:, idx * d:(idx + 1) * d]
            grads[f"a{h}_{k}"] = db[idx * d:(idx + 1) * d]
        dh_seq = d_input
    return grads


def _batch_inputs(batch):
    features, targets = batch
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.size == 0:
        raise InvalidInputError("objective needs a non-empty batch")
    return features, targets


def objective(params: LstmParams, batch, alpha: float, mode: str = "train") -> float:
    """Mean quantile score ``mean S(-risk_i, y_i)`` over ``batch = (features, targets)``."""
    alpha = _check_prob(alpha)
    features, targets = _batch_inputs(batch)
    risk, _ = lstm_forward(features, params, mode)
    if risk.size != targets.size:
        raise InvalidInputError("features and targets disagree on batch size")
    return float(np.mean(quantile_score(-risk, targets, alpha)))


def gradients(params: LstmParams, batch, alpha: float, mode: str = "train", return_loss=False):
    """Exact gradient of ``objective``; the kink ``y + risk = 0`` takes slope ``alpha - 1``."""
    alpha = _check_prob(alpha)
    features, targets = _batch_inputs(batch)
    risk, cache = lstm_forward(features, params, mode)
    if risk.size != targets.size:
        raise InvalidInputError("features and targets disagree on batch size")
    d_risk = quantile_score_slope(risk, targets, alpha) / risk.size
    grads = lstm_backward(d_risk, cache, params)
    if return_loss:
        loss = float(np.mean(quantile_score(-risk, targets, alpha)))
        return grads, loss, cache
    return grads


# -- training ---------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, weights: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            weights[name] -= lr_t * m / (np.sqrt(v) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs_max: int = 200
    batch_size: int = 64
    learning_rate_init: float = 1e-3
    lr_reduce_factor: float = 0.1
    lr_patience: int = 10
    lr_min: float = 1e-5
    early_stop_patience: int = 20
    seed: int = 0
    calibration_runs: int = 2

    def __post_init__(self):
        for name in ("epochs_max", "batch_size", "lr_patience", "early_stop_patience",
                     "calibration_runs"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be a positive integer")
        for name in ("learning_rate_init", "lr_min"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not 0 < self.lr_reduce_factor < 1:
            raise InvalidInputError("lr_reduce_factor must lie in (0, 1)")


def _predict_scaled(features, params, batch_size=4096) -> np.ndarray:
    out = np.empty(features.shape[0])
    for start in range(0, features.shape[0], batch_size):
        out[start:start + batch_size] = lstm_forward(features[start:start + batch_size], params, "infer")[0]
    return out


def _mean_score(features, targets, params, alpha) -> float:
    return float(np.mean(quantile_score(-_predict_scaled(features, params), targets, alpha)))


def _calibrate(Ftr, ytr, Fval, yval, alpha, config: TrainConfig, arch: dict, seed_seq):
    rng = np.random.default_rng(seed_seq)
    params = init_params(rng=rng, **arch)
    opt = Adam(lr=config.learning_rate_init)
    best_val = math.inf
    best = params.copy()
    since_best = 0
    since_lr = 0
    history = []
    m = Ftr.shape[0]
    for epoch in range(1, config.epochs_max + 1):
        order = rng.permutation(m)
        losses = []
        for start in range(0, m, config.batch_size):
            idx = order[start:start + config.batch_size]
            grads, loss, cache = gradients(params, (Ftr[idx], ytr[idx]), alpha, "train", return_loss=True)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, batch starting {start}; "
                    f"learning rate {opt.lr:g}"
                )
            opt.step(params.weights, grads)
            params.bn_mean = cache["bn_mean_new"]
            params.bn_var = cache["bn_var_new"]
            losses.append(loss * idx.size)
        train_loss = float(np.sum(losses) / m)
        val_score = _mean_score(Fval, yval, params, alpha)
        if not math.isfinite(val_score):
            raise TrainingError(f"non-finite validation score at epoch {epoch}")
        improved = val_score < best_val
        if improved:
            best_val = val_score
            best = params.copy()
            since_best = since_lr = 0
        else:
            since_best += 1
            since_lr += 1
        history.append({"epoch": epoch, "train_loss": train_loss, "val_score": val_score,
                        "best_val_score": best_val, "lr": opt.lr})
        if since_best >= config.early_stop_patience:
            break
        if since_lr >= config.lr_patience and opt.lr > config.lr_min:
            opt.lr = max(opt.lr * config.lr_reduce_factor, config.lr_min)
            since_lr = 0
    train_score = _mean_score(Ftr, ytr, best, alpha)
    return best, history, train_score, best_val


def _consistency(train_score, val_score, eps=1e-12):
    return abs(train_score - val_score) / max(train_score, eps)


def train(train_windows, train_targets, val_windows, val_targets, alpha: float,
          config: TrainConfig = TrainConfig(), *, hidden_sizes=(5,), dense_sizes=(16, 1),
          bn_momentum=0.99, bn_epsilon=1e-3):
    """Fit the LSTM estimator on raw return windows.

    The scaler is fitted on the transformed training windows.  ``config.calibration_runs``
    independent runs are trained; the run whose train and validation scores
    agree best (smallest ``|S_train - S_val| / S_train``) is returned.

    Returns
    -------
    params : LstmParams
        Best-validation weights of the selected run, with scaler attached.
    history : dict
        ``runs``: per-run epoch records and final scores; ``selected``: index.
    """
    alpha = _check_prob(alpha)
    Wtr = check_windows(train_windows)
    Wval = check_windows(val_windows)
    ytr = np.asarray(train_targets, dtype=np.float64).reshape(-1)
    yval = np.asarray(val_targets, dtype=np.float64).reshape(-1)
    if Wtr.shape[0] == 0 or Wval.shape[0] == 0:
        raise InvalidInputError("training and validation sets must be non-empty")
    if ytr.size != Wtr.shape[0] or yval.size != Wval.shape[0]:
        raise InvalidInputError("each window needs exactly one target")
    if Wtr.shape[1] != Wval.shape[1]:
        raise InvalidInputError("training and validation windows differ in length")
    Ttr = transform_windows(Wtr)
    scaler = fit_scaler(Ttr)
    Ftr = scale_features(Ttr, scaler)
    Fval = scale_features(transform_windows(Wval), scaler)
    arch = dict(hidden_sizes=hidden_sizes, dense_sizes=dense_sizes,
                bn_momentum=bn_momentum, bn_epsilon=bn_epsilon)
    runs = []
    candidates = []
    for run, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.calibration_runs)):
        params, hist, s_train, s_val = _calibrate(Ftr, ytr, Fval, yval, alpha, config, arch, child)
        runs.append({"run": run, "epochs": hist, "train_score": s_train, "val_score": s_val,
                     "consistency": _consistency(s_train, s_val)})
        candidates.append(params)
    selected = min(range(len(runs)), key=lambda r: runs[r]["consistency"])
    params = candidates[selected]
    params.scaler_min, params.scaler_max = scaler
    params.meta.update({
        "alpha": alpha,
        "n": int(Wtr.shape[1]),
        "seed": int(config.seed),
        "train_score": runs[selected]["train_score"],
        "val_score": runs[selected]["val_score"],
        "config": asdict(config),
    })
    return params, {"runs": runs, "selected": selected}


def var_lstm(w, trained: LstmParams, alpha: Optional[float] = None) -> float:
    """Risk estimate of a trained network for one raw window ``w``."""
    if trained is None or trained.scaler is None:
        raise InvalidStateError("LSTM parameters are untrained (no scaler attached)")
    if alpha is not None and "alpha" in trained.meta and not math.isclose(alpha, trained.meta["alpha"]):
        raise InvalidStateError(
            f"model was trained for alpha={trained.meta['alpha']}, asked for alpha={alpha}"
        )
    w = np.asarray(w, dtype=np.float64)
    features = scale_features(transform_window(w), trained.scaler)
    return float(lstm_forward(features, trained, "infer")[0][0])


# -- persistence ------------------------------------------------------------
#
# File layout (all integers little-endian):
#   8 bytes   magic b"DVLSTM\x00\x01" (last byte = format version)
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: {"version", "hidden_sizes", "dense_sizes", "input_size",
#             "bn_momentum", "bn_epsilon", "meta", "arrays": [[name, shape], ...]}
#   payload   float64 little-endian, each array row-major, in header order

MAGIC = b"DVLSTM\x00"
FORMAT_VERSION = 1


def _named_arrays(params: LstmParams):
    arrays = [(k, params.weights[k]) for k in params.expected_shapes()]
    arrays += [("bn_mean", params.bn_mean), ("bn_var", params.bn_var)]
    if params.scaler is not None:
        arrays += [("scaler_min", params.scaler_min), ("scaler_max", params.scaler_max)]
    return arrays


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def save_params(params: LstmParams, path) -> None:
    params.validate()
    arrays = _named_arrays(params)
    header = {
        "version": FORMAT_VERSION,
        "hidden_sizes": list(params.hidden_sizes),
        "dense_sizes": list(params.dense_sizes),
        "input_size": params.input_size,
        "bn_momentum": params.bn_momentum,
        "bn_epsilon": params.bn_epsilon,
        "meta": params.meta,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = json.dumps(header, default=_json_default, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def load_params(path) -> LstmParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:7] != MAGIC:
        raise ModelFormatError(f"{path}: not a deepvar LSTM model file")
    version = data[7]
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != version:
        raise ModelFormatError(
            f"{path}: header version {header.get('version')} does not match file version {version}"
        )
    buf = io.BytesIO(data[12 + hlen:])
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise ModelFormatError(f"{path}: truncated payload while reading {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise ModelFormatError(f"{path}: trailing bytes after payload")
    try:
        params = LstmParams(
            hidden_sizes=tuple(header["hidden_sizes"]),
            dense_sizes=tuple(header["dense_sizes"]),
            weights={k: v for k, v in arrays.items()
                     if k not in ("bn_mean", "bn_var", "scaler_min", "scaler_max")},
            bn_mean=arrays["bn_mean"],
            bn_var=arrays["bn_var"],
            scaler_min=arrays.get("scaler_min"),
            scaler_max=arrays.get("scaler_max"),
            input_size=int(header["input_size"]),
            bn_momentum=float(header["bn_momentum"]),
            bn_epsilon=float(header["bn_epsilon"]),
            meta=header.get("meta", {}),
        )
        params.validate()
    except (KeyError, InvalidParamsError) as exc:
        raise ModelFormatError(f"{path}: inconsistent model contents ({exc})") from exc
    return params


# -- estimator --------------------------------------------------------------

class LSTMVaR(BaseVaREstimator):
    """LSTM risk estimator trained on the mean quantile score.

    Parameters
    ----------
    alpha : float, default=0.05
    hidden_sizes : tuple of int, default=(5,)
        Widths of the stacked recurrent layers.
    dense_sizes : tuple of int, default=(16, 1)
        Widths of the dense head; hidden layers use ReLU, the last must be 1.
    epochs_max, batch_size, learning_rate_init, lr_reduce_factor, lr_patience,
    lr_min, early_stop_patience, calibration_runs
        See ``TrainConfig``.
    validation_fraction : float, default=1/9
        Trailing share of the training windows held out when ``fit`` gets no
        explicit validation set (1/9 of 90% reproduces an 80/10 split).
    random_state : int, default=0

    Attributes
    ----------
    params_ : LstmParams
    history_ : dict
    """

    def __init__(self, alpha=0.05, hidden_sizes=(5,), dense_sizes=(16, 1), epochs_max=200,
                 batch_size=64, learning_rate_init=1e-3, lr_reduce_factor=0.1, lr_patience=10,
                 lr_min=1e-5, early_stop_patience=20, calibration_runs=2,
                 validation_fraction=1 / 9, random_state=0):
        self.alpha = alpha
        self.hidden_sizes = hidden_sizes
        self.dense_sizes = dense_sizes
        self.epochs_max = epochs_max
        self.batch_size = batch_size
        self.learning_rate_init = learning_rate_init
        self.lr_reduce_factor = lr_reduce_factor
        self.lr_patience = lr_patience
        self.lr_min = lr_min
        self.early_stop_patience = early_stop_patience
        self.calibration_runs = calibration_runs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs_max=self.epochs_max, batch_size=self.batch_size,
            learning_rate_init=self.learning_rate_init, lr_reduce_factor=self.lr_reduce_factor,
            lr_patience=self.lr_patience, lr_min=self.lr_min,
            early_stop_patience=self.early_stop_patience,
            seed=0 if self.random_state is None else int(self.random_state),
            calibration_runs=self.calibration_runs,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_windows(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X_val is None:
            split = X.shape[0] - max(1, int(round(X.shape[0] * self.validation_fraction)))
            X, X_val, y, y_val = X[:split], X[split:], y[:split], y[split:]
        self.params_, self.history_ = train(
            X, y, X_val, y_val, self.alpha, self.train_config(),
            hidden_sizes=self.hidden_sizes, dense_sizes=self.dense_sizes,
        )
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_params(cls, params: LstmParams, **kwargs) -> "LSTMVaR":
        """Wrap already-trained parameters (e.g. loaded from disk)."""
        if params.scaler is None:
            raise InvalidStateError("parameters carry no scaler; train them first")
        kwargs.setdefault("alpha", params.meta.get("alpha", 0.05))
        est = cls(hidden_sizes=params.hidden_sizes, dense_sizes=params.dense_sizes, **kwargs)
        est.params_ = params
        est.history_ = None
        est.n_features_in_ = int(params.meta.get("n", 0)) or None
        return est

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_windows(X)
        if self.n_features_in_ is not None and X.shape[1] != self.n_features_in_:
            raise InvalidInputError(
                f"model was trained on windows of length {self.n_features_in_}, got {X.shape[1]}"
            )
        features = scale_features(transform_windows(X), self.params_.scaler)
        return _predict_scaled(features, self.params_)
