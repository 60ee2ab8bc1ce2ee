"""Minimal neural network kernel: dense layers, single-head attention,
MSE loss, SGD/Adam, all with hand-derived backward passes.

Matrices are plain 2-D float64 numpy arrays (row-major).  Every backward
pass is exact, and `numeric_grad` provides the central finite-difference
oracle used to verify them.  Parameters live in flat name->array dicts so
one optimizer implementation serves every model; updates walk the dict in
sorted key order, keeping training runs reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, DimensionError, TrainingError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _as_matrix(name: str, m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {m.shape}")
    return m


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    m = _as_matrix("softmax input", m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class AttentionParams:
    """Single-head attention projection weights, each d_model x d_k."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape):
            raise DimensionError(
                f"attention weights must share one shape, got "
                f"W_Q{self.w_q.shape} W_K{self.w_k.shape} W_V{self.w_v.shape}"
            )
        if self.w_q.shape[1] < 1:
            raise DimensionError("attention d_k must be >= 1")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]


@dataclass(frozen=True)
class _AttentionCache:
    x: np.ndarray
    params: AttentionParams
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray  # softmax(QK^T/sqrt(d_k)), T x T


def attention_forward(x: np.ndarray, params: AttentionParams):
    """Y = softmax(Q K^T / sqrt(d_k)) V with Q=XW_Q, K=XW_K, V=XW_V."""
    x = _as_matrix("attention input X", x)
    if x.shape[1] != params.d_model:
        raise DimensionError(
            f"attention input X has {x.shape[1]} columns but W_Q expects {params.d_model} rows"
        )
    q = x @ params.w_q
    k = x @ params.w_k
    v = x @ params.w_v
    weights = softmax_rows((q @ k.T) / np.sqrt(params.d_k))
    y = weights @ v
    return y, _AttentionCache(x=x, params=params, q=q, k=k, v=v, weights=weights)


def attention_backward(d_y: np.ndarray, cache: _AttentionCache):
    """Exact gradients of attention_forward. Returns (dX, dW_Q, dW_K, dW_V)."""
    if not isinstance(cache, _AttentionCache):
        raise ContractError("attention_backward needs the cache from attention_forward")
    d_y = _as_matrix("attention dY", d_y)
    if d_y.shape != (cache.x.shape[0], cache.params.d_k):
        raise ContractError(
            f"dY shape {d_y.shape} does not match forward output "
            f"({cache.x.shape[0]}, {cache.params.d_k})"
        )
    a = cache.weights
    d_v = a.T @ d_y
    d_a = d_y @ cache.v.T
    # Softmax backward, row-wise: dS = A * (dA - sum(dA * A, rows)).
    d_scores = a * (d_a - (d_a * a).sum(axis=1, keepdims=True))
    d_scores /= np.sqrt(cache.params.d_k)
    d_q = d_scores @ cache.k
    d_k = d_scores.T @ cache.q
    d_wq = cache.x.T @ d_q
    d_wk = cache.x.T @ d_k
    d_wv = cache.x.T @ d_v
    d_x = d_q @ cache.params.w_q.T + d_k @ cache.params.w_k.T + d_v @ cache.params.w_v.T
    return d_x, d_wq, d_wk, d_wv


@dataclass(frozen=True)
class LinearLayer:
    """Affine layer weights plus its activation ('relu' or 'identity')."""

    w: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise DimensionError(f"unknown activation {self.activation!r}")
        if self.b.shape != (self.w.shape[1],):
            raise DimensionError(
                f"bias shape {self.b.shape} does not match weight columns {self.w.shape[1]}"
            )


@dataclass(frozen=True)
class _MlpCache:
    layers: tuple
    inputs: tuple  # input to each layer
    pre_acts: tuple  # affine outputs before activation


def mlp_forward(x: np.ndarray, layers) -> tuple:
    """Composition of affine+activation layers. Returns (Y, cache)."""
    x = _as_matrix("mlp input X", x)
    inputs = []
    pre_acts = []
    h = x
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.w.shape[0]:
            raise DimensionError(
                f"mlp layer {i} expects {layer.w.shape[0]} inputs, got {h.shape[1]}"
            )
        inputs.append(h)
        z = h @ layer.w + layer.b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, _MlpCache(layers=tuple(layers), inputs=tuple(inputs), pre_acts=tuple(pre_acts))


def mlp_backward(d_y: np.ndarray, cache: _MlpCache):
    """Exact gradients of mlp_forward. Returns (dX, [(dW, db) per layer])."""
    if not isinstance(cache, _MlpCache):
        raise ContractError("mlp_backward needs the cache from mlp_forward")
    d_h = _as_matrix("mlp dY", d_y)
    grads = [None] * len(cache.layers)
    for i in range(len(cache.layers) - 1, -1, -1):
        layer = cache.layers[i]
        if layer.activation == "relu":
            d_z = d_h * (cache.pre_acts[i] > 0.0)
        else:
            d_z = d_h
        grads[i] = (cache.inputs[i].T @ d_z, d_z.sum(axis=0))
        d_h = d_z @ layer.w.T
    return d_h, grads


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Half mean squared error: L = (1/2N) sum((pred-target)^2).

    Returns (loss, dpred) with dpred_i = (pred_i - target_i) / N where N is
    the number of samples (rows for matrices, entries for vectors).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ContractError("mse_loss needs at least one sample")
    n = pred.shape[0]
    err = pred - target
    loss = float((err**2).sum() / (2 * n))
    return loss, err / n


def _check_finite_grads(grads: dict, step: int | None):
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            at = "" if step is None else f" at step {step}"
            raise TrainingError(f"non-finite gradient for {name!r}{at}")


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain gradient descent: w <- w - lr * g. Returns new parameter dict."""
    if lr <= 0:
        raise TrainingError(f"learning rate must be > 0, got {lr}")
    _check_finite_grads(grads, step=None)
    return {name: params[name] - lr * grads[name] for name in sorted(params)}


@dataclass(frozen=True)
class AdamState:
    """Adam moment accumulators; shapes mirror the parameter dict."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        zeros = lambda: {k: np.zeros_like(v) for k, v in params.items()}
        return cls(m=zeros(), v=zeros(), t=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update. Returns (new params, new state)."""
    if lr <= 0:
        raise TrainingError(f"learning rate must be > 0, got {lr}")
    t = state.t + 1
    _check_finite_grads(grads, step=t)
    new_params, new_m, new_v = {}, {}, {}
    for name in sorted(params):
        g = grads[name]
        m = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g**2
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero bias."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, (fan_in, fan_out))
    return LinearLayer(w=w, b=np.zeros(fan_out), activation=activation)


def init_attention(rng: np.random.Generator, d_model: int, d_k: int) -> AttentionParams:
    bound = 1.0 / np.sqrt(d_model)
    return AttentionParams(
        w_q=rng.uniform(-bound, bound, (d_model, d_k)),
        w_k=rng.uniform(-bound, bound, (d_model, d_k)),
        w_v=rng.uniform(-bound, bound, (d_model, d_k)),
    )


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case relative disagreement, floored to stay meaningful near 0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float((np.abs(a - n) / denom).max())
