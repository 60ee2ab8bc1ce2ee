"""Behavior-cloned initial-grasp policy.

Maps a tactile reading plus the current gripper angle to the target grasp
angle demonstrated by the scripted expert. A small MLP is fit with minibatch
SGD on mean squared angle error; the prediction is clamped to the actuator
range at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ModelError, TrainingError, ValidationError
from .nn import (
    LinearLayer,
    load_model,
    mlp_backward,
    mlp_forward,
    mse_loss,
    init_linear,
    save_model,
    sgd_step,
)
from .sim import THETA_MAX_DEG, THETA_MIN_DEG
from .tactile import N_TAXELS

INPUT_DIM = N_TAXELS + 1
HIDDEN_DIM = 64

_MODEL_KIND = "generator"
_RNG_TAG = 0x47454E


@dataclass(frozen=True)
class GraspSample:
    """One supervised pair: tactile + angle at observation, expert target angle."""

    s: np.ndarray
    theta_deg: float
    a_deg: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if s.shape != (N_TAXELS,):
            raise DimensionError(f"s must have shape ({N_TAXELS},), got {s.shape}")
        if np.any(s < 0.0) or not np.all(np.isfinite(s)):
            raise ValidationError("tactile values must be finite and >= 0")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "s", s)
        if not THETA_MIN_DEG <= self.theta_deg <= THETA_MAX_DEG:
            raise ValidationError(
                f"theta_deg must be in [0, 90], got {self.theta_deg}"
            )
        if not THETA_MIN_DEG <= self.a_deg <= THETA_MAX_DEG:
            raise ValidationError(f"a_deg must be in [0, 90], got {self.a_deg}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Training hyperparameters for the grasp generator."""

    lr: float = 0.001
    batch: int = 64
    epochs: int = 50

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1:
            raise ValidationError(f"invalid generator config {self}")


@dataclass(frozen=True)
class GeneratorModel:
    """Trained MLP 33 -> 64 relu -> 64 relu -> 1 plus input standardization."""

    layers: tuple[LinearLayer, ...]
    config: GeneratorConfig
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != 3:
            raise ValidationError("generator expects exactly 3 layers")
        for name in ("feature_mean", "feature_scale"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (INPUT_DIM,):
                raise DimensionError(f"{name} must have shape ({INPUT_DIM},)")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.feature_scale <= 0):
            raise ValidationError("feature_scale entries must be > 0")


def samples_from_episodes(episodes) -> list[GraspSample]:
    """Turn recorded initial-grasp episodes into supervised samples.

    Every frame of an episode becomes one sample labeled with the episode's
    final settled angle.
    """
    samples: list[GraspSample] = []
    for header, frames in episodes:
        if header.kind != "gp":
            raise DataError(
                f"generator training expects kind=gp episodes, got {header.kind!r} "
                f"for object {header.object_name!r}"
            )
        if not frames:
            raise DataError(f"empty episode for object {header.object_name!r}")
        a_deg = frames[-1].theta_deg
        for frame in frames:
            samples.append(
                GraspSample(s=frame.s, theta_deg=frame.theta_deg, a_deg=a_deg)
            )
    return samples


def _sample_matrix(samples) -> tuple[np.ndarray, np.ndarray]:
    x = np.empty((len(samples), INPUT_DIM))
    y = np.empty((len(samples), 1))
    for i, sample in enumerate(samples):
        x[i, :N_TAXELS] = sample.s
        x[i, N_TAXELS] = sample.theta_deg
        y[i, 0] = sample.a_deg
    return x, y


_ACTIVATIONS = ("relu", "relu", "identity")


def _params_from_layers(layers) -> dict:
    params = {}
    for i, layer in enumerate(layers):
        params[f"layer{i}_w"] = layer.w
        params[f"layer{i}_b"] = layer.b
    return params


def _layers_from_params(params) -> tuple[LinearLayer, ...]:
    return tuple(
        LinearLayer(
            w=params[f"layer{i}_w"],
            b=params[f"layer{i}_b"],
            activation=act,
        )
        for i, act in enumerate(_ACTIVATIONS)
    )


def _full_set_mse(params, x, y) -> float:
    pred, _ = mlp_forward(x, _layers_from_params(params))
    return float(np.mean((pred - y) ** 2))


def train_generator(data, seed: int, config: GeneratorConfig | None = None):
    """Fit the policy; returns (model, history with per-epoch train/val MSE).

    The sample list is brought to a canonical order before the seeded shuffle,
    so training depends only on the seed, never on input order. History values
    are plain mean squared errors in squared degrees; the train entry is
    evaluated on the full training split at each epoch end.
    """
    config = config or GeneratorConfig()
    samples = list(data)
    if len(samples) < 10:
        raise DataError(f"need at least 10 grasp samples, got {len(samples)}")
    x, y = _sample_matrix(samples)

    key = np.hstack([x, y])
    canonical = np.lexsort(key.T[::-1])
    x, y = x[canonical], y[canonical]

    rng = np.random.default_rng((int(seed), _RNG_TAG))
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    n_train = int(math.floor(0.8 * len(x)))
    x_tr, y_tr = x[:n_train], y[:n_train]
    x_val, y_val = x[n_train:], y[n_train:]

    # Standardize inputs on the training split; near-constant features keep
    # unit scale. The output bias starts at the mean label so descent begins
    # from the mean predictor.
    feature_mean = x_tr.mean(axis=0)
    feature_scale = x_tr.std(axis=0)
    feature_scale = np.where(feature_scale < 1e-8, 1.0, feature_scale)
    x_tr = (x_tr - feature_mean) / feature_scale
    x_val = (x_val - feature_mean) / feature_scale

    layers = (
        init_linear(rng, INPUT_DIM, HIDDEN_DIM, "relu"),
        init_linear(rng, HIDDEN_DIM, HIDDEN_DIM, "relu"),
        LinearLayer(
            w=np.zeros((HIDDEN_DIM, 1)),
            b=np.array([float(np.mean(y_tr))]),
            activation="identity",
        ),
    )
    params = _params_from_layers(layers)

    train_hist = np.empty(config.epochs)
    val_hist = np.empty(config.epochs)
    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, config.batch):
            idx = perm[start : start + config.batch]
            pred, cache = mlp_forward(x_tr[idx], _layers_from_params(params))
            _, dpred = mse_loss(pred, y_tr[idx])
            _, layer_grads = mlp_backward(dpred, cache)
            grads = {}
            for i, (d_w, d_b) in enumerate(layer_grads):
                grads[f"layer{i}_w"] = d_w
                grads[f"layer{i}_b"] = d_b
            params = sgd_step(params, grads, config.lr)
        train_hist[epoch] = _full_set_mse(params, x_tr, y_tr)
        val_hist[epoch] = (
            _full_set_mse(params, x_val, y_val) if len(x_val) else float("nan")
        )
        if not math.isfinite(train_hist[epoch]):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")

    model = GeneratorModel(
        layers=_layers_from_params(params),
        config=config,
        feature_mean=feature_mean,
        feature_scale=feature_scale,
    )
    history = {"train_mse": train_hist, "val_mse": val_hist}
    return model, history


def predict_initial_grasp(model: GeneratorModel, s, theta_deg: float) -> float:
    """Predicted target angle for one observation, clamped to [0, 90]."""
    s = np.asarray(s, dtype=float)
    if s.shape != (N_TAXELS,):
        raise DimensionError(f"s must have shape ({N_TAXELS},), got {s.shape}")
    x = np.empty((1, INPUT_DIM))
    x[0, :N_TAXELS] = s
    x[0, N_TAXELS] = theta_deg
    x = (x - model.feature_mean) / model.feature_scale
    pred, _ = mlp_forward(x, model.layers)
    return float(np.clip(pred[0, 0], THETA_MIN_DEG, THETA_MAX_DEG))


def predict_batch(model: GeneratorModel, s_matrix, theta_deg) -> np.ndarray:
    """Vectorized predictions for rows of tactile readings and angles."""
    s_matrix = np.asarray(s_matrix, dtype=float)
    theta = np.asarray(theta_deg, dtype=float)
    if s_matrix.ndim != 2 or s_matrix.shape[1] != N_TAXELS:
        raise DimensionError(f"s_matrix must be (n, {N_TAXELS})")
    if theta.shape != (s_matrix.shape[0],):
        raise DimensionError("theta_deg must have one entry per tactile row")
    x = np.hstack([s_matrix, theta[:, None]])
    x = (x - model.feature_mean) / model.feature_scale
    pred, _ = mlp_forward(x, model.layers)
    return np.clip(pred[:, 0], THETA_MIN_DEG, THETA_MAX_DEG)


def save_generator(path, model: GeneratorModel, history=None) -> None:
    """Persist the model (and optional loss history) to one model file."""
    arrays = _params_from_layers(model.layers)
    arrays["feature_mean"] = model.feature_mean
    arrays["feature_scale"] = model.feature_scale
    if history is not None:
        arrays["history_train_mse"] = np.asarray(history["train_mse"], dtype=float)
        arrays["history_val_mse"] = np.asarray(history["val_mse"], dtype=float)
    meta = {
        "lr": model.config.lr,
        "batch": model.config.batch,
        "epochs": model.config.epochs,
        "activations": list(_ACTIVATIONS),
    }
    save_model(path, _MODEL_KIND, meta, arrays)


def load_generator(path):
    """Load a generator model file; returns (model, history or None)."""
    kind, meta, arrays = load_model(path)
    if kind != _MODEL_KIND:
        raise ModelError(f"expected a {_MODEL_KIND!r} model file, got {kind!r}")
    try:
        config = GeneratorConfig(
            lr=float(meta["lr"]), batch=int(meta["batch"]), epochs=int(meta["epochs"])
        )
        layers = _layers_from_params(arrays)
        model = GeneratorModel(
            layers=layers,
            config=config,
            feature_mean=arrays["feature_mean"],
            feature_scale=arrays["feature_scale"],
        )
    except KeyError as exc:
        raise ModelError(f"generator model file missing entry {exc}") from None
    except (ValidationError, DimensionError) as exc:
        raise ModelError(f"corrupt generator model file: {exc}") from None
    history = None
    if "history_train_mse" in arrays:
        history = {
            "train_mse": arrays["history_train_mse"],
            "val_mse": arrays["history_val_mse"],
        }
    return model, history
