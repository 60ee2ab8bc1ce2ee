"""Self-attention grasp adapter and the closed-loop grasp controller.

The adapter maps a sliding window of tactile change to a corrective gripper
angle delta. Two residual single-head attention blocks mix the token window;
an MLP head reads the newest token out to one delta, clamped to the
actuation bound. The closed-loop controller renders taxels each tick, gates
the adapter behind the stability estimate, and commands the simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DimensionError,
    ModelError,
    TrainingError,
    ValidationError,
)
from .nn import (
    AdamState,
    AttentionParams,
    LinearLayer,
    adam_step,
    attention_backward,
    attention_forward,
    init_attention,
    init_linear,
    load_model,
    mlp_backward,
    mlp_forward,
    save_model,
)
from .sim import DT_S, SimState, set_target_angle, step, inject_disturbance, contact_state
from .stability import gmm_log_likelihood
from .tactile import N_TAXELS, TaxelFrame, delta_frame, render_taxels

WINDOW_LEN = 16
D_MODEL = N_TAXELS + 2
D_K = 16
HEAD_HIDDEN = 64
DELTA_CLAMP_DEG = 5.0
S_SUM_SCALE = 100.0
THETA_SCALE = 90.0
DECISION_PERIOD_TICKS = 8
ACTUATION_DEADBAND_DEG = 0.1
WINDOW_STRIDE = 2
SETTLE_S = 2.0

_MODEL_KIND = "adapter"
_RNG_TAG = 0x414450
_N_BLOCKS = 2


@dataclass(frozen=True)
class AdaptSample:
    """One training record: tactile change, reading, angle, and delta label."""

    ds: np.ndarray
    s: np.ndarray
    theta_deg: float
    dtheta_deg: float

    def __post_init__(self):
        ds = np.asarray(self.ds, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if ds.shape != (N_TAXELS,) or s.shape != (N_TAXELS,):
            raise DimensionError(
                f"ds and s must have shape ({N_TAXELS},), got {ds.shape}, {s.shape}"
            )
        entries = np.concatenate([ds, s, [self.theta_deg, self.dtheta_deg]])
        if not np.all(np.isfinite(entries)):
            raise ValidationError("AdaptSample entries must be finite")
        if abs(self.dtheta_deg) > DELTA_CLAMP_DEG:
            raise ValidationError(
                f"|dtheta_deg| must be <= {DELTA_CLAMP_DEG}, got {self.dtheta_deg}"
            )
        for name, arr in (("ds", ds), ("s", s)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def token_from(ds, s, theta_deg: float) -> np.ndarray:
    """One attention token: raw tactile change plus scaled context."""
    ds = np.asarray(ds, dtype=float)
    s = np.asarray(s, dtype=float)
    mean_finger_sum = 0.5 * float(s.sum())
    return np.concatenate(
        [ds, [mean_finger_sum / S_SUM_SCALE, theta_deg / THETA_SCALE]]
    )


@dataclass(frozen=True)
class WindowBuffer:
    """Fixed-length token window, oldest token first, zero-padded when short."""

    tokens: np.ndarray

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=float)
        if tokens.shape != (WINDOW_LEN, D_MODEL):
            raise DimensionError(
                f"tokens must have shape ({WINDOW_LEN}, {D_MODEL}), got {tokens.shape}"
            )
        tokens = tokens.copy()
        tokens.flags.writeable = False
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def from_token_list(cls, token_list) -> "WindowBuffer":
        if not token_list:
            raise DataError("window needs at least one token")
        recent = list(token_list)[-WINDOW_LEN:]
        tokens = np.zeros((WINDOW_LEN, D_MODEL))
        tokens[WINDOW_LEN - len(recent) :] = np.asarray(recent)
        return cls(tokens=tokens)


def build_window_features(history) -> WindowBuffer:
    """Token window from consecutive (TaxelFrame, theta_deg) pairs.

    The oldest entry gets a zero tactile change (no predecessor); later
    entries difference against their predecessor. Tick gaps are rejected.
    """
    if not history:
        raise DataError("history must be non-empty")
    tokens = []
    prev_frame = None
    for frame, theta_deg in history:
        ds = np.zeros(N_TAXELS) if prev_frame is None else delta_frame(frame, prev_frame)
        tokens.append(token_from(ds, frame.values, float(theta_deg)))
        prev_frame = frame
    return WindowBuffer.from_token_list(tokens)


@dataclass(frozen=True)
class AdapterModel:
    """Attention-block parameters plus training configuration."""

    params: dict
    config: dict

    def __post_init__(self):
        expected = set(_param_template().keys())
        if set(self.params.keys()) != expected:
            missing = expected - set(self.params.keys())
            extra = set(self.params.keys()) - expected
            raise ModelError(
                f"adapter parameters malformed (missing {sorted(missing)}, extra {sorted(extra)})"
            )

    @property
    def trained(self) -> bool:
        return bool(self.config.get("trained", False))


def _param_template() -> dict:
    names = {}
    for i in range(_N_BLOCKS):
        names[f"att{i}_wq"] = (D_MODEL, D_K)
        names[f"att{i}_wk"] = (D_MODEL, D_K)
        names[f"att{i}_wv"] = (D_MODEL, D_K)
        names[f"proj{i}_w"] = (D_K, D_MODEL)
        names[f"proj{i}_b"] = (D_MODEL,)
    names["head0_w"] = (D_MODEL, HEAD_HIDDEN)
    names["head0_b"] = (HEAD_HIDDEN,)
    names["head1_w"] = (HEAD_HIDDEN, 1)
    names["head1_b"] = (1,)
    return names


def init_adapter(seed: int) -> AdapterModel:
    """Fresh untrained model with seeded uniform fan-in initialization."""
    rng = np.random.default_rng((int(seed), _RNG_TAG))
    params = {}
    for i in range(_N_BLOCKS):
        att = init_attention(rng, D_MODEL, D_K)
        params[f"att{i}_wq"] = att.w_q
        params[f"att{i}_wk"] = att.w_k
        params[f"att{i}_wv"] = att.w_v
        proj = init_linear(rng, D_K, D_MODEL, "identity")
        params[f"proj{i}_w"] = proj.w
        params[f"proj{i}_b"] = proj.b
    head0 = init_linear(rng, D_MODEL, HEAD_HIDDEN, "relu")
    head1 = init_linear(rng, HEAD_HIDDEN, 1, "identity")
    params["head0_w"] = head0.w
    params["head0_b"] = head0.b
    params["head1_w"] = head1.w
    params["head1_b"] = head1.b
    config = {
        "window_len": WINDOW_LEN,
        "d_model": D_MODEL,
        "d_k": D_K,
        "head_hidden": HEAD_HIDDEN,
        "s_sum_scale": S_SUM_SCALE,
        "theta_scale": THETA_SCALE,
        "delta_clamp_deg": DELTA_CLAMP_DEG,
        "trained": False,
    }
    return AdapterModel(params=params, config=config)


def _forward_window(params: dict, tokens: np.ndarray):
    caches = []
    h = tokens
    for i in range(_N_BLOCKS):
        att = AttentionParams(
            w_q=params[f"att{i}_wq"], w_k=params[f"att{i}_wk"], w_v=params[f"att{i}_wv"]
        )
        y, att_cache = attention_forward(h, att)
        z = y @ params[f"proj{i}_w"] + params[f"proj{i}_b"]
        caches.append((att_cache, y))
        h = h + z
    head = (
        LinearLayer(w=params["head0_w"], b=params["head0_b"], activation="relu"),
        LinearLayer(w=params["head1_w"], b=params["head1_b"], activation="identity"),
    )
    out, head_cache = mlp_forward(h[-1:, :], head)
    return float(out[0, 0]), (caches, head_cache, tokens.shape[0])


def _backward_window(params: dict, cache, d_out: float) -> dict:
    caches, head_cache, n_tokens = cache
    d_last, head_grads = mlp_backward(np.array([[d_out]]), head_cache)
    grads = {
        "head0_w": head_grads[0][0],
        "head0_b": head_grads[0][1],
        "head1_w": head_grads[1][0],
        "head1_b": head_grads[1][1],
    }
    d_h = np.zeros((n_tokens, D_MODEL))
    d_h[-1] = d_last[0]
    for i in range(_N_BLOCKS - 1, -1, -1):
        att_cache, y = caches[i]
        grads[f"proj{i}_w"] = y.T @ d_h
        grads[f"proj{i}_b"] = d_h.sum(axis=0)
        d_y = d_h @ params[f"proj{i}_w"].T
        d_x, d_wq, d_wk, d_wv = attention_backward(d_y, att_cache)
        grads[f"att{i}_wq"] = d_wq
        grads[f"att{i}_wk"] = d_wk
        grads[f"att{i}_wv"] = d_wv
        d_h = d_h + d_x
    return grads


def windows_from_samples(samples, stride: int = WINDOW_STRIDE):
    """Sliding windows over one sample sequence; label is the newest delta."""
    tokens = [token_from(s.ds, s.s, s.theta_deg) for s in samples]
    windows, labels = [], []
    for i in range(0, len(samples), stride):
        windows.append(WindowBuffer.from_token_list(tokens[: i + 1]).tokens)
        labels.append(samples[i].dtheta_deg)
    return windows, labels


def adapt_samples_from_frames(frames) -> list:
    """Per-tick adaptation samples from recorded episode frames."""
    return [
        AdaptSample(ds=f.ds, s=f.s, theta_deg=f.theta_deg, dtheta_deg=f.dtheta_deg)
        for f in frames
    ]


def train_adapter(
    data,
    seed: int,
    epochs: int = 100,
    lr: float = 0.001,
    batch_size: int = 64,
    stride: int = WINDOW_STRIDE,
):
    """Train on sample sequences with Adam and MSE; returns (model, history).

    Windows are assembled per sequence, shuffled 8:2 into train/validation
    deterministically from the seed, and the per-epoch mean squared error of
    both splits is recorded.
    """
    windows, labels = [], []
    for sequence in data:
        w, l = windows_from_samples(sequence, stride=stride)
        windows.extend(w)
        labels.extend(l)
    if len(windows) < 50:
        raise DataError(f"need at least 50 windows to train, got {len(windows)}")
    windows = np.asarray(windows)
    labels = np.asarray(labels, dtype=float)

    rng = np.random.default_rng((int(seed), _RNG_TAG))
    order = rng.permutation(len(windows))
    windows, labels = windows[order], labels[order]
    n_train = int(math.floor(0.8 * len(windows)))
    if n_train < 1 or n_train == len(windows):
        raise DataError(f"split needs both sides non-empty, got {len(windows)} windows")
    w_tr, y_tr = windows[:n_train], labels[:n_train]
    w_val, y_val = windows[n_train:], labels[n_train:]

    model = init_adapter(seed)
    params = dict(model.params)
    state = AdamState.fresh(params)
    train_hist, val_hist = [], []
    for epoch in range(epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            idx = perm[start : start + batch_size]
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            for i in idx:
                pred, cache = _forward_window(params, w_tr[i])
                d_out = (pred - y_tr[i]) / len(idx)
                for k, g in _backward_window(params, cache, d_out).items():
                    grads[k] += g
            params, state = adam_step(params, grads, state, lr)
        train_mse = _set_mse(params, w_tr, y_tr)
        val_mse = _set_mse(params, w_val, y_val)
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        train_hist.append(train_mse)
        val_hist.append(val_mse)

    config = dict(model.config)
    config["trained"] = True
    config["seed"] = int(seed)
    config["epochs"] = int(epochs)
    config["lr"] = float(lr)
    config["batch_size"] = int(batch_size)
    config["stride"] = int(stride)
    trained = AdapterModel(params=params, config=config)
    history = {"train_mse": np.array(train_hist), "val_mse": np.array(val_hist)}
    return trained, history


def _set_mse(params: dict, windows: np.ndarray, labels: np.ndarray) -> float:
    preds = np.array([_forward_window(params, w)[0] for w in windows])
    with np.errstate(over="ignore"):
        return float(np.mean((preds - labels) ** 2))


def predict_delta_theta(model: AdapterModel, w: WindowBuffer) -> float:
    """Corrective delta for one window, clamped to the actuation bound."""
    if not model.trained:
        raise ModelError("adapter model is untrained; train or load one first")
    out, _ = _forward_window(model.params, w.tokens)
    return float(np.clip(out, -DELTA_CLAMP_DEG, DELTA_CLAMP_DEG))


def apply_adaptation(theta_deg: float, dtheta_deg: float) -> float:
    """New commanded angle, clamped to the actuation range."""
    return float(np.clip(theta_deg + dtheta_deg, 0.0, 90.0))


def save_adapter(path, model: AdapterModel, history=None) -> None:
    """Persist adapter parameters (and loss history) to one model file."""
    arrays = dict(model.params)
    if history is not None:
        arrays["train_mse"] = np.asarray(history["train_mse"], dtype=float)
        arrays["val_mse"] = np.asarray(history["val_mse"], dtype=float)
    save_model(path, _MODEL_KIND, dict(model.config), arrays)


def load_adapter(path):
    """Load a persisted adapter; returns (model, history or None)."""
    kind, meta, arrays = load_model(path)
    if kind != _MODEL_KIND:
        raise ModelError(f"expected an {_MODEL_KIND!r} model file, got {kind!r}")
    history = None
    if "train_mse" in arrays and "val_mse" in arrays:
        history = {"train_mse": arrays.pop("train_mse"), "val_mse": arrays.pop("val_mse")}
    try:
        model = AdapterModel(params=arrays, config=meta)
    except ModelError as exc:
        raise ModelError(f"corrupt adapter model file: {exc}") from None
    return model, history


@dataclass(frozen=True)
class EpisodeResult:
    """Per-tick traces and the outcome of one closed-loop episode."""

    object_name: str
    seed: int
    dropped: bool
    drop_tick: int | None
    ticks_survived: int
    t_tick: np.ndarray
    theta_deg: np.ndarray
    log_likelihood: np.ndarray
    stable: np.ndarray
    force_n: np.ndarray
    fill_g: np.ndarray
    adapted_ticks: tuple


def run_closed_loop(
    state: SimState,
    generator=None,
    estimator=None,
    te: float | None = None,
    adapter=None,
    disturbances=(),
    max_ticks: int = 1600,
    noise: bool = True,
    initial_theta_deg: float | None = None,
    settle_s: float = SETTLE_S,
) -> EpisodeResult:
    """Approach, predict an initial angle, then adapt until drop or timeout.

    The gripper closes from the caller's state until contact; the generator
    (or the explicit initial angle) sets the grasp command; after a settle
    interval the adapter is queried at the decision rate, but only on ticks
    the estimator marks unstable, and only deltas beyond the actuation
    deadband are commanded. Disturbances are injected at scheduled ticks.
    """
    if initial_theta_deg is None and generator is None:
        raise ModelError("run_closed_loop needs a generator or an explicit initial angle")
    if estimator is not None and te is None:
        raise ModelError("an estimator needs its threshold te")

    from .generator import predict_initial_grasp

    pending = sorted(((int(at), ev) for at, ev in disturbances), key=lambda p: p[0])
    settle_ticks = int(round(settle_s / DT_S))

    history: list[tuple[TaxelFrame, float]] = []
    t_trace, theta_trace, ll_trace, stable_trace, force_trace, fill_trace = (
        [], [], [], [], [], [],
    )
    adapted_ticks = []

    phase = "approach"
    main_start = None
    contact_tick = None
    drop_tick = None
    state = set_target_angle(state, 90.0)

    while state.t_tick < max_ticks and not state.dropped:
        t = state.t_tick
        frame = render_taxels(state, noise=noise)
        theta_now = state.gripper.theta_deg
        history.append((frame, theta_now))
        if len(history) > WINDOW_LEN + 1:
            history.pop(0)
        contact = contact_state(state)

        if estimator is not None:
            feature = np.concatenate([frame.values, [theta_now], state.pose])
            try:
                ll = float(gmm_log_likelihood(estimator, feature))
            except (ModelError, DimensionError) as exc:
                raise ModelError(f"estimator failed at tick {t}: {exc}") from None
            stable = math.exp(min(ll, 700.0)) > te
        else:
            ll = math.nan
            stable = True

        t_trace.append(t)
        theta_trace.append(theta_now)
        ll_trace.append(ll)
        stable_trace.append(stable)
        force_trace.append(contact.normal_force_n)
        fill_trace.append(state.fill_g)

        if phase == "approach" and contact.in_contact:
            contact_tick = t
            if initial_theta_deg is not None:
                target = float(np.clip(initial_theta_deg, 0.0, 90.0))
            else:
                try:
                    target = predict_initial_grasp(generator, frame.values, theta_now)
                except (ModelError, DimensionError) as exc:
                    raise ModelError(f"generator failed at tick {t}: {exc}") from None
            state = set_target_angle(state, target)
            phase = "settle"
        elif phase == "settle" and contact_tick is not None and t >= contact_tick + settle_ticks:
            phase = "main"
            main_start = t

        if (
            phase == "main"
            and adapter is not None
            and not stable
            and (t - main_start) % DECISION_PERIOD_TICKS == 0
        ):
            window = build_window_features(history[-(WINDOW_LEN + 1) :])
            try:
                dtheta = predict_delta_theta(adapter, window)
            except ModelError as exc:
                raise ModelError(f"adapter failed at tick {t}: {exc}") from None
            if abs(dtheta) > ACTUATION_DEADBAND_DEG:
                state = set_target_angle(state, apply_adaptation(theta_now, dtheta))
                adapted_ticks.append(t)

        while pending and pending[0][0] == t:
            state = inject_disturbance(state, pending.pop(0)[1])

        state = step(state)
        if state.dropped and drop_tick is None:
            drop_tick = state.t_tick

    ticks_survived = drop_tick if drop_tick is not None else max_ticks
    return EpisodeResult(
        object_name=state.object.name,
        seed=state.rng_seed,
        dropped=state.dropped,
        drop_tick=drop_tick,
        ticks_survived=int(ticks_survived),
        t_tick=np.array(t_trace, dtype=int),
        theta_deg=np.array(theta_trace),
        log_likelihood=np.array(ll_trace),
        stable=np.array(stable_trace, dtype=bool),
        force_n=np.array(force_trace),
        fill_g=np.array(fill_trace),
        adapted_ticks=tuple(adapted_ticks),
    )


def write_episode_trace(path, result: EpisodeResult) -> Path:
    """Tab-separated per-tick trace for plotting and byte comparison."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"object={result.object_name}\tseed={result.seed}"
        f"\tdropped={int(result.dropped)}"
        f"\tdrop_tick={-1 if result.drop_tick is None else result.drop_tick}"
        f"\tticks_survived={result.ticks_survived}",
        "t_tick\ttheta_deg\tforce_n\tlog_likelihood\tstable\tdropped",
    ]
    for i, t in enumerate(result.t_tick):
        dropped_now = int(result.drop_tick is not None and t >= result.drop_tick)
        lines.append(
            f"{t}\t{result.theta_deg[i]:.9g}\t{result.force_n[i]:.9g}"
            f"\t{result.log_likelihood[i]:.9g}\t{int(result.stable[i])}\t{dropped_now}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path
