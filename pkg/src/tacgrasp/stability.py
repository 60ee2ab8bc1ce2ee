"""Gaussian-mixture stability estimator over grasp features.

A mixture is fit with EM (k-means++ initialization, log-space E-step,
regularized covariances) on features of stable grasps. A likelihood
threshold picked on an ROC over labeled samples, restricted to the
two-standard-deviation likelihood bounds of the mixture, turns the density
into a stable/unstable decision.
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
    NumericalError,
    ValidationError,
)
from .nn import load_model, save_model
from .tactile import N_TAXELS

FEATURE_DIM = N_TAXELS + 1 + 7
DEFAULT_COMPONENTS = 2
EM_MAX_ITER = 100
EM_TOL = 1e-7
KMEANS_MAX_ITER = 50
REG_EPS = 1e-6

_MODEL_KIND = "estimator"
_KMEANS_TAG = 0x4B4D


@dataclass(frozen=True)
class GraspFeature:
    """Tactile reading, gripper angle, and end-effector pose as one vector."""

    s: np.ndarray
    theta_deg: float
    pose: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        pose = np.asarray(self.pose, dtype=float)
        if s.shape != (N_TAXELS,):
            raise DimensionError(f"s must have shape ({N_TAXELS},), got {s.shape}")
        if pose.shape != (7,):
            raise DimensionError(f"pose must have shape (7,), got {pose.shape}")
        quat_norm = float(np.linalg.norm(pose[3:7]))
        if abs(quat_norm - 1.0) > 1e-6:
            raise ValidationError(
                f"pose quaternion must be unit-norm within 1e-6, got {quat_norm}"
            )
        for name, arr in (("s", s), ("pose", pose)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def packed(self) -> np.ndarray:
        return np.concatenate([self.s, [self.theta_deg], self.pose])


def feature_from_frame(frame) -> GraspFeature:
    return GraspFeature(s=frame.s, theta_deg=frame.theta_deg, pose=frame.pose)


def features_from_frames(frames) -> np.ndarray:
    """Stack frame records into an (n, 40) feature matrix."""
    out = np.empty((len(frames), FEATURE_DIM))
    for i, frame in enumerate(frames):
        out[i, :N_TAXELS] = frame.s
        out[i, N_TAXELS] = frame.theta_deg
        out[i, N_TAXELS + 1 :] = frame.pose
    return out


@dataclass(frozen=True)
class GmmModel:
    """Fitted mixture: weights, means, Cholesky factors of each covariance."""

    weights: np.ndarray
    means: np.ndarray
    chols: tuple[np.ndarray, ...]
    reg_eps: float
    ll_history: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        means = np.asarray(self.means, dtype=float)
        if weights.ndim != 1 or means.ndim != 2 or len(weights) != len(means):
            raise DimensionError("weights must be (m,), means (m, d)")
        if abs(float(weights.sum()) - 1.0) > 1e-12:
            raise ValidationError("component weights must sum to 1 within 1e-12")
        if np.any(weights < 0):
            raise ValidationError("component weights must be non-negative")
        chols = tuple(np.asarray(c, dtype=float) for c in self.chols)
        d = means.shape[1]
        for j, chol in enumerate(chols):
            if chol.shape != (d, d):
                raise DimensionError(f"chol {j} must have shape ({d}, {d})")
            if np.any(np.diag(chol) <= 0):
                raise ValidationError(f"chol {j} is not positive-definite")
        for name, arr in (("weights", weights), ("means", means)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "chols", chols)
        object.__setattr__(
            self, "ll_history", np.asarray(self.ll_history, dtype=float)
        )

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([chol @ chol.T for chol in self.chols])


@dataclass(frozen=True)
class ThresholdReport:
    """Chosen threshold with its ROC audit trail."""

    te: float
    a: float
    b: float
    roc_points: tuple[tuple[float, float, float], ...]
    chosen_j: float
    clamped: bool
    separable: bool

    def __post_init__(self):
        if self.a > self.b:
            raise ValidationError(f"bounds must satisfy a <= b, got {self.a}, {self.b}")
        if not self.a <= self.te <= self.b:
            raise ValidationError(
                f"te must lie in [{self.a}, {self.b}], got {self.te}"
            )
        object.__setattr__(
            self,
            "roc_points",
            tuple((float(f), float(t), float(c)) for f, t, c in self.roc_points),
        )


def _logsumexp(a: np.ndarray, axis: int | None = None, keepdims: bool = False):
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    if not keepdims and axis is not None:
        out = np.squeeze(out, axis=axis)
    elif not keepdims:
        out = float(np.squeeze(out))
    return out


def _as_data_matrix(data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionError(f"data must be (n, d), got shape {x.shape}")
    return x


def kmeans_init(data, m: int, seed: int):
    """k-means++ seeding plus Lloyd iterations; returns (means, assignments)."""
    x = _as_data_matrix(data)
    n = len(x)
    if m < 1:
        raise DataError(f"component count must be >= 1, got {m}")
    if n < m:
        raise DataError(f"need at least {m} points for {m} clusters, got {n}")
    rng = np.random.default_rng((int(seed), _KMEANS_TAG))

    centers = [x[int(rng.integers(n))]]
    for _ in range(1, m):
        d2 = np.min(
            ((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(axis=2), axis=1
        )
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
    centers = np.array(centers)

    assign = None
    for _ in range(KMEANS_MAX_ITER):
        dist2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new_assign = dist2.argmin(axis=1)
        for j in range(m):
            if not np.any(new_assign == j):
                # Reseed an empty cluster with the farthest point.
                far = int(dist2[np.arange(n), new_assign].argmax())
                new_assign[far] = j
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(m):
            centers[j] = x[assign == j].mean(axis=0)
    return centers, assign


def _mvn_logpdf_rows(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    diff = x - mean
    z = np.linalg.solve(chol, diff.T)
    logdet_half = float(np.sum(np.log(np.diag(chol))))
    return -0.5 * d * math.log(2.0 * math.pi) - logdet_half - 0.5 * (z**2).sum(axis=0)


def _cholesky_or_raise(cov: np.ndarray, component: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"component {component} covariance is singular despite regularization"
        ) from None


def em_fit(
    data,
    m: int,
    seed: int,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
    reg_eps: float = REG_EPS,
) -> GmmModel:
    """Fit an m-component mixture with EM; log-likelihood recorded per iteration."""
    x = _as_data_matrix(data)
    n, d = x.shape
    if n < 5 * m:
        raise DataError(f"need at least {5 * m} points to fit m={m}, got {n}")

    means, assign = kmeans_init(x, m, seed)
    weights = np.array([(assign == j).mean() for j in range(m)])
    chols = []
    for j in range(m):
        member = x[assign == j]
        diff = member - means[j]
        cov = diff.T @ diff / len(member) + reg_eps * np.eye(d)
        chols.append(_cholesky_or_raise(cov, j))

    ll_history = []
    ll_prev = None
    for _ in range(max_iter):
        log_comp = np.empty((n, m))
        for j in range(m):
            log_comp[:, j] = math.log(max(weights[j], 1e-300)) + _mvn_logpdf_rows(
                x, means[j], chols[j]
            )
        log_norm = _logsumexp(log_comp, axis=1, keepdims=True)
        ll = float(log_norm.sum())
        ll_history.append(ll)
        if ll_prev is not None and ll - ll_prev < tol:
            break
        ll_prev = ll

        resp = np.exp(log_comp - log_norm)
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        chols = []
        for j in range(m):
            diff = x - means[j]
            cov = (resp[:, j : j + 1] * diff).T @ diff / nk[j] + reg_eps * np.eye(d)
            chols.append(_cholesky_or_raise(cov, j))

    weights = weights / weights.sum()
    return GmmModel(
        weights=weights,
        means=means,
        chols=tuple(chols),
        reg_eps=reg_eps,
        ll_history=np.array(ll_history),
    )


def _packed(x) -> np.ndarray:
    if isinstance(x, GraspFeature):
        return x.packed
    return np.asarray(x, dtype=float)


def gmm_log_likelihood(model: GmmModel, x) -> np.ndarray | float:
    """Log mixture density; accepts one vector/feature or an (n, d) matrix."""
    vec = _packed(x)
    single = vec.ndim == 1
    rows = vec[None, :] if single else vec
    if rows.ndim != 2 or rows.shape[1] != model.d:
        raise DimensionError(
            f"feature dimension must be {model.d}, got shape {vec.shape}"
        )
    log_comp = np.empty((len(rows), model.m))
    for j in range(model.m):
        log_comp[:, j] = math.log(max(model.weights[j], 1e-300)) + _mvn_logpdf_rows(
            rows, model.means[j], model.chols[j]
        )
    out = _logsumexp(log_comp, axis=1)
    return float(out[0]) if single else out


def gmm_likelihood(model: GmmModel, x) -> np.ndarray | float:
    """Mixture density, computed in log space and exponentiated."""
    out = gmm_log_likelihood(model, x)
    return math.exp(out) if isinstance(out, float) else np.exp(out)


def two_sigma_bounds(model: GmmModel) -> tuple[float, float]:
    """Per-component density value at Mahalanobis distance 2; returns (min, max)."""
    values = []
    for chol in model.chols:
        logdet_half = float(np.sum(np.log(np.diag(chol))))
        log_v = -0.5 * model.d * math.log(2.0 * math.pi) - logdet_half - 2.0
        values.append(math.exp(log_v))
    return min(values), max(values)


def _rates(te: float, p_stable: np.ndarray, p_unstable: np.ndarray):
    tpr = float(np.mean(p_stable > te))
    fpr = float(np.mean(p_unstable > te))
    return tpr, fpr


def select_threshold(model: GmmModel, stable_set, unstable_set) -> ThresholdReport:
    """Pick te in the two-sigma bounds of the mixture; see threshold_from_likelihoods."""
    p_stable = gmm_likelihood(model, _matrix(stable_set, model.d))
    p_unstable = gmm_likelihood(model, _matrix(unstable_set, model.d))
    a, b = two_sigma_bounds(model)
    return threshold_from_likelihoods(p_stable, p_unstable, a, b)


def threshold_from_likelihoods(p_stable, p_unstable, a: float, b: float) -> ThresholdReport:
    """Pick te in [a, b] maximizing Youden's J = TPR - FPR under strict p > te.

    Candidates are the labeled likelihood values inside [a, b] plus the
    bounds; ties prefer the larger (stricter) threshold. When no labeled
    likelihood lands inside the bounds, the best unrestricted candidate is
    clamped into [a, b] and the report is flagged.
    """
    p_stable = np.atleast_1d(np.asarray(p_stable, dtype=float))
    p_unstable = np.atleast_1d(np.asarray(p_unstable, dtype=float))
    if len(p_stable) == 0 or len(p_unstable) == 0:
        raise DataError("both stable and unstable sets must be non-empty")

    labeled = np.concatenate([p_stable, p_unstable])
    in_range = labeled[(labeled >= a) & (labeled <= b)]

    audit = np.unique(np.concatenate([labeled, [a, b]]))
    roc_points = []
    for cand in audit:
        tpr, fpr = _rates(float(cand), p_stable, p_unstable)
        roc_points.append((fpr, tpr, float(cand)))

    def best_of(candidates: np.ndarray) -> tuple[float, float]:
        best_te, best_j = None, -math.inf
        for cand in np.unique(candidates):
            tpr, fpr = _rates(float(cand), p_stable, p_unstable)
            j = tpr - fpr
            if j > best_j or (j == best_j and cand > best_te):
                best_te, best_j = float(cand), j
        return best_te, best_j

    if len(in_range) > 0:
        te, _ = best_of(np.concatenate([in_range, [a, b]]))
        clamped = False
    else:
        unrestricted_te, _ = best_of(labeled)
        te = float(np.clip(unrestricted_te, a, b))
        clamped = True

    tpr, fpr = _rates(te, p_stable, p_unstable)
    _, best_j_anywhere = best_of(np.concatenate([labeled, [a, b]]))
    return ThresholdReport(
        te=te,
        a=a,
        b=b,
        roc_points=tuple(roc_points),
        chosen_j=tpr - fpr,
        clamped=clamped,
        separable=best_j_anywhere > 0.0,
    )


def _matrix(features, d: int) -> np.ndarray:
    if isinstance(features, np.ndarray) and features.ndim == 2:
        return features
    rows = [_packed(f) for f in features]
    if not rows:
        return np.empty((0, d))
    return np.stack(rows)


def is_stable(model: GmmModel, te: float, x) -> bool:
    """Strict threshold test: density above te counts as stable."""
    return bool(gmm_likelihood(model, _packed(x)) > te)


def auc_score(stable_scores, unstable_scores) -> float:
    """Rank-based AUC (Mann-Whitney with average ranks for ties)."""
    pos = np.asarray(stable_scores, dtype=float)
    neg = np.asarray(unstable_scores, dtype=float)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("AUC needs at least one score in each class")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(len(combined))
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[: len(pos)].sum())
    n_pos, n_neg = len(pos), len(neg)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def fit_stability_estimator(frames, seed: int, m: int = DEFAULT_COMPONENTS):
    """Full estimator pipeline over pooled labeled frames.

    Splits frames 8:2, fits the mixture on training stable features, selects
    the threshold on training labels, and scores validation AUC on log
    densities. Returns (model, report, metrics dict).
    """
    from . import data_io

    train, val = data_io.split_dataset(frames, seed=int(seed))
    tr_stable = features_from_frames([f for f in train if f.label == "stable"])
    tr_unstable = features_from_frames([f for f in train if f.label == "unstable"])
    val_stable = features_from_frames([f for f in val if f.label == "stable"])
    val_unstable = features_from_frames([f for f in val if f.label == "unstable"])
    if len(tr_stable) < 5 * m:
        raise DataError(
            f"need at least {5 * m} stable training frames, got {len(tr_stable)}"
        )
    if len(tr_unstable) == 0 or len(val_stable) == 0 or len(val_unstable) == 0:
        raise DataError("both labels must appear in both splits")

    model = em_fit(tr_stable, m=m, seed=int(seed))
    report = select_threshold(model, tr_stable, tr_unstable)
    val_auc = auc_score(
        gmm_log_likelihood(model, val_stable),
        gmm_log_likelihood(model, val_unstable),
    )
    metrics = {
        "val_auc": float(val_auc),
        "train_stable": len(tr_stable),
        "train_unstable": len(tr_unstable),
        "val_stable": len(val_stable),
        "val_unstable": len(val_unstable),
        "em_iterations": len(model.ll_history),
    }
    return model, report, metrics


def save_estimator(path, model: GmmModel, report: ThresholdReport | None = None):
    """Persist the mixture (and threshold report) in the model container."""
    arrays = {
        "weights": model.weights,
        "means": model.means,
        "ll_history": model.ll_history,
    }
    for j, chol in enumerate(model.chols):
        arrays[f"chol{j}"] = chol
    meta = {"m": model.m, "d": model.d, "reg_eps": model.reg_eps}
    if report is not None:
        arrays["roc_points"] = np.array(report.roc_points, dtype=float).reshape(-1, 3)
        meta["threshold"] = {
            "te": report.te,
            "a": report.a,
            "b": report.b,
            "chosen_j": report.chosen_j,
            "clamped": report.clamped,
            "separable": report.separable,
        }
    save_model(path, _MODEL_KIND, meta, arrays)


def load_estimator(path):
    """Load a persisted estimator; returns (model, report or None)."""
    kind, meta, arrays = load_model(path)
    if kind != _MODEL_KIND:
        raise ModelError(f"expected an {_MODEL_KIND!r} model file, got {kind!r}")
    try:
        m = int(meta["m"])
        model = GmmModel(
            weights=arrays["weights"],
            means=arrays["means"],
            chols=tuple(arrays[f"chol{j}"] for j in range(m)),
            reg_eps=float(meta["reg_eps"]),
            ll_history=arrays["ll_history"],
        )
    except KeyError as exc:
        raise ModelError(f"estimator model file missing entry {exc}") from None
    except (ValidationError, DimensionError) as exc:
        raise ModelError(f"corrupt estimator model file: {exc}") from None
    report = None
    if "threshold" in meta:
        t = meta["threshold"]
        roc = arrays.get("roc_points", np.empty((0, 3)))
        report = ThresholdReport(
            te=float(t["te"]),
            a=float(t["a"]),
            b=float(t["b"]),
            roc_points=tuple((r[0], r[1], r[2]) for r in roc),
            chosen_j=float(t["chosen_j"]),
            clamped=bool(t["clamped"]),
            separable=bool(t["separable"]),
        )
    return model, report


def write_threshold_report(path, report: ThresholdReport) -> Path:
    """Human-readable threshold report with the full ROC table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "stability threshold report",
        f"te={report.te:.9g}",
        f"a={report.a:.9g}",
        f"b={report.b:.9g}",
        f"youden_j={report.chosen_j:.9g}",
        f"clamped={report.clamped}",
        f"separable={report.separable}",
        "",
        "fpr\ttpr\tcandidate_te",
    ]
    for fpr, tpr, cand in report.roc_points:
        lines.append(f"{fpr:.9g}\t{tpr:.9g}\t{cand:.9g}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path
