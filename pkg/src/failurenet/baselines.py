"""Non-recurrent failure detectors.

Four families: speed thresholding, FFT yaw-spectral-power thresholding,
Kalman-filter residual detection over a constant-velocity model, and small
dense networks fed either raw pose windows or the speed/FFT pre-filters.
Thresholds are fitted by exhaustive grid search over statistic kinds and
candidate cut points on validation accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import PoseWindow, featurize_values
from .nn import Mlp, Tensor, TrainConfig

__all__ = [
    "ThresholdRule",
    "KalmanConfig",
    "window_speeds",
    "speed_threshold_detect",
    "fft_yaw_power",
    "fft_threshold_detect",
    "kalman_residuals",
    "kalman_detect",
    "fit_threshold",
    "fit_kalman_threshold",
    "mlp_variant_detect",
    "variant_features",
    "variant_input_dim",
    "init_mlp_variant",
    "train_mlp_variant",
    "save_variant",
    "load_variant",
    "write_rules",
    "read_rules",
]

STATISTIC_KINDS = ("avg", "max")
PRE_FILTERS = ("none", "speed", "fft")


@dataclass(frozen=True)
class ThresholdRule:
    """A fitted scalar detector: statistic of a window feature vs. a cut."""

    kind: str  # "avg" | "max"
    threshold: float
    feature: str  # "speed" | "fft_power"
    accuracy: float = float("nan")  # accuracy on the data it was fitted to

    def __post_init__(self) -> None:
        if self.kind not in STATISTIC_KINDS:
            raise ValueError(f"unknown statistic kind {self.kind!r}")
        if self.feature not in ("speed", "fft_power"):
            raise ValueError(f"unknown feature {self.feature!r}")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True)
class KalmanConfig:
    """Constant-velocity filter over (x, y, theta) and their rates.

    q scales the process noise, r the measurement noise on the observed
    pose. delta is the detection cut on the worst post-warm-up residual.
    p0_rate is the prior variance on the unobserved rate states; it is kept
    large so one update suffices to lock onto a steady velocity.
    """

    q: float = 0.01
    r: float = 1e-4
    delta: float = 0.2
    p0_rate: float = 10.0
    warmup: int = 2

    def __post_init__(self) -> None:
        if self.q <= 0 or self.r <= 0:
            raise ValueError("noise scales must be positive")
        if self.delta <= 0:
            raise ValueError("residual threshold must be positive")
        if self.warmup < 1:
            raise ValueError("warmup must be at least 1 step")


def window_speeds(window: PoseWindow) -> np.ndarray:
    """Finite-difference speeds between consecutive poses, length L - 1."""
    dt = np.diff(window.times)
    steps = np.diff(window.poses[:, :2], axis=0)
    return np.hypot(steps[:, 0], steps[:, 1]) / dt


def _statistic(values: np.ndarray, kind: str) -> float:
    if kind == "avg":
        return float(np.mean(values))
    if kind == "max":
        return float(np.max(values))
    raise ValueError(f"unknown statistic kind {kind!r}")


def speed_threshold_detect(window: PoseWindow, rule: ThresholdRule) -> int:
    """1 (Unsafe) when the speed statistic reaches the fitted threshold."""
    stat = _statistic(window_speeds(window), rule.kind)
    return int(stat >= rule.threshold)


def fft_yaw_power(window: PoseWindow) -> np.ndarray:
    """Spectral powers |Y_k|^2 of the unwrapped yaw for modes 2 .. L // 2.

    The DC term and the first mode carry route geometry (mean heading and
    slow turns), so only the higher modes are kept.
    """
    L = len(window.times)
    if L < 4:
        raise ValueError(f"need at least 4 poses for spectral power, got {L}")
    yaw = np.unwrap(window.poses[:, 2])
    spectrum = np.fft.rfft(yaw)
    return np.abs(spectrum[2 : L // 2 + 1]) ** 2


def fft_threshold_detect(window: PoseWindow, rule: ThresholdRule) -> int:
    stat = _statistic(fft_yaw_power(window), rule.kind)
    return int(stat >= rule.threshold)


# -- Kalman residual detector -------------------------------------------------


def _cv_matrices(dt: float, cfg: KalmanConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    eye3 = np.eye(3)
    F = np.block([[eye3, dt * eye3], [np.zeros((3, 3)), eye3]])
    H = np.hstack([eye3, np.zeros((3, 3))])
    Q = cfg.q * np.eye(6)
    R = cfg.r * np.eye(3)
    return F, H, Q, R


def kalman_residuals(window: PoseWindow, cfg: KalmanConfig) -> np.ndarray:
    """Planar distances between each observed and filter-predicted position.

    The filter is seeded on the first pose with zero rates, then runs the
    standard predict/update cycle. Residuals are taken against the prior
    prediction at each step; the first cfg.warmup steps are discarded while
    the rate estimates settle. Covariance updates use the Joseph form and
    positive definiteness is checked every step.
    """
    times = window.times
    poses = window.poses
    dt = float(times[1] - times[0])
    F, H, Q, R = _cv_matrices(dt, cfg)

    x = np.concatenate([poses[0], np.zeros(3)])
    P = np.diag([cfg.r, cfg.r, cfg.r, cfg.p0_rate, cfg.p0_rate, cfg.p0_rate])
    eye6 = np.eye(6)
    residuals = []
    for step in range(1, len(times)):
        x = F @ x
        P = F @ P @ F.T + Q
        z = poses[step]
        innovation = z - H @ x
        residuals.append(float(np.hypot(innovation[0], innovation[1])))
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ innovation
        IKH = eye6 - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)) or np.min(np.linalg.eigvalsh(P)) <= 0.0:
            raise ValueError(f"covariance lost positive definiteness at step {step}")
    return np.asarray(residuals[cfg.warmup :])


def kalman_detect(window: PoseWindow, cfg: KalmanConfig) -> int:
    """1 when the worst post-warm-up residual exceeds cfg.delta."""
    res = kalman_residuals(window, cfg)
    if res.size == 0:
        return 0
    return int(np.max(res) > cfg.delta)


def fit_kalman_threshold(
    windows: list[PoseWindow],
    labels: np.ndarray,
    cfg: KalmanConfig,
    candidates: np.ndarray | None = None,
) -> KalmanConfig:
    """Grid-search delta over the observed residual maxima.

    Ties break toward the smaller delta, matching fit_threshold.
    """
    labels = np.asarray(labels, dtype=np.int64)
    maxima = np.array(
        [np.max(r) if (r := kalman_residuals(w, cfg)).size else 0.0 for w in windows]
    )
    if candidates is None:
        uniq = np.unique(maxima)
        mids = (uniq[:-1] + uniq[1:]) / 2.0 if uniq.size > 1 else np.array([])
        candidates = np.concatenate([[max(uniq[0] / 2.0, 1e-6)], mids, [uniq[-1] * 2.0 + 1e-6]])
    best_delta, best_acc = None, -1.0
    for delta in candidates:
        if delta <= 0:
            continue
        preds = (maxima > delta).astype(np.int64)
        acc = float(np.mean(preds == labels))
        if acc > best_acc or (acc == best_acc and best_delta is not None and delta < best_delta):
            best_acc, best_delta = acc, float(delta)
    return replace(cfg, delta=best_delta)


# -- threshold fitting ----------------------------------------------------------


def fit_threshold(
    score_lists: list[np.ndarray],
    labels: np.ndarray,
    feature: str,
    kinds: tuple[str, ...] = STATISTIC_KINDS,
) -> ThresholdRule:
    """Exhaustive search over statistic kinds and cut points.

    Candidates per kind are the midpoints of the sorted unique statistics
    plus sentinels below the minimum and above the maximum, so the all-Safe
    and all-Unsafe verdicts are always reachable. The verdict is
    statistic >= threshold. Ties break toward the lower threshold; a later
    kind replaces an earlier one only on strictly better accuracy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(score_lists) != labels.size:
        raise ValueError("scores and labels length mismatch")
    if labels.size == 0:
        raise ValueError("cannot fit a threshold on no data")
    best: tuple[float, str, float] | None = None  # (accuracy, kind, threshold)
    for kind in kinds:
        stats = np.array([_statistic(np.asarray(s), kind) for s in score_lists])
        uniq = np.unique(stats)
        mids = (uniq[:-1] + uniq[1:]) / 2.0
        candidates = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
        for thr in candidates:
            preds = (stats >= thr).astype(np.int64)
            acc = float(np.mean(preds == labels))
            if best is None or acc > best[0] or (acc == best[0] and kind == best[1] and thr < best[2]):
                best = (acc, kind, float(thr))
    acc, kind, thr = best
    return ThresholdRule(kind=kind, threshold=thr, feature=feature, accuracy=acc)


# -- dense-network variants -----------------------------------------------------


def variant_input_dim(pre_filter: str, window_len: int) -> int:
    if pre_filter == "none":
        return 3 * window_len
    if pre_filter == "speed":
        return window_len - 1
    if pre_filter == "fft":
        return window_len // 2 - 1
    raise ValueError(f"unknown pre-filter {pre_filter!r}")


def variant_features(window: PoseWindow, pre_filter: str, feature_mode: str = "egocentric") -> np.ndarray:
    """Input vector for a dense variant.

    Raw windows are flattened pose sequences; the speed and FFT features
    are frame-invariant already so feature_mode only affects "none".
    """
    if pre_filter == "none":
        return featurize_values(window.poses, feature_mode).reshape(-1)
    if pre_filter == "speed":
        return window_speeds(window)
    if pre_filter == "fft":
        return fft_yaw_power(window)
    raise ValueError(f"unknown pre-filter {pre_filter!r}")


def mlp_variant_detect(
    window: PoseWindow, pre_filter: str, model: Mlp, feature_mode: str = "egocentric"
) -> float:
    """Detection score in (0, 1) from a dense network over window features."""
    feats = variant_features(window, pre_filter, feature_mode)
    if feats.shape[-1] != model.in_dim:
        raise ValueError(
            f"pre-filter {pre_filter!r} produces {feats.shape[-1]} features, model expects {model.in_dim}"
        )
    logit = model.forward_np(feats.reshape(1, -1))[0, 0]
    return float(nn.sigmoid(logit))


def init_mlp_variant(
    pre_filter: str,
    window_len: int = 10,
    hidden: tuple[int, ...] = (128, 32),
    seed: int = 0,
) -> Mlp:
    dims = [variant_input_dim(pre_filter, window_len), *hidden, 1]
    return nn.mlp_init(dims, np.random.default_rng(seed))


@dataclass
class VariantResult:
    model: Mlp
    pre_filter: str
    curves: list[dict]
    best_epoch: int
    best_val_loss: float
    val_accuracy: float


def train_mlp_variant(
    train_windows: list[PoseWindow],
    val_windows: list[PoseWindow],
    pre_filter: str,
    cfg: TrainConfig,
    hidden: tuple[int, ...] = (128, 32),
    feature_mode: str = "egocentric",
) -> VariantResult:
    """Fit one dense variant with the shared Adam loop."""
    window_len = len(train_windows[0].times)
    model = init_mlp_variant(pre_filter, window_len, hidden, seed=cfg.seed)
    x_train = np.stack([variant_features(w, pre_filter, feature_mode) for w in train_windows])
    y_train = np.array([w.label for w in train_windows], dtype=np.float64)
    x_val = np.stack([variant_features(w, pre_filter, feature_mode) for w in val_windows])
    y_val = np.array([w.label for w in val_windows], dtype=np.float64)
    if len(set(y_train.tolist())) < 2:
        raise ValueError("training split contains a single class; cannot fit a classifier")

    def logits_fn(xb: np.ndarray) -> Tensor:
        return model.forward(Tensor(xb))

    curves, (best_epoch, best_loss, best_params) = nn.train_binary_classifier(
        logits_fn, model.parameters(), x_train, y_train, x_val, y_val, cfg
    )
    for p, data in zip(model.parameters(), best_params):
        p.data = data
    val_logits = model.forward_np(x_val)[:, 0]
    val_acc = float(np.mean((nn.sigmoid(val_logits) > 0.5) == (y_val > 0.5)))
    return VariantResult(
        model=model,
        pre_filter=pre_filter,
        curves=curves,
        best_epoch=best_epoch,
        best_val_loss=best_loss,
        val_accuracy=val_acc,
    )


def save_variant(
    path: str | Path, model: Mlp, pre_filter: str, window_len: int, feature_mode: str = "egocentric"
) -> Path:
    meta = {
        "pre_filter": pre_filter,
        "window_len": window_len,
        "feature_mode": feature_mode,
        "dims": [w.shape[0] for w in model.weights] + [model.weights[-1].shape[1]],
        "activations": list(model.activations),
    }
    named = []
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        named.append((f"w{i}", w.data))
        named.append((f"b{i}", b.data))
    return nn.save_checkpoint(path, meta, named)


def load_variant(path: str | Path) -> tuple[Mlp, dict]:
    meta, arrays = nn.load_checkpoint(path)
    n_layers = len(meta["dims"]) - 1
    weights = [Tensor(arrays[f"w{i}"], requires_grad=True) for i in range(n_layers)]
    biases = [Tensor(arrays[f"b{i}"], requires_grad=True) for i in range(n_layers)]
    model = Mlp(weights=weights, biases=biases, activations=list(meta["activations"]))
    return model, meta


# -- rule persistence -------------------------------------------------------------

RULES_MAGIC = "failurenet-rules v1"


def write_rules(path: str | Path, rules: dict[str, ThresholdRule]) -> Path:
    """One line per rule: name, feature, statistic kind, threshold, accuracy."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(RULES_MAGIC + "\n")
        for name in sorted(rules):
            r = rules[name]
            fh.write(f"{name} {r.feature} {r.kind} {r.threshold:.17g} {r.accuracy:.17g}\n")
    return path


def read_rules(path: str | Path) -> dict[str, ThresholdRule]:
    path = Path(path)
    with path.open() as fh:
        magic = fh.readline().rstrip("\n")
        if magic != RULES_MAGIC:
            raise ValueError(f"{path}: bad rules header {magic!r}")
        rules: dict[str, ThresholdRule] = {}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValueError(f"{path}: malformed rule line {line!r}")
            name, feature, kind, thr, acc = parts
            rules[name] = ThresholdRule(
                kind=kind, threshold=float(thr), feature=feature, accuracy=float(acc)
            )
    return rules
