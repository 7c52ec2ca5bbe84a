"""Dataset construction: resampling, sliding windows, features, splits, file I/O.

Trajectory logs recorded at the simulation rate are thinned to the pose
rate the detectors see (2 Hz), cut into overlapping fixed-length windows,
and labeled from the log's failure mode. Windows whose final pose sits
inside the intersection mask disc are dropped: behavior there is dominated
by the junction itself rather than by the driving policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import FailureMode, TrajectoryLog
from .track import TrackMap, wrap_angle

__all__ = [
    "PoseWindow",
    "FeatureSeq",
    "DatasetSplit",
    "resample_poses",
    "make_windows",
    "windows_from_log",
    "featurize",
    "featurize_values",
    "featurize_batch",
    "split_dataset",
    "write_dataset",
    "read_dataset",
    "write_metadata",
    "read_metadata",
]


@dataclass
class PoseWindow:
    """L consecutive poses at the detector rate plus supervision.

    times: (L,) strictly increasing, uniform spacing.
    poses: (L, 3) columns (x, y, theta).
    label: 0 safe / 1 unsafe. mode: the generating failure mode tag.
    source: id of the originating log, used for leakage-free splits.
    """

    times: np.ndarray
    poses: np.ndarray
    label: int
    mode: str
    source: str

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.poses = np.asarray(self.poses, dtype=float)
        if self.poses.ndim != 2 or self.poses.shape[1] != 3 or self.poses.shape[0] != self.times.shape[0]:
            raise ValueError(f"window shape mismatch: times {self.times.shape}, poses {self.poses.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class FeatureSeq:
    """Featurized window: (L, 3) float array plus the feature mode tag."""

    values: np.ndarray
    mode: str


@dataclass
class DatasetSplit:
    train: list[PoseWindow]
    val: list[PoseWindow]
    ratio: float
    seed: int
    warnings: list[str] = field(default_factory=list)

    def counts_by_mode(self, which: str = "train") -> dict[str, int]:
        out: dict[str, int] = {}
        for w in getattr(self, which):
            out[w.mode] = out.get(w.mode, 0) + 1
        return out


def resample_poses(log: TrajectoryLog, rate: float, interpolate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Thin a log to `rate` Hz. Returns (times (M,), poses (M, 3)).

    When the simulation rate is an integer multiple of `rate` this takes
    every k-th sample exactly. Otherwise it requires interpolate=True and
    interpolates linearly (angles through pairwise unwrapping).
    """
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    sim_rate = 1.0 / log.dt
    k = sim_rate / rate
    t = log.samples[:, 0]
    pose = log.samples[:, 1:4]
    if abs(k - round(k)) < 1e-9:
        k = int(round(k))
        return t[::k].copy(), pose[::k].copy()
    if not interpolate:
        raise ValueError(f"rate {rate} does not divide simulation rate {sim_rate}; pass interpolate=True")
    t_new = np.arange(t[0], t[-1] + 1e-12, 1.0 / rate)
    x = np.interp(t_new, t, pose[:, 0])
    y = np.interp(t_new, t, pose[:, 1])
    theta = np.interp(t_new, t, np.unwrap(pose[:, 2]))
    theta = np.array([wrap_angle(a) for a in theta])
    return t_new, np.stack([x, y, theta], axis=1)


def make_windows(
    times: np.ndarray,
    poses: np.ndarray,
    length: int,
    stride: int,
    mode: FailureMode | str,
    source: str,
    track_map: TrackMap | None = None,
) -> list[PoseWindow]:
    """Slide a window of `length` poses with `stride`, labeling from the mode.

    With a map, windows are kept only if the final pose lies strictly
    outside the intersection mask disc.
    """
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    mode = FailureMode(mode)
    label = 0 if mode is FailureMode.NOMINAL else 1
    out: list[PoseWindow] = []
    n = poses.shape[0]
    for start in range(0, n - length + 1, stride):
        end = start + length
        if track_map is not None:
            final = poses[end - 1, :2]
            if track_map.distance_to_center(final) <= track_map.mask_radius:
                continue
        out.append(
            PoseWindow(
                times=times[start:end],
                poses=poses[start:end],
                label=label,
                mode=mode.value,
                source=source,
            )
        )
    return out


def windows_from_log(
    log: TrajectoryLog,
    rate: float,
    length: int,
    stride: int,
    source: str,
    track_map: TrackMap | None = None,
) -> list[PoseWindow]:
    times, poses = resample_poses(log, rate)
    return make_windows(times, poses, length, stride, log.mode, source, track_map)


def featurize_values(poses: np.ndarray, feature_mode: str = "egocentric") -> np.ndarray:
    """Map window poses to model inputs.

    egocentric: rigidly transform so the first pose is (0, 0, 0); the
    classifier then sees motion, not map location. global: pass through.
    """
    poses = np.asarray(poses, dtype=float)
    if feature_mode == "global":
        return poses.copy()
    if feature_mode != "egocentric":
        raise ValueError(f"unknown feature mode {feature_mode!r}")
    x0, y0, th0 = poses[0]
    c, s = np.cos(th0), np.sin(th0)
    dx = poses[:, 0] - x0
    dy = poses[:, 1] - y0
    out = np.empty_like(poses)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = [wrap_angle(a - th0) for a in poses[:, 2]]
    return out


def featurize(window: PoseWindow, feature_mode: str = "egocentric") -> FeatureSeq:
    return FeatureSeq(values=featurize_values(window.poses, feature_mode), mode=feature_mode)


def featurize_batch(windows: list[PoseWindow], feature_mode: str = "egocentric") -> np.ndarray:
    """Stack featurized windows into (N, L, 3)."""
    if not windows:
        raise ValueError("no windows to featurize")
    return np.stack([featurize_values(w.poses, feature_mode) for w in windows])


def split_dataset(windows: list[PoseWindow], ratio: float, seed: int) -> DatasetSplit:
    """Split at source-log granularity so no log feeds both sides.

    Logs are shuffled per mode with the given seed; round(ratio * n) of each
    mode's logs land in train, clamped so a mode with two or more logs keeps
    at least one log on each side. Single-log modes go to train entirely and
    raise a warning entry.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if not windows:
        raise ValueError("cannot split an empty dataset")
    by_source: dict[str, list[PoseWindow]] = {}
    source_mode: dict[str, str] = {}
    for w in windows:
        by_source.setdefault(w.source, []).append(w)
        source_mode[w.source] = w.mode
    sources_by_mode: dict[str, list[str]] = {}
    for src in sorted(by_source):
        sources_by_mode.setdefault(source_mode[src], []).append(src)

    rng = np.random.default_rng(seed)
    train: list[PoseWindow] = []
    val: list[PoseWindow] = []
    warnings: list[str] = []
    for mode in sorted(sources_by_mode):
        srcs = sources_by_mode[mode]
        order = [srcs[i] for i in rng.permutation(len(srcs))]
        n = len(order)
        n_train = int(round(ratio * n))
        if n >= 2:
            n_train = min(max(n_train, 1), n - 1)
        else:
            n_train = n
            warnings.append(f"mode {mode!r} has a single log; validation side is empty for it")
        for src in order[:n_train]:
            train.extend(by_source[src])
        for src in order[n_train:]:
            val.extend(by_source[src])
    for side_name, side in (("train", train), ("val", val)):
        present = {w.mode for w in side}
        missing = set(sources_by_mode) - present
        for mode in sorted(missing):
            warnings.append(f"mode {mode!r} absent from {side_name} split")
    return DatasetSplit(train=train, val=val, ratio=ratio, seed=seed, warnings=warnings)


def _format_window(w: PoseWindow) -> str:
    triples = ";".join(f"{p[0]:.9g}:{p[1]:.9g}:{p[2]:.9g}" for p in w.poses)
    return f"{w.label},{w.mode},{len(w.poses)},{triples}"


def write_dataset(path: str | Path, windows: list[PoseWindow]) -> Path:
    """One window per line: `z,mode,L,` then L colon-separated pose triples."""
    path = Path(path)
    with path.open("w") as fh:
        for w in windows:
            fh.write(_format_window(w) + "\n")
    return path


def read_dataset(path: str | Path, rate: float, sources: list[dict] | None = None) -> list[PoseWindow]:
    """Parse a dataset file; timestamps are rebuilt from the rate.

    `sources` is the metadata source table ({id, mode, start, count} line
    ranges); without it every window gets source "unknown".
    """
    path = Path(path)
    lookup: list[tuple[range, str]] = []
    if sources:
        lookup = [(range(s["start"], s["start"] + s["count"]), s["id"]) for s in sources]
    out: list[PoseWindow] = []
    with path.open() as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            head = line.split(",", 3)
            if len(head) != 4:
                raise ValueError(f"{path}:{idx + 1}: malformed window line")
            z, mode, length, rest = head
            length = int(length)
            triples = rest.split(";")
            if len(triples) != length:
                raise ValueError(f"{path}:{idx + 1}: expected {length} poses, got {len(triples)}")
            poses = np.array([[float(v) for v in tr.split(":")] for tr in triples])
            source = "unknown"
            for rng_, sid in lookup:
                if idx in rng_:
                    source = sid
                    break
            out.append(
                PoseWindow(
                    times=np.arange(length) / rate,
                    poses=poses,
                    label=int(z),
                    mode=mode,
                    source=source,
                )
            )
    return out


def write_metadata(path: str | Path, meta: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_metadata(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
