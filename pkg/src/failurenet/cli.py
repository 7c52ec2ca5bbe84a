"""Command-line pipeline: generate, train, evaluate, serve, replay, grad-check.

Every subcommand is a deterministic function of (config file, --set
overrides, --seed). Exit codes: 0 success, 1 usage or config error,
2 data error (missing inputs, refusing to overwrite), 3 acceptance
failure (ordering assertions, gradient verification).
"""

from __future__ import annotations

import os

# BLAS thread pools are pinned before numpy ever loads so that repeated
# training runs reduce in the same order and stay bit-identical.
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import argparse
import configparser
import copy
import json
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from . import manager as mg
from . import nn, rnn
from .data import (
    DatasetSplit,
    read_dataset,
    read_metadata,
    split_dataset,
    windows_from_log,
    write_dataset,
    write_metadata,
)
from .sim import FailureConfig, FailureMode, read_log, run_scenario, write_log
from .track import build_default_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ACCEPTANCE = 3

RNN_KINDS = ("lstm", "gru", "cfc")
VARIANT_NAMES = {"mlp": "none", "mlp_speed": "speed", "mlp_fft": "fft"}

DEFAULT_CONFIG: dict[str, dict] = {
    "map": {
        "lane_width": 0.3,
        "mask_radius": 0.5,
        "enter_radius": 1.5,
        "half_size": 2.0,
        "spacing": 0.05,
    },
    "sim": {
        "dt": 0.02,
        "target_speed": 0.3,
        "lookahead": 0.35,
        "wheelbase": 0.26,
        "max_steer": 0.4,
        "max_speed": 0.8,
        "actuator_tau": 0.2,
        "steer_amp": 0.15,
        "steer_period": 4.0,
        "speed_hold": 2.0,
        "speed_lo": -0.15,
        "speed_hi": 0.15,
        "lane_shift": 0.1,
        "speeding_speed": 0.5,
        "reckless_rate": 0.3,
        "reckless_burst_min": 0.5,
        "reckless_burst_max": 2.0,
        "reckless_ou_tau": 0.5,
        "reckless_ou_sigma": 0.35,
        "reckless_factor_min": 0.4,
        "reckless_factor_max": 1.8,
    },
    "data": {
        "rate": 2.0,
        "window_len": 10,
        "stride": 1,
        "split_ratio": 0.8,
        "feature_mode": "egocentric",
    },
    "generate": {
        "n_logs": 10,
        "log_duration": 180.0,
        "modes": "nominal,periodic,lane_shift,speeding,reckless",
    },
    "train": {
        "lr": 0.005,
        "batch_size": 128,
        "max_epochs": 100,
        "patience": 200,
        "clip_norm": 0.0,
        "lr_decay": 1.0,
        "decay_patience": 0,
        # per-model overrides; 0 inherits the shared value above
        "cfc_lr": 0.007,
        "cfc_batch_size": 64,
        "cfc_max_epochs": 200,
        "cfc_clip_norm": 1.0,
        "gru_lr": 0.007,
        "gru_clip_norm": 1.0,
        "gru_max_epochs": 110,
        "lstm_max_epochs": 0,
        "mlp_lr": 0.003,
        "mlp_max_epochs": 150,
        "mlp_fft_lr": 0.003,
        "mlp_fft_max_epochs": 150,
        "models": "lstm,gru,cfc,mlp,mlp_speed,mlp_fft",
        "grad_check": False,
    },
    "kalman": {
        "q": 0.01,
        "r": 0.0001,
        "delta": 0.2,
    },
    "manager": {
        "z_bar": 0.5,
        "host": "127.0.0.1",
        "port": 0,
        "eval_interval": 1.0,
        "model": "best",
    },
    "replay": {
        "duration": 180.0,
        "eval_interval": 1.0,
        "ingest_rate": 2.0,
        "model": "best",
    },
}


class ConfigError(Exception):
    pass


def _coerce(section: str, key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") from None
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    """Defaults, then the INI file, then --set overrides; unknown keys fail."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case as written
        found = parser.read(path)
        if not found:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                cfg[section][key] = _coerce(section, key, raw, DEFAULT_CONFIG[section][key])
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        cfg[section][key] = _coerce(section, key, value, DEFAULT_CONFIG[section][key])
    return cfg


def _build_map(cfg: dict) -> "object":
    m = cfg["map"]
    return build_default_map(
        lane_width=m["lane_width"],
        mask_radius=m["mask_radius"],
        enter_radius=m["enter_radius"],
        half_size=m["half_size"],
        spacing=m["spacing"],
    )


def _failure_config(cfg: dict, mode: FailureMode) -> FailureConfig:
    s = cfg["sim"]
    return FailureConfig(
        mode=mode,
        steer_amp=s["steer_amp"],
        steer_period=s["steer_period"],
        speed_hold=s["speed_hold"],
        speed_lo=s["speed_lo"],
        speed_hi=s["speed_hi"],
        lane_shift=s["lane_shift"],
        speeding_speed=s["speeding_speed"],
        reckless_rate=s["reckless_rate"],
        reckless_burst_min=s["reckless_burst_min"],
        reckless_burst_max=s["reckless_burst_max"],
        reckless_ou_tau=s["reckless_ou_tau"],
        reckless_ou_sigma=s["reckless_ou_sigma"],
        reckless_factor_min=s["reckless_factor_min"],
        reckless_factor_max=s["reckless_factor_max"],
    )


def _vehicle_params(cfg: dict):
    from .sim import ControllerConfig, VehicleParams

    s = cfg["sim"]
    params = VehicleParams(
        wheelbase=s["wheelbase"], delta_max=s["max_steer"], v_max=s["max_speed"], tau=s["actuator_tau"]
    )
    ctrl = ControllerConfig(target_speed=s["target_speed"], lookahead=s["lookahead"])
    return params, ctrl


def _parse_modes(raw: str) -> list[FailureMode]:
    modes = []
    for token in raw.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            modes.append(FailureMode(token))
        except ValueError:
            raise ConfigError(f"unknown failure mode {token!r}") from None
    if not modes:
        raise ConfigError("empty failure mode list")
    return modes


# -- generate ----------------------------------------------------------------


def _mode_seed(master: int, mode_index: int, log_index: int) -> int:
    # Fixed offsets keep per-log seeds disjoint across modes and runs.
    return master * 1_000_003 + mode_index * 10_000 + log_index


def cmd_generate(cfg: dict, seed: int, out: Path, force: bool) -> int:
    logs_dir = out / "logs"
    data_dir = out / "dataset"
    for existing in (data_dir, logs_dir):
        if existing.exists() and any(existing.iterdir()) and not force:
            print(f"error: {existing} already holds output; pass --force to overwrite", file=sys.stderr)
            return EXIT_DATA
    track_map = _build_map(cfg)
    params, ctrl = _vehicle_params(cfg)
    d = cfg["data"]
    g = cfg["generate"]
    modes = _parse_modes(g["modes"])
    logs_dir.mkdir(parents=True, exist_ok=True)
    data_dir.mkdir(parents=True, exist_ok=True)

    all_windows = []
    log_records = []
    for mi, mode in enumerate(modes):
        fail_cfg = _failure_config(cfg, mode)
        for k in range(g["n_logs"]):
            log_seed = _mode_seed(seed, mi, k)
            log = run_scenario(
                track_map,
                fail_cfg,
                g["log_duration"],
                log_seed,
                params=params,
                ctrl=ctrl,
                dt=cfg["sim"]["dt"],
                vehicle_id=f"{mode.value}_{k}",
            )
            path = logs_dir / f"{mode.value}_{k:02d}.csv"
            write_log(path, log)
            # windows come from the re-parsed file so the dataset matches
            # what any later reader of the logs would reconstruct
            reread = read_log(path)
            wins = windows_from_log(
                reread,
                rate=d["rate"],
                length=d["window_len"],
                stride=d["stride"],
                source=path.stem,
                track_map=track_map,
            )
            all_windows.extend(wins)
            log_records.append(
                {"file": path.name, "mode": mode.value, "windows": len(wins), "truncated": log.truncated}
            )
            if log.truncated:
                print(f"warning: {path.name} truncated at map boundary", file=sys.stderr)

    split = split_dataset(all_windows, d["split_ratio"], seed)
    train_path = write_dataset(data_dir / "train.txt", split.train)
    val_path = write_dataset(data_dir / "val.txt", split.val)

    def _sources_table(windows):
        table = []
        start = 0
        current = None
        for i, w in enumerate(windows):
            if current is None or w.source != current["id"]:
                if current is not None:
                    current["count"] = i - current["start"]
                    table.append(current)
                current = {"id": w.source, "mode": w.mode, "start": i}
        if current is not None:
            current["count"] = len(windows) - current["start"]
            table.append(current)
        return table

    meta = {
        "rate": d["rate"],
        "window_len": d["window_len"],
        "stride": d["stride"],
        "feature_mode": d["feature_mode"],
        "seed": seed,
        "split_ratio": d["split_ratio"],
        "modes": [m.value for m in modes],
        "counts": {
            "train": split.counts_by_mode("train"),
            "val": split.counts_by_mode("val"),
        },
        "split_warnings": split.warnings,
        "logs": log_records,
        "train_sources": _sources_table(split.train),
        "val_sources": _sources_table(split.val),
    }
    write_metadata(data_dir / "meta.json", meta)
    n_train, n_val = len(split.train), len(split.val)
    print(f"generated {len(log_records)} logs, {n_train} train / {n_val} val windows")
    for mode, count in sorted(split.counts_by_mode("train").items()):
        print(f"  train {mode}: {count}")
    if split.warnings:
        for w in split.warnings:
            print(f"  warning: {w}")
    print(f"wrote {train_path} {val_path}")
    return EXIT_OK


# -- shared loading -----------------------------------------------------------


def _load_split(out: Path) -> tuple[DatasetSplit, dict]:
    data_dir = out / "dataset"
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {data_dir}; run the generate subcommand first (expected {meta_path})")
    meta = read_metadata(meta_path)
    train = read_dataset(data_dir / "train.txt", meta["rate"], meta.get("train_sources"))
    val = read_dataset(data_dir / "val.txt", meta["rate"], meta.get("val_sources"))
    split = DatasetSplit(train=train, val=val, ratio=meta["split_ratio"], seed=meta["seed"], warnings=list(meta.get("split_warnings", [])))
    return split, meta


def _grad_check_models(window_len: int, threshold: float = 1e-4) -> tuple[float, list[str]]:
    """Small-size gradient verification across all four model families."""
    lines = []
    worst_overall = 0.0
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, window_len, 3))
    y = np.array([[1.0], [0.0], [1.0]])
    for kind in RNN_KINDS:
        model = rnn.init_failurenet(kind, window_len=window_len, seed=11, hidden=4, backbone=5, decoder_hidden=3)

        def loss_fn(m=model):
            return nn.bce_logits_tensor(rnn._logits_graph(m, x), y)

        err = nn.grad_check(loss_fn, model.parameters())
        worst_overall = max(worst_overall, err)
        lines.append(f"grad-check {kind}: max rel err {err:.3e}")
    mlp = nn.mlp_init([6, 5, 1], np.random.default_rng(13))
    xm = rng.normal(size=(4, 6))
    ym = np.array([[1.0], [0.0], [1.0], [0.0]])

    def mlp_loss():
        return nn.bce_logits_tensor(mlp.forward(nn.Tensor(xm)), ym)

    err = nn.grad_check(mlp_loss, mlp.parameters())
    worst_overall = max(worst_overall, err)
    lines.append(f"grad-check mlp: max rel err {err:.3e}")
    return worst_overall, lines


# -- train ---------------------------------------------------------------------


def _balanced_indices(labels: np.ndarray, seed: int) -> np.ndarray:
    """Equal Safe/Unsafe index set; the larger class is subsampled."""
    zeros = np.flatnonzero(labels == 0)
    ones = np.flatnonzero(labels == 1)
    if zeros.size == 0 or ones.size == 0:
        return np.arange(labels.size)
    m = min(zeros.size, ones.size)
    rng = np.random.default_rng(seed * 9_973 + 11)
    if zeros.size > m:
        zeros = np.sort(rng.choice(zeros, size=m, replace=False))
    if ones.size > m:
        ones = np.sort(rng.choice(ones, size=m, replace=False))
    return np.concatenate([zeros, ones])


def cmd_train(cfg: dict, seed: int, out: Path) -> int:
    try:
        split, meta = _load_split(out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    t = cfg["train"]
    feature_mode = cfg["data"]["feature_mode"]
    window_len = meta["window_len"]
    roster = [m.strip() for m in t["models"].split(",") if m.strip()]
    unknown = [m for m in roster if m not in RNN_KINDS and m not in VARIANT_NAMES]
    if unknown:
        print(f"error: unknown models in roster: {unknown}", file=sys.stderr)
        return EXIT_USAGE

    if t["grad_check"]:
        worst, lines = _grad_check_models(window_len)
        for line in lines:
            print(line)
        if worst >= 1e-4:
            print(f"error: gradient verification failed ({worst:.3e} >= 1e-4); aborting", file=sys.stderr)
            return EXIT_ACCEPTANCE

    models_dir = out / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"models": {}, "feature_mode": feature_mode, "window_len": window_len}

    for idx, name in enumerate(roster):
        lr = t.get(f"{name}_lr", 0) or t["lr"]
        batch_size = t.get(f"{name}_batch_size", 0) or t["batch_size"]
        max_epochs = t.get(f"{name}_max_epochs", 0) or t["max_epochs"]
        clip_norm = t.get(f"{name}_clip_norm", 0) or t["clip_norm"]
        train_cfg = nn.TrainConfig(
            lr=lr,
            batch_size=batch_size,
            max_epochs=max_epochs,
            patience=t["patience"],
            clip_norm=clip_norm,
            lr_decay=t["lr_decay"],
            decay_patience=t["decay_patience"],
            seed=seed + idx,
        )
        started = time.perf_counter()
        if name in RNN_KINDS:
            model = rnn.init_failurenet(name, window_len=window_len, seed=seed + idx, feature_mode=feature_mode)
            result = rnn.train_failurenet(model, split, train_cfg)
            path = models_dir / f"{name}.ckpt"
            rnn.save_model(path, result.model)
            n_params = rnn.count_params(result.model)
        else:
            pre_filter = VARIANT_NAMES[name]
            result = bl.train_mlp_variant(
                split.train, split.val, pre_filter, train_cfg, feature_mode=feature_mode
            )
            path = models_dir / f"{name}.ckpt"
            bl.save_variant(path, result.model, pre_filter, window_len, feature_mode)
            n_params = result.model.n_params
        elapsed = time.perf_counter() - started
        summary["models"][name] = {
            "checkpoint": path.name,
            "params": n_params,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "val_accuracy": result.val_accuracy,
            "epochs_run": len(result.curves),
            "seconds": round(elapsed, 3),
            "curves": result.curves,
        }
        print(
            f"trained {name}: val acc {result.val_accuracy:.4f}, "
            f"best epoch {result.best_epoch}, {elapsed:.1f}s, {n_params} params"
        )

    # scalar-statistic baselines are fitted on the validation set: they have
    # no gradient phase, the grid search itself is the fit. The speed and
    # spectral rules see a class-balanced subsample: on the 4:1
    # failure-heavy split the accuracy maximizer is otherwise the constant
    # Unsafe verdict, which reads as a high threshold crossed by everything.
    val_labels = np.array([w.label for w in split.val], dtype=np.int64)
    fit_idx = _balanced_indices(val_labels, seed)
    fit_windows = [split.val[i] for i in fit_idx]
    fit_labels = val_labels[fit_idx]
    speed_rule = bl.fit_threshold([bl.window_speeds(w) for w in fit_windows], fit_labels, "speed")
    fft_rule = bl.fit_threshold([bl.fft_yaw_power(w) for w in fit_windows], fit_labels, "fft_power")
    bl.write_rules(models_dir / "rules.txt", {"speed": speed_rule, "fft": fft_rule})
    k = cfg["kalman"]
    kalman_cfg = bl.fit_kalman_threshold(
        split.val, val_labels, bl.KalmanConfig(q=k["q"], r=k["r"], delta=k["delta"])
    )
    write_metadata(
        models_dir / "kalman.json",
        {"q": kalman_cfg.q, "r": kalman_cfg.r, "delta": kalman_cfg.delta, "p0_rate": kalman_cfg.p0_rate, "warmup": kalman_cfg.warmup},
    )
    print(
        f"fitted rules on {len(fit_windows)} balanced windows: "
        f"speed {speed_rule.kind}@{speed_rule.threshold:.4f} acc {speed_rule.accuracy:.4f}; "
        f"fft {fft_rule.kind}@{fft_rule.threshold:.4g} acc {fft_rule.accuracy:.4f}; "
        f"kalman delta {kalman_cfg.delta:.4f} (full split)"
    )
    write_metadata(models_dir / "train_summary.json", summary)
    return EXIT_OK


# -- evaluate --------------------------------------------------------------------


def _best_rnn(summary: dict) -> str:
    rnn_rows = {k: v for k, v in summary["models"].items() if k in RNN_KINDS}
    if not rnn_rows:
        raise FileNotFoundError("no recurrent model in the training summary")
    return max(rnn_rows.items(), key=lambda kv: kv[1]["val_accuracy"])[0]


def cmd_evaluate(cfg: dict, seed: int, out: Path) -> int:
    try:
        split, meta = _load_split(out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    models_dir = out / "models"
    if not (models_dir / "train_summary.json").exists():
        print(f"error: no trained models at {models_dir}; run the train subcommand first", file=sys.stderr)
        return EXIT_DATA
    feature_mode = cfg["data"]["feature_mode"]
    val = split.val
    labels = np.array([w.label for w in val], dtype=np.int64)
    modes = [w.mode for w in val]
    window_len = meta["window_len"]

    methods: list[ev.MethodResult] = []

    def add_method(name: str, preds, n_params: int | None) -> None:
        overall = ev.accuracy(preds, labels)
        methods.append(
            ev.MethodResult(
                name=name,
                overall=overall,
                per_mode=ev.per_mode_accuracy(preds, modes),
                confusion=ev.confusion(preds, labels),
                n_params=n_params,
            )
        )

    rules_path = models_dir / "rules.txt"
    if rules_path.exists():
        rules = bl.read_rules(rules_path)
        if "speed" in rules:
            add_method("speed", [bl.speed_threshold_detect(w, rules["speed"]) for w in val], None)
        if "fft" in rules:
            add_method("fft", [bl.fft_threshold_detect(w, rules["fft"]) for w in val], None)
    kalman_path = models_dir / "kalman.json"
    if kalman_path.exists():
        kj = read_metadata(kalman_path)
        kcfg = bl.KalmanConfig(q=kj["q"], r=kj["r"], delta=kj["delta"], p0_rate=kj["p0_rate"], warmup=kj["warmup"])
        add_method("kalman", [bl.kalman_detect(w, kcfg) for w in val], None)

    for name in ("mlp", "mlp_speed", "mlp_fft"):
        path = models_dir / f"{name}.ckpt"
        if not path.exists():
            continue
        model, vmeta = bl.load_variant(path)
        if vmeta["window_len"] != window_len:
            print(
                f"error: checkpoint {path.name} was trained with window length "
                f"{vmeta['window_len']} but the dataset uses {window_len}",
                file=sys.stderr,
            )
            return EXIT_DATA
        feats = np.stack([bl.variant_features(w, vmeta["pre_filter"], vmeta["feature_mode"]) for w in val])
        preds = nn.sigmoid(model.forward_np(feats)[:, 0])
        add_method(name, preds, model.n_params)

    for name in RNN_KINDS:
        path = models_dir / f"{name}.ckpt"
        if not path.exists():
            continue
        model = rnn.load_model(path)
        if model.window_len != window_len:
            print(
                f"error: checkpoint {path.name} expects windows of length "
                f"{model.window_len} but the dataset uses {window_len}",
                file=sys.stderr,
            )
            return EXIT_DATA
        from .data import featurize_batch

        preds = rnn.failurenet_forward(model, featurize_batch(val, model.feature_mode))
        add_method(name, preds, rnn.count_params(model))

    report = ev.EvalReport(
        methods=methods,
        dataset_meta={"n": len(val), "counts": meta["counts"]["val"], "feature_mode": feature_mode, "seed": meta["seed"]},
    )
    reports_dir = out / "reports"
    csv_path, txt_path = ev.emit_report(report, reports_dir / "validation")
    print(txt_path.read_text())
    print(f"wrote {csv_path} and {txt_path}")

    # ordering assertions: recurrent models should not lose to the dense
    # baselines, and the spectral threshold should trail every learned model
    by_name = {m.name: m.overall for m in methods}
    checks = []
    if all(k in by_name for k in RNN_KINDS) and "mlp" in by_name:
        best = max(by_name[k] for k in RNN_KINDS)
        checks.append(("best recurrent >= mlp", best >= by_name["mlp"]))
    if "mlp" in by_name and "mlp_fft" in by_name:
        checks.append(("mlp >= mlp_fft", by_name["mlp"] >= by_name["mlp_fft"]))
    if "mlp_fft" in by_name and "fft" in by_name:
        checks.append(("mlp_fft >= fft", by_name["mlp_fft"] >= by_name["fft"]))
    failed = False
    for label, ok in checks:
        print(f"ordering {'PASS' if ok else 'FAIL'}: {label}")
        if not ok:
            failed = True
    return EXIT_ACCEPTANCE if failed else EXIT_OK


# -- serve -----------------------------------------------------------------------


def _resolve_model(out: Path, requested: str) -> Path:
    models_dir = out / "models"
    if requested == "best":
        summary = read_metadata(models_dir / "train_summary.json")
        requested = _best_rnn(summary)
    path = models_dir / f"{requested}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint {path}")
    return path


def cmd_serve(cfg: dict, seed: int, out: Path) -> int:
    m = cfg["manager"]
    try:
        ckpt = _resolve_model(out, m["model"])
    except FileNotFoundError as exc:
        print(f"error: {exc}; run train first", file=sys.stderr)
        return EXIT_DATA
    out.mkdir(parents=True, exist_ok=True)
    config = mg.ManagerConfig(
        checkpoint=ckpt,
        z_bar=m["z_bar"],
        host=m["host"],
        port=m["port"],
        eval_interval=m["eval_interval"],
        window_len=cfg["data"]["window_len"],
        track_map=_build_map(cfg),
        event_log=out / "serve_events.log",
    )
    try:
        server = mg.ManagerServer(config)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    stop = {"flag": False}

    def _handle(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, _handle)
    signal.signal(signal.SIGTERM, _handle)
    server.start()
    print(f"manager listening on {config.host}:{server.port} (model {ckpt.name}); Ctrl-C to stop")
    try:
        while not stop["flag"]:
            time.sleep(0.1)
    finally:
        server.stop()
        print("manager stopped; event log flushed")
    return EXIT_OK


# -- replay ----------------------------------------------------------------------


def cmd_replay(cfg: dict, seed: int, out: Path) -> int:
    r = cfg["replay"]
    try:
        ckpt = _resolve_model(out, r["model"])
    except FileNotFoundError as exc:
        print(f"error: {exc}; run train first", file=sys.stderr)
        return EXIT_DATA
    model = rnn.load_model(ckpt)
    track_map = _build_map(cfg)
    replay_dir = out / "replay"
    replay_dir.mkdir(parents=True, exist_ok=True)
    z_bar = cfg["manager"]["z_bar"]

    all_verdicts: list[tuple[int, float]] = []
    per_mode: dict[str, float] = {}
    nominal_warning_rate = None
    rows_meta = {}
    for mi, mode in enumerate(FailureMode):
        result = mg.run_replay(
            model,
            mode,
            duration=r["duration"],
            seed=_mode_seed(seed, mi, 0) + 17,
            track_map=track_map,
            z_bar=z_bar,
            ingest_rate=r["ingest_rate"],
            eval_interval=r["eval_interval"],
            offender_cfg=_failure_config(cfg, mode),
        )
        (replay_dir / f"events_{mode.value}.log").write_text("\n".join(result.event_lines) + "\n")
        if result.offline_verdicts != result.offender_verdicts:
            print(f"replay {mode.value}: protocol verdicts drifted from offline rescoring", file=sys.stderr)
            return EXIT_ACCEPTANCE
        expected = 0 if mode is FailureMode.NOMINAL else 1
        all_verdicts.extend((expected, z) for _, z in result.offender_verdicts)
        per_mode[mode.value] = result.accuracy
        rows_meta[mode.value] = {"evals": result.n_evals, "warned_sweeps": result.warned_sweeps}
        if mode is FailureMode.NOMINAL:
            nominal_warning_rate = result.warning_rate
        print(
            f"replay {mode.value}: {result.n_evals} verdicts, accuracy {result.accuracy:.3f}, "
            f"warning rate {result.warning_rate:.3f}"
        )

    labels = np.array([e for e, _ in all_verdicts], dtype=np.int64)
    preds = np.array([z for _, z in all_verdicts])
    overall = ev.accuracy(preds, labels)
    report = ev.EvalReport(
        methods=[
            ev.MethodResult(
                name=model.kind,
                overall=overall,
                per_mode=per_mode,
                confusion=ev.confusion(preds, labels),
                n_params=rnn.count_params(model),
            )
        ],
        dataset_meta={
            "kind": "online-replay",
            "duration_s": r["duration"],
            "eval_interval_s": r["eval_interval"],
            "nominal_warning_rate": nominal_warning_rate,
            "evals": rows_meta,
            "seed": seed,
        },
    )
    csv_path, txt_path = ev.emit_report(report, replay_dir / "replay")
    print(txt_path.read_text())
    print(f"online overall accuracy {overall:.3f}; nominal warning rate {nominal_warning_rate:.3f}")
    print(f"wrote {csv_path} and {txt_path}")
    return EXIT_OK


# -- grad-check --------------------------------------------------------------------


def cmd_grad_check(cfg: dict, seed: int, out: Path) -> int:
    worst, lines = _grad_check_models(cfg["data"]["window_len"])
    for line in lines:
        print(line)
    if worst >= 1e-4:
        print(f"gradient verification FAILED: {worst:.3e} >= 1e-4", file=sys.stderr)
        return EXIT_ACCEPTANCE
    print(f"gradient verification passed: worst {worst:.3e} < 1e-4")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="failurenet",
        description="Seeded driving simulator, failure detectors, and intersection warning service",
    )
    parser.add_argument("--config", help="INI config file; defaults apply when omitted")
    parser.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    parser.add_argument("--out", default="runs", help="output directory (default ./runs)")
    parser.add_argument("--force", action="store_true", help="overwrite existing generated data")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value; repeatable",
    )
    parser.add_argument(
        "command",
        choices=["generate", "train", "evaluate", "serve", "replay", "grad-check"],
        help="pipeline stage to run",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        if args.command == "generate":
            return cmd_generate(cfg, args.seed, out, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.seed, out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.seed, out)
        if args.command == "serve":
            return cmd_serve(cfg, args.seed, out)
        if args.command == "replay":
            return cmd_replay(cfg, args.seed, out)
        if args.command == "grad-check":
            return cmd_grad_check(cfg, args.seed, out)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
