"""Show where the fitted scalar rules sit against the per-mode statistics.

For each validation window this dumps the speed statistic (max of the
finite-difference speeds) and the yaw spectral power, split by mode, then
overlays the thresholds from models/rules.txt. Explains at a glance why the
speed rule nails Speeding but ignores LaneShift, and why the spectral rule
cannot keep up with the learned models.

    python scripts/rule_margins.py --run runs/full --out rule_margins.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from failurenet.baselines import fft_yaw_power, read_rules, window_speeds
from failurenet.cli import _load_split

MODE_ORDER = ["nominal", "periodic", "lane_shift", "speeding", "reckless"]


def stat_by_mode(windows, fn, reducer):
    table = {m: [] for m in MODE_ORDER}
    for w in windows:
        table[w.mode].append(reducer(fn(w)))
    return {m: np.asarray(v) for m, v in table.items() if len(v)}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", default="runs/full")
    ap.add_argument("--out", default="rule_margins.png")
    args = ap.parse_args()

    run = Path(args.run)
    split, _ = _load_split(run)
    rules = read_rules(run / "models" / "rules.txt")

    panels = [
        ("speed", window_speeds, {"max": np.max, "avg": np.mean}[rules["speed"].kind]),
        ("fft", fft_yaw_power, {"max": np.max, "avg": np.mean}[rules["fft"].kind]),
    ]
    fig, axes = plt.subplots(1, 2, figsize=(11, 3.6))
    for ax, (name, fn, reducer) in zip(axes, panels):
        stats = stat_by_mode(split.val, fn, reducer)
        positions = np.arange(len(stats))
        ax.boxplot([stats[m] for m in stats], positions=positions, widths=0.6, showfliers=False)
        for i, m in enumerate(stats):
            jitter = (np.arange(len(stats[m])) % 17) / 17.0 - 0.5
            ax.plot(i + 0.25 * jitter, stats[m], ".", ms=1.5, alpha=0.25)
        rule = rules[name]
        ax.axhline(rule.threshold, color="tab:red", lw=1.2)
        ax.set_xticks(positions, list(stats), rotation=20)
        ax.set_title(f"{name} rule: {rule.kind} stat, threshold {rule.threshold:.4g}")
        ax.set_yscale("log" if name == "fft" else "linear")
    fig.tight_layout()
    fig.savefig(args.out, dpi=160)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
