"""Draw the map and one recorded trajectory per driving mode.

Reads the CSV logs a `generate` run left behind and renders them over the
route centerlines, with the intersection mask and approach rings. Handy for
eyeballing what each failure mode actually does to the path.

    python scripts/plot_trajectories.py --run runs/full --out trajectories.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from failurenet.sim import read_log
from failurenet.track import build_default_map

MODE_ORDER = ["nominal", "periodic", "lane_shift", "speeding", "reckless"]


def draw_map(ax, track) -> None:
    for route in track.routes.values():
        pts = np.vstack([route.points, route.points[:1]])
        ax.plot(pts[:, 0], pts[:, 1], color="0.8", lw=0.8, zorder=1)
    for radius, style in ((track.mask_radius, "-"), (track.enter_radius, "--")):
        circle = plt.Circle(track.intersection_center, radius, fill=False, ls=style, color="0.5", lw=0.9)
        ax.add_patch(circle)
    ax.set_xlim(-track.half_size, track.half_size)
    ax.set_ylim(-track.half_size, track.half_size)
    ax.set_aspect("equal")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", default="runs/full", help="run directory containing logs/")
    ap.add_argument("--out", default="trajectories.png")
    ap.add_argument("--index", type=int, default=0, help="which log per mode (default 0)")
    args = ap.parse_args()

    logs_dir = Path(args.run) / "logs"
    if not logs_dir.is_dir():
        raise SystemExit(f"no logs under {logs_dir}; run generate first")
    track = build_default_map()

    fig, axes = plt.subplots(1, len(MODE_ORDER), figsize=(3.2 * len(MODE_ORDER), 3.4))
    for ax, mode in zip(axes, MODE_ORDER):
        draw_map(ax, track)
        path = logs_dir / f"{mode}_{args.index:02d}.csv"
        if path.exists():
            log = read_log(path)
            xy = log.samples[:, 1:3]
            ax.plot(xy[:, 0], xy[:, 1], lw=1.1, color="tab:red" if mode != "nominal" else "tab:blue", zorder=2)
            ax.plot(xy[0, 0], xy[0, 1], marker="o", ms=4, color="k", zorder=3)
        else:
            ax.text(0.5, 0.5, "missing", transform=ax.transAxes, ha="center")
        ax.set_title(mode)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(args.out, dpi=160)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
