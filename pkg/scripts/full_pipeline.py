"""Run the whole desk-scale pipeline into one output directory.

Equivalent to calling the CLI four times by hand:

    failurenet generate / train / evaluate / replay

but with per-stage wall clocks printed at the end, which is what you want
when checking the ten-minute budget on a new machine.
"""

import argparse
import sys
import time

from failurenet import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/full", help="output directory (default runs/full)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None, help="optional INI config")
    ap.add_argument("--force", action="store_true", help="overwrite an existing run")
    ap.add_argument("--skip-replay", action="store_true", help="stop after evaluate")
    ap.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE"
    )
    args = ap.parse_args()

    base = ["--seed", str(args.seed), "--out", args.out]
    if args.config:
        base += ["--config", args.config]
    for ov in args.overrides:
        base += ["--set", ov]

    stages = ["generate", "train", "evaluate"]
    if not args.skip_replay:
        stages.append("replay")

    clocks: list[tuple[str, float]] = []
    for stage in stages:
        argv = list(base)
        if stage == "generate" and args.force:
            argv.append("--force")
        argv.append(stage)
        started = time.perf_counter()
        code = cli.main(argv)
        clocks.append((stage, time.perf_counter() - started))
        if code != 0:
            print(f"stage {stage} failed with exit code {code}", file=sys.stderr)
            return code

    total = sum(c for _, c in clocks)
    print("\nstage clocks:")
    for stage, c in clocks:
        print(f"  {stage:<9} {c:7.1f} s")
    print(f"  {'total':<9} {total:7.1f} s")
    budget = 600.0
    core = sum(c for stage, c in clocks if stage != "replay")
    print(f"generate+train+evaluate {core:.1f} s ({'inside' if core <= budget else 'OVER'} the {budget:.0f} s budget)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
