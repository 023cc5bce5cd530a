"""Run every built-in scenario through the full pipeline and print one line per scenario."""
import argparse
import sys

from lbsclab.cli import main
from lbsclab.scenario import builtin_scenarios

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="output root (default as for the CLI)")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    argv = ["run", *sorted(builtin_scenarios()), "--jobs", str(args.jobs)]
    if args.out:
        argv += ["--out", args.out]
    sys.exit(main(argv))
