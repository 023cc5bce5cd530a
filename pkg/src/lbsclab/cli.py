"""Command line entry point: ``lbsclab <check|conjugate|solve|certify|repair|run|list> SCENARIO``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .pipeline import EXIT_ERROR, run
from .scenario import list_catalog, load_scenario

__all__ = ["main", "output_dir", "OUTPUT_ENV"]

OUTPUT_ENV = "LBSCLAB_OUTPUT_DIR"
DEFAULT_OUTPUT = "lbsclab_runs"


def output_dir(name: str, explicit: str | None = None) -> Path:
    """--out wins, then the environment override, then ./lbsclab_runs; one subdirectory per scenario."""
    root = explicit or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    return Path(root) / name


def _run_one(stage: str, ref: str, out: str | None) -> tuple[str, int, str]:
    try:
        sc = load_scenario(ref)
    except (OSError, ValueError, KeyError) as exc:
        return ref, EXIT_ERROR, f"cannot load scenario: {exc}"
    rep = run(sc, output_dir(sc.name, out), stage)
    failed = ", ".join(rep.report["failed_checks"]) or rep.report.get("error", {}).get("failed", "")
    return sc.name, rep.exit_code, f"{rep.status} {failed}".strip() + f" -> {rep.out_dir / 'report.json'}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lbsclab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log solver and repair progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("check", "structural hypotheses, domain convexity and slope condition"),
        ("conjugate", "check, then write f* (and f** for nonconvex scenarios)"),
        ("solve", "check, then solve and write u.csv, grad.csv"),
        ("certify", "check, solve and emit comparison, Lipschitz, Theta and Hoelder certificates"),
        ("repair", "check, solve the relaxation and repair the offending set"),
        ("run", "the full pipeline for the scenario's mode"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("scenarios", nargs="+", help="TOML file or built-in scenario name")
        s.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        s.add_argument("--jobs", type=int, default=1, help="run independent scenarios in parallel")
    sub.add_parser("list", help="built-in Lagrangians, traces, g fields and scenarios")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list":
        sys.stdout.write(list_catalog())
        return 0
    jobs = [(args.command, ref, args.out) for ref in args.scenarios]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]
    for name, code, msg in results:
        print(f"{name}: exit {code} {msg}")
    return max(code for _, code, _ in results)


if __name__ == "__main__":
    sys.exit(main())
