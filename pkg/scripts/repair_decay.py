"""Offending fraction of the relaxed double-well minimizer and its decay under repair, for several k."""
import argparse
import dataclasses
import tempfile
from pathlib import Path

from lbsclab.pipeline import run
from lbsclab.scenario import load_scenario

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", type=int, nargs="+", default=[8, 16, 32, 64])
    ap.add_argument("--passes", type=int, default=10)
    args = ap.parse_args()
    base = load_scenario("double_well_repair")
    with tempfile.TemporaryDirectory() as tmp:
        for k in args.ks:
            sc = dataclasses.replace(base, relax_k=k, max_passes=args.passes)
            rep = run(sc, Path(tmp) / f"k{k}", "repair").report["repair"]
            trail = " ".join(f"{p['offending_after']:.4f}({p['accepted']})" for p in rep["passes"])
            print(f"k={k:3d} initial {rep['offending_fraction_initial']:.4f} final {rep['offending_fraction']:.4f}"
                  f" patches {rep['n_patches']:4d}  per pass: {trail}", flush=True)
