"""Poisson disc under mesh refinement: sup error against (|x|^2 - 1)/4, gradient L2 error, Hoelder constant."""
import argparse
import time

import numpy as np

from lbsclab.certify import holder_certificate
from lbsclab.lagrangian import make_lagrangian
from lbsclab.mesh import DomainSpec, triangulate
from lbsclab.solver import assemble, minimize


def study(hs):
    f = make_lagrangian("quadratic")
    rows = []
    for h in hs:
        t0 = time.perf_counter()
        mesh = triangulate(DomainSpec.disc(h=h))
        res = minimize(assemble(mesh, f, 1.0, 0.0))
        exact = (np.sum(mesh.vertices**2, axis=1) - 1) / 4
        gerr = np.sqrt(mesh.triangle_areas @ np.sum((res.grad - mesh.barycenters / 2) ** 2, axis=1))
        hol = holder_certificate(res, mesh, 2.0, 0.5, f)
        rows.append((h, mesh.n_vertices, float(np.max(np.abs(res.u - exact))), float(gerr), hol.constant,
                     time.perf_counter() - t0))
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--levels", type=int, default=4, help="h = 1/8, 1/16, ... (this many levels)")
    args = ap.parse_args()
    rows = study([2.0 ** -(3 + i) for i in range(args.levels)])
    print(f"{'h':>9} {'vertices':>8} {'sup err':>10} {'grad L2':>10} {'holder C':>9} {'seconds':>8}")
    for h, n, e, g, c, s in rows:
        print(f"{h:9.6f} {n:8d} {e:10.3e} {g:10.3e} {c:9.4f} {s:8.1f}")
    for a, b in zip(rows, rows[1:]):
        print(f"rates h={b[0]:.6f}: sup {np.log2(a[2] / b[2]):.2f}, grad {np.log2(a[3] / b[3]):.2f}")
