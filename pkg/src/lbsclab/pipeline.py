"""Pipeline orchestration: check, conjugate, solve, certify, repair; report and CSV emission."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .barriers import build_barriers, build_lower_barrier, verify_comparison
from .certify import holder_certificate, lipschitz_certificate, theta_profile
from .lagrangian import Box, biconjugate, check_hypotheses, conjugate, radial_convexification
from .mesh import Mesh, _sample_indices, check_lbsc, check_uniform_convexity, triangulate
from .nonconvex import detect_components, offending_mask, vitali_repair, write_patches
from .scenario import Scenario
from .smoothing import SmoothingSchedule, regularize, smooth_g, smooth_lagrangian
from .solver import (
    SolveOptions,
    SolveResult,
    assemble,
    gradient_field,
    minimize,
    minimizing_sequence,
    strict_convexity_check,
)

__all__ = ["EXIT_OK", "EXIT_ERROR", "EXIT_HYPOTHESIS", "EXIT_NONCONVERGENCE", "EXIT_CERTIFICATE", "RunReport", "run", "STAGES"]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1  # unreadable input or I/O failure
EXIT_HYPOTHESIS = 2
EXIT_NONCONVERGENCE = 3
EXIT_CERTIFICATE = 4

STAGES = ("check", "conjugate", "solve", "certify", "repair", "run")

ORACLES = {
    # f = 1/2 |xi|^2 on the unit disc with constant g = lam and zero trace
    "poisson_disc": lambda x, lam: lam * (np.sum(x**2, axis=1) - 1.0) / 4.0,
}


class HypothesisFailure(Exception):
    pass


@dataclass
class RunReport:
    report: dict
    meta: dict
    exit_code: int
    out_dir: Path
    results: dict = field(default_factory=dict, repr=False)  # in-memory fields for callers

    @property
    def status(self) -> str:
        return self.report["status"]


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return obj


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_solution(out: Path, mesh: Mesh, res: SolveResult) -> None:
    _write_rows(out / "u.csv", ["index", "x", "y", "u"],
                ([i, p[0], p[1], v] for i, (p, v) in enumerate(zip(mesh.vertices, res.u))))
    b = mesh.barycenters
    _write_rows(out / "grad.csv", ["triangle", "bx", "by", "gx", "gy"],
                ([t, b[t, 0], b[t, 1], g[0], g[1]] for t, g in enumerate(res.grad)))


# ---------------------------------------------------------------------------
# stages


class _Run:
    def __init__(self, sc: Scenario, out: Path):
        self.sc = sc
        self.out = out
        self.report: dict = {"scenario": sc.to_dict()}
        self.timings: dict[str, float] = {}
        self.results: dict = {}
        self.nonconverged = False
        self.failed: list[str] = []
        self._mesh: Mesh | None = None
        self._f = None

    # lazily built shared state
    @property
    def mesh(self) -> Mesh:
        if self._mesh is None:
            self._mesh = triangulate(self.sc.domain)
            self._mesh.to_csv(self.out)
        return self._mesh

    @property
    def f(self):
        if self._f is None:
            self._f = self.sc.make_lagrangian()
        return self._f

    def timed(self, name, fn, *a):
        t = time.perf_counter()
        try:
            return fn(*a)
        finally:
            self.timings[name] = round(time.perf_counter() - t, 6)

    def fail(self, what: str, passed: bool) -> None:
        if not passed:
            self.failed.append(what)

    # -- check ---------------------------------------------------------------

    def check(self) -> None:
        sc, mesh = self.sc, self.mesh
        f = self.f
        hyp: dict = {"lagrangian": f.name, "meta": f.meta}
        ok = True
        if sc.mode == "nonconvex":
            ok &= self._check_nonconvex(hyp)
        else:
            rep = check_hypotheses(f)
            hyp["convexity"] = rep.to_dict()
            ok &= rep.passed
        uc = check_uniform_convexity(mesh, sc.R)
        phi = sc.phi_values(mesh)
        lbsc = check_lbsc(mesh, phi, sc.M, n_samples=sc.lbsc_samples)
        self.results["lbsc"] = lbsc
        geo = {"uniform_convexity": uc.to_dict(), "lbsc": lbsc.to_dict()}
        self.report["hypotheses"] = hyp
        self.report["geometry"] = geo
        if not (ok and uc.passed and lbsc.passed):
            raise HypothesisFailure(
                ", ".join(n for n, p in (("lagrangian", ok), ("uniform_convexity", uc.passed), ("lbsc", lbsc.passed))
                          if not p)
            )

    def _check_nonconvex(self, hyp: dict) -> bool:
        sc, f = self.sc, self.f
        P, dP = sc.primal_box
        D, dD = sc.dual_box
        fss = biconjugate(f, Box.square(P, dP), Box.square(D, dD))
        comps = detect_components(f, fss)
        relaxed = radial_convexification(f, sc.convexify_t_max)
        rep = check_hypotheses(relaxed)
        viol = int(np.sum(fss.values > fss.f_values + 1e-12))
        hyp["relaxation"] = rep.to_dict()
        hyp["components"] = comps.to_dict()
        hyp["biconjugate"] = {"grid_step": fss.spacing, "violations_above_f": viol,
                              "finite": bool(fss.finite_mask.all())}
        self.results.update(fss=fss, components=comps, relaxed=relaxed)
        return rep.passed and comps.passed and viol == 0

    # -- conjugate -------------------------------------------------------------

    def conjugate(self) -> None:
        sc, f = self.sc, self.f
        D, dD = sc.conjugate_box
        fs = conjugate(f, Box.square(4 * D, dD / 2), Box.square(D, dD))
        fs.to_csv(self.out / "fstar.csv")
        entry = {"dual_half_width": D, "dual_step": dD, "finite_fraction": float(fs.finite_mask.mean()),
                 "value_at_zero": float(fs(np.zeros(2)))}
        if "fss" in self.results:
            self.results["fss"].to_csv(self.out / "fss.csv")
        self.report["conjugate"] = entry
        self.results["fstar"] = fs

    # -- convex solve ----------------------------------------------------------

    def solve(self) -> None:
        sc, mesh, f = self.sc, self.mesh, self.f
        if sc.mode == "nonconvex":
            return self._solve_relaxed()
        g = sc.g_values(mesh)
        phi = sc.phi_values(mesh)
        opts = SolveOptions(max_iters=sc.max_iters, tol_rel=sc.tolerances.tol_rel)
        rep: dict = {}
        lbsc = self.results["lbsc"]
        ell = build_lower_barrier(lbsc, phi, mesh)
        self.results["ell"] = ell
        final = None
        if sc.direct:
            res = minimize(assemble(mesh, f, g, phi), ell.ell, opts)
            rep["direct"] = res.to_dict()
            self.nonconverged |= not res.converged
            final = res
            if sc.oracle is not None:
                lam = float(g[0])
                exact = ORACLES[sc.oracle](mesh.vertices, lam)
                rep["direct"]["oracle"] = sc.oracle
                rep["direct"]["oracle_error"] = float(np.max(np.abs(res.u - exact)))
        schedule = SmoothingSchedule(sc.ks, sc.sigma_ratio, sc.t_max)
        seq = minimizing_sequence(f, g, phi, schedule, mesh, u0=ell.ell, opts=opts, f_true=f)
        rep["sequence"] = [s.to_dict() for s in seq]
        self.nonconverged |= len(seq) < len(sc.ks) or not seq[-1].result.converged
        self.results["sequence"] = seq
        self.results["final"] = final if final is not None else seq[-1].result
        rep["final_source"] = "direct" if final is not None else f"k={seq[-1].k}"
        self.report["solve"] = rep
        write_solution(self.out, mesh, self.results["final"])

    # -- convex certificates ---------------------------------------------------

    def certify(self) -> None:
        sc, mesh, f = self.sc, self.mesh, self.f
        if sc.mode == "nonconvex":
            return
        tol = sc.tolerances
        g = sc.g_values(mesh)
        g_norm = float(np.max(np.abs(g)))
        phi = sc.phi_values(mesh)
        bar = build_barriers(f, g_norm, phi, mesh)
        ell = self.results["ell"]
        ell_applies = bool(np.all(g <= 0))
        cert: dict = {"barriers": bar.to_dict(), "lower_barrier": {"L": ell.L, "applies": ell_applies}}

        per_k = []
        comparison_ok = True
        lipschitz_ok = True
        for step in self.results["sequence"]:
            cmp = verify_comparison(step.result, bar, ell if ell_applies else None, tol.tol_comparison)
            lip = lipschitz_certificate(step.result, mesh, f.r, f.eps, g_norm, sc.c_sobolev, tol.tol_lip)
            per_k.append({"k": step.k, "sup_norm": step.result.sup_norm, "comparison": cmp.to_dict(),
                          "lipschitz": lip.to_dict()})
            comparison_ok &= cmp.passed
            lipschitz_ok &= lip.passed or not step.result.converged
        cert["per_k"] = per_k
        cert["comparison_pass"] = comparison_ok
        cert["lipschitz_pass"] = lipschitz_ok
        cert["lipschitz_invariance"] = lipschitz_invariance(per_k)
        cert["sequence"] = sequence_check(self.results["sequence"])
        self.fail("comparison", comparison_ok)
        self.fail("lipschitz", lipschitz_ok)
        self.fail("lipschitz_invariance", cert["lipschitz_invariance"]["pass"])
        self.fail("sequence", cert["sequence"]["pass"])

        final = self.results["final"]
        lip = lipschitz_certificate(final, mesh, f.r, f.eps, g_norm, sc.c_sobolev, tol.tol_lip)
        cert["final_lipschitz"] = lip.to_dict()
        self.fail("final_lipschitz", lip.passed)

        idx = _sample_indices(mesh.n_boundary, sc.anchors)
        thetas = []
        for j, i in enumerate(idx):
            z = mesh.boundary_points[i]
            th = theta_profile(final, mesh, z, q0=lip.q0, tol=tol.tol_theta)
            _write_rows(self.out / f"theta_{j}.csv", ["q", "theta"], zip(th.q, th.theta))
            thetas.append({"anchor": j, "boundary_index": int(i), **th.to_dict()})
        theta_ok = all(t["pass"] for t in thetas)
        cert["theta"] = {"anchors": thetas, "q0": lip.q0, "tol_theta": tol.tol_theta, "pass": theta_ok}
        self.fail("theta", theta_ok)

        if sc.holder is not None:
            hc = holder_certificate(final, mesh, float(sc.holder["p"]), float(sc.holder["c"]), f)
            cert["holder"] = hc.to_dict()
            self.fail("holder", hc.passed)

        if sc.two_start:
            cert["two_start"] = self._two_start(bar)
            self.fail("two_start", cert["two_start"]["pass"])
        self.report["certificates"] = cert

    def _two_start(self, bar) -> dict:
        """Re-solve the last regularized problem from the upper barrier and compare gradients."""
        sc, mesh, f = self.sc, self.mesh, self.f
        last = self.results["sequence"][-1]
        k = last.k
        fk = smooth_lagrangian(f, k, sc.t_max, sigma=SmoothingSchedule(sc.ks, sc.sigma_ratio, sc.t_max).sigma(k))
        F = assemble(mesh, regularize(fk, k), smooth_g(sc.g_values(mesh), k, mesh), sc.phi_values(mesh))
        opts = SolveOptions(max_iters=sc.max_iters, tol_rel=sc.tolerances.tol_rel)
        other = minimize(F, bar.upper, opts)
        self.nonconverged |= not other.converged
        rep = strict_convexity_check(last.result, other, f.r)
        return {"k": k, "second_start": "upper_barrier", "iterations": other.iterations, **rep.to_dict()}

    # -- nonconvex ------------------------------------------------------------

    def _solve_relaxed(self) -> None:
        sc, mesh = self.sc, self.mesh
        k = sc.relax_k
        relaxed = self.results["relaxed"]
        fk = regularize(smooth_lagrangian(relaxed, k, sc.t_max, sigma=sc.sigma_ratio / k), k)
        opts = SolveOptions(max_iters=sc.max_iters, tol_rel=sc.tolerances.tol_rel)
        res = minimize(assemble(mesh, fk, sc.g_values(mesh), sc.phi_values(mesh)), None, opts)
        self.nonconverged |= not res.converged
        self.results["final"] = res
        self.report["solve"] = {"relaxed": {"k": k, "lagrangian": relaxed.name, **res.to_dict()}}
        write_solution(self.out, mesh, res)

    def repair(self) -> None:
        sc, mesh, f = self.sc, self.mesh, self.f
        if sc.mode != "nonconvex":
            self.report["repair"] = {"applicable": False, "n_patches": 0}
            return
        if "final" not in self.results:
            self._solve_relaxed()
        tol = sc.tolerances
        comps = self.results["components"].components
        res = self.results["final"]
        g = sc.g_values(mesh)
        rep = vitali_repair(res.u, f, self.results["relaxed"], comps, g, mesh, tol.tol_area, tol.tol_energy,
                            sc.max_passes)
        write_patches(self.out / "patches.jsonl", rep.patches, rep.checks)
        d = rep.to_dict()
        d["applicable"] = True
        self.report["repair"] = d
        self.results["repair"] = rep
        before = np.linalg.norm(res.grad, axis=1)
        after = np.linalg.norm(gradient_field(mesh, rep.u), axis=1)
        edges = np.linspace(0.0, max(float(before.max()), float(after.max()), 1.0) * 1.0001, 41)
        hb, _ = np.histogram(before, edges, weights=mesh.triangle_areas)
        ha, _ = np.histogram(after, edges, weights=mesh.triangle_areas)
        _write_rows(self.out / "grad_hist.csv", ["lo", "hi", "area_before", "area_after"],
                    zip(edges[:-1], edges[1:], hb, ha))
        self.fail("repair", rep.passed and d["density_ok"])
        # offending fraction of the input, for reference
        d["offending_mask_count"] = int(offending_mask(res.grad, comps).sum())


def lipschitz_invariance(per_k: list[dict]) -> dict:
    """Spread of worst_ratio across k, set against the relative spread of sup |u_k|."""
    wr = np.array([p["lipschitz"]["worst_ratio"] for p in per_k])
    sup = np.array([p["sup_norm"] for p in per_k])
    Q = np.array([p["lipschitz"]["Q"] for p in per_k])
    scaled = wr * Q  # max |grad u_k| dist, the Q-free part
    rel_wr = float(wr.max() / wr.min() - 1.0) if wr.min() > 0 else 0.0
    rel_sup = float(sup.max() / sup.min() - 1.0) if sup.min() > 0 else 0.0
    # Q = 2 sup|u_k| + terms fixed by the data, so Q - 2 sup|u_k| must not move with k
    drift = Q - 2 * sup
    const_drift = float(np.max(np.abs(drift - drift[-1])))
    return {"worst_ratio_min": float(wr.min()), "worst_ratio_max": float(wr.max()),
            "relative_spread_worst_ratio": rel_wr, "relative_spread_sup_norm": rel_sup,
            "scaled_gradient_max": float(scaled.max()), "constants_drift": const_drift,
            "constants_depend_only_on_sup_norm": bool(const_drift <= 1e-12 * float(Q.max())),
            "pass": bool(rel_wr <= rel_sup + 1e-12)}


def sequence_check(seq, tol: float = 1e-8) -> dict:
    E = np.array([s.true_energy for s in seq])
    steps = np.diff(E)
    total = float(E[0] - E[-1]) if len(E) > 1 else 0.0
    final = float(abs(steps[-1])) if len(steps) else 0.0
    monotone = bool(np.all(steps <= tol))
    return {"ks": [s.k for s in seq], "true_energy": E.tolist(), "nonincreasing": monotone,
            "total_decrease": total, "final_step": final, "ratio": total / final if final > 0 else "inf",
            "pass": monotone and total > 10 * final}


# ---------------------------------------------------------------------------


_PLAN = {
    "check": ("check",),
    "conjugate": ("check", "conjugate"),
    "solve": ("check", "solve"),
    "certify": ("check", "solve", "certify"),
    "repair": ("check", "solve", "repair"),
}


def _plan(stage: str, sc: Scenario) -> tuple[str, ...]:
    if stage != "run":
        return _PLAN[stage]
    if sc.mode == "check_only":
        return ("check",)
    if sc.mode == "nonconvex":
        return ("check", "conjugate", "solve", "repair")
    return ("check", "conjugate", "solve", "certify")


def run(sc: Scenario, out_dir: str | Path, stage: str = "run") -> RunReport:
    """Execute the stages of ``stage`` and write report.json (deterministic) and meta.json (timings)."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    r = _Run(sc, out)
    code = EXIT_OK
    status = "ok"
    started = datetime.now(timezone.utc).isoformat()
    plan = _plan(stage, sc)
    r.report["stages"] = list(plan)
    try:
        for name in plan:
            r.timed(name, getattr(r, name))
    except HypothesisFailure as exc:
        code, status = EXIT_HYPOTHESIS, "hypothesis_failure"
        r.report["error"] = {"kind": "hypothesis", "failed": str(exc)}
    except RuntimeError as exc:
        code, status = EXIT_NONCONVERGENCE, "nonconvergence"
        r.report["error"] = {"kind": type(exc).__name__, "message": str(exc)}
    except (OSError, ValueError, KeyError) as exc:
        code, status = EXIT_ERROR, "error"
        r.report["error"] = {"kind": type(exc).__name__, "message": str(exc)}
    if code == EXIT_OK:
        if r.nonconverged:
            code, status = EXIT_NONCONVERGENCE, "nonconvergence"
        elif r.failed:
            code, status = EXIT_CERTIFICATE, "certificate_failure"
    r.report["failed_checks"] = r.failed
    r.report["status"] = status
    r.report["exit_code"] = code
    report = _clean(r.report)
    meta = {"started": started, "finished": datetime.now(timezone.utc).isoformat(), "timings": r.timings,
            "version": __version__, "python": platform.python_version(), "numpy": np.__version__}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(out / "meta.json", "w") as fh:
        json.dump(_clean(meta), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return RunReport(report, meta, code, out, r.results)
