"""P1 finite-element energy and a preconditioned accelerated gradient minimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .lagrangian import Lagrangian
from .mesh import Mesh
from .smoothing import SmoothingSchedule, regularize, smooth_g

__all__ = [
    "DiscreteFunctional",
    "SolveOptions",
    "SolveResult",
    "assemble",
    "gradient_operator",
    "gradient_field",
    "harmonic_lift",
    "minimize",
    "minimizing_sequence",
    "SequenceStep",
    "strict_convexity_check",
]

log = logging.getLogger(__name__)


def gradient_operator(mesh: Mesh) -> sp.csr_matrix:
    """Sparse (2T x V) matrix: rows 2t, 2t+1 give the gradient of the interpolant on triangle t."""
    P = mesh.vertices[mesh.triangles]  # (T, 3, 2)
    e1 = P[:, 1] - P[:, 0]
    e2 = P[:, 2] - P[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # inverse transpose of [e1 e2] applied to reference gradients (-1,-1), (1,0), (0,1)
    inv = np.stack([np.stack([e2[:, 1], -e1[:, 1]], -1), np.stack([-e2[:, 0], e1[:, 0]], -1)], 1) / det[:, None, None]
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    coef = np.einsum("tij,vj->tiv", inv, ref)  # (T, 2 components, 3 vertices)
    T = len(mesh.triangles)
    rows = np.repeat(np.arange(2 * T).reshape(T, 2), 3, axis=1).reshape(T, 2, 3)
    cols = np.broadcast_to(mesh.triangles[:, None, :], (T, 2, 3))
    return sp.csr_matrix((coef.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * T, mesh.n_vertices))


def gradient_field(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    return (gradient_operator(mesh) @ np.asarray(u, dtype=float)).reshape(-1, 2)


@dataclass
class DiscreteFunctional:
    mesh: Mesh
    f: Lagrangian
    g: np.ndarray
    phi: np.ndarray
    G: sp.csr_matrix
    areas: np.ndarray
    load: np.ndarray  # lumped mass times g

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.mesh.is_boundary)

    def energy(self, u: np.ndarray) -> float:
        grads = (self.G @ u).reshape(-1, 2)
        return float(self.areas @ self.f(grads) + self.load @ u)

    def energy_and_gradient(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        grads = (self.G @ u).reshape(-1, 2)
        E = float(self.areas @ self.f(grads) + self.load @ u)
        flux = (self.f.grad(grads) * self.areas[:, None]).ravel()
        return E, self.G.T @ flux + self.load

    def with_boundary(self, u: np.ndarray) -> np.ndarray:
        u = np.array(u, dtype=float)
        u[self.mesh.boundary_loop] = self.phi
        return u

    def stiffness(self) -> sp.csc_matrix:
        A = sp.diags(np.repeat(self.areas, 2))
        return (self.G.T @ A @ self.G).tocsc()


def assemble(mesh: Mesh, f: Lagrangian, g, phi) -> DiscreteFunctional:
    if f.grad is None:
        raise ValueError(f"{f.name!r} has no gradient oracle; smooth it first")
    g = np.broadcast_to(np.asarray(g, dtype=float), (mesh.n_vertices,)).copy()
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (mesh.n_boundary,)).copy()
    G = gradient_operator(mesh)
    return DiscreteFunctional(mesh, f, g, phi, G, mesh.triangle_areas, mesh.lumped_mass * g)


def harmonic_lift(F: DiscreteFunctional) -> np.ndarray:
    K = F.stiffness()
    I = F.interior
    u = F.with_boundary(np.zeros(F.mesh.n_vertices))
    rhs = -(K[I][:, F.mesh.boundary_loop] @ F.phi)
    u[I] = splu(K[I][:, I].tocsc()).solve(rhs)
    return u


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 20000
    tol_rel: float = 1e-12
    window: int = 50
    min_iters: int = 100
    step0: float = 1.0


@dataclass(frozen=True)
class SolveResult:
    u: np.ndarray
    grad: np.ndarray
    energy: float
    iterations: int
    rel_decrease_last: float
    converged: bool
    sup_norm: float
    residual: float
    energy_trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "energy": self.energy,
            "iterations": self.iterations,
            "rel_decrease_last": self.rel_decrease_last,
            "converged": self.converged,
            "sup_norm": self.sup_norm,
            "residual": self.residual,
        }


def minimize(F: DiscreteFunctional, u0: np.ndarray | None = None, opts: SolveOptions = SolveOptions()) -> SolveResult:
    """Accelerated gradient descent in the stiffness metric, with backtracking and restart.

    Accepted iterates never increase the energy; a rejected momentum step restarts from the last iterate.
    """
    I = F.interior
    K = F.stiffness()
    lu = splu(K[I][:, I].tocsc())
    x = F.with_boundary(harmonic_lift(F) if u0 is None else u0)
    Ex, gx = F.energy_and_gradient(x)
    y, Ey, gy = x, Ex, gx
    L = 1.0 / opts.step0
    t = 1.0
    trace = [Ex]
    rel = np.inf
    converged = False
    it = 0
    while it < opts.max_iters:
        it += 1
        d = lu.solve(gy[I])
        gd = float(gy[I] @ d)
        while True:
            z = y.copy()
            z[I] -= d / L
            Ez = F.energy(z)
            if Ez <= Ey - 0.5 * gd / L + 1e-15 * abs(Ey) or L > 1e14:
                break
            L *= 2.0
        if Ez > Ex:
            if t > 1.0:
                # momentum overshoot: restart from the current iterate
                t = 1.0
                if gx is None:
                    gx = F.energy_and_gradient(x)[1]
                y, Ey, gy = x, Ex, gx
                continue
            if Ez - Ex > 1e-13 * max(1.0, abs(Ex)):
                raise RuntimeError("energy increased at an accepted step")
            z, Ez = x, Ex
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = z + ((t - 1) / t_next) * (z - x)
        x, Ex, gx = z, Ez, None
        t = t_next
        Ey, gy = F.energy_and_gradient(y)
        L *= 0.9
        trace.append(Ex)
        if it >= max(opts.window, opts.min_iters):
            old = trace[-opts.window - 1]
            rel = (old - Ex) / max(abs(Ex), 1.0)
            if rel < opts.tol_rel:
                converged = True
                break
    _, gfin = F.energy_and_gradient(x)
    res = float(np.sqrt(max(gfin[I] @ lu.solve(gfin[I]), 0.0)))
    if not converged:
        log.warning("minimize stopped after %d iterations, relative decrease %.3e", it, rel)
    return SolveResult(
        u=x,
        grad=(F.G @ x).reshape(-1, 2),
        energy=F.energy(x),
        iterations=it,
        rel_decrease_last=float(rel),
        converged=converged,
        sup_norm=float(np.max(np.abs(x))),
        residual=res,
        energy_trace=trace,
    )


@dataclass(frozen=True)
class SequenceStep:
    k: int
    result: SolveResult
    true_energy: float
    delta: float
    g_error: float

    def to_dict(self) -> dict:
        return {"k": self.k, "true_energy": self.true_energy, "delta": self.delta, "g_error": self.g_error,
                **self.result.to_dict()}


def minimizing_sequence(
    f: Lagrangian,
    g: np.ndarray,
    phi: np.ndarray,
    schedule: SmoothingSchedule,
    mesh: Mesh,
    u0: np.ndarray | None = None,
    opts: SolveOptions = SolveOptions(),
    f_true: Lagrangian | None = None,
) -> list[SequenceStep]:
    """Solve with h_k = f_k + |xi|^2/k and g_k for every k; I(u_k) is evaluated with f_true and g.

    Each solve is warm-started from the previous one. Stops at the first nonconverged k.
    """
    from .smoothing import smooth_lagrangian

    f_true = f if f_true is None else f_true
    g = np.broadcast_to(np.asarray(g, dtype=float), (mesh.n_vertices,))
    truth = assemble(mesh, _value_only(f_true), g, phi)
    out: list[SequenceStep] = []
    start = u0
    for k in schedule.ks:
        fk = smooth_lagrangian(f, k, schedule.t_max, sigma=schedule.sigma(k))
        gk = smooth_g(g, k, mesh)
        res = minimize(assemble(mesh, regularize(fk, k), gk, phi), start, opts)
        out.append(SequenceStep(k, res, truth.energy(res.u), fk.params["delta"], float(np.max(np.abs(gk - g)))))
        if not res.converged:
            log.warning("minimizing sequence truncated at k=%d", k)
            break
        start = res.u
    return out


def _value_only(f: Lagrangian) -> Lagrangian:
    if f.grad is not None:
        return f
    return Lagrangian(f.name, f.eval, lambda xi: np.zeros_like(xi), r=f.r, eps=f.eps, p_growth=f.p_growth,
                      profile=f.profile, params=f.params)


@dataclass(frozen=True)
class StrictConvexityReport:
    threshold: float
    n_checked: int
    max_difference: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_difference <= self.tolerance

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "n_checked": self.n_checked, "max_difference": self.max_difference,
                "tolerance": self.tolerance, "pass": self.passed}


def strict_convexity_check(a: SolveResult, b: SolveResult, r: float, tol: float = 1e-4) -> StrictConvexityReport:
    """Gradients of two solves must agree wherever either exceeds r + 1 in norm."""
    mask = (np.linalg.norm(a.grad, axis=1) > r + 1) | (np.linalg.norm(b.grad, axis=1) > r + 1)
    diff = np.linalg.norm(a.grad - b.grad, axis=1)[mask]
    return StrictConvexityReport(r + 1, int(mask.sum()), float(diff.max()) if diff.size else 0.0, tol)
