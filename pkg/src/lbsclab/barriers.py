"""Conjugate barriers omega_alpha, their constants, the lower Lipschitz barrier and the sandwich check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lagrangian import Box, ConjugateGrid, Lagrangian, conjugate
from .mesh import LBSCReport, Mesh

__all__ = [
    "BarrierField",
    "LowerBarrier",
    "ComparisonReport",
    "barrier_conjugate",
    "build_omega",
    "fit_constants",
    "build_barriers",
    "build_lower_barrier",
    "verify_comparison",
    "edge_lipschitz",
]

N_DIM = 2


def barrier_conjugate(f: Lagrangian, alpha: float, mesh: Mesh, x0, n_dual: int = 201, max_doublings: int = 8) -> ConjugateGrid:
    """f* on a dual box covering alpha (x - x0) / N, with a primal box grown until every sup is interior."""
    x0 = np.asarray(x0, dtype=float)
    reach = abs(alpha) * float(np.max(np.linalg.norm(mesh.vertices - x0, axis=1))) / N_DIM
    D = max(1.25 * reach, 0.5)
    dual = Box.square(D, 2 * D / (n_dual - 1))
    P = 2.0 * D + 1.0
    for _ in range(max_doublings):
        primal = Box.square(P, 2 * P / 400)
        fs = conjugate(f, primal, dual)
        if fs.finite_mask.all():
            return fs
        P *= 2
    raise ValueError(f"sup not attained inside primal box of half-width {P / 2}; is {f.name!r} superlinear?")


def build_omega(fstar: ConjugateGrid, alpha: float, x0, mesh: Mesh, points: np.ndarray | None = None) -> np.ndarray:
    """omega_alpha(x) = (N / alpha) f*(alpha (x - x0) / N) at the mesh vertices (or given points)."""
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    pts = mesh.vertices if points is None else np.asarray(points, dtype=float)
    arg = alpha * (pts - np.asarray(x0, dtype=float)) / N_DIM
    return (N_DIM / alpha) * fstar(arg)


def fit_constants(
    omega_plus_bdry: np.ndarray, omega_minus_bdry: np.ndarray, phi: np.ndarray, alpha: float, shift: float = 1.0
) -> tuple[float, float]:
    """c1 = min(phi - omega~_alpha), c2 = max(phi - omega~_{-alpha}) over boundary samples.

    omega~ is built from (f - shift)* = f* + shift, so omega~_{+-alpha} = omega_{+-alpha} +- N shift / alpha.
    """
    lift = N_DIM * shift / abs(alpha)
    c1 = float(np.min(phi - (omega_plus_bdry + lift)))
    c2 = float(np.max(phi - (omega_minus_bdry - lift)))
    return c1, c2


def edge_lipschitz(mesh: Mesh, values: np.ndarray) -> float:
    e = mesh.edges()
    lengths = np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)
    return float(np.max(np.abs(values[e[:, 1]] - values[e[:, 0]]) / lengths))


@dataclass(frozen=True)
class BarrierField:
    omega_plus: np.ndarray
    omega_minus: np.ndarray
    c1: float
    c2: float
    x0: np.ndarray
    alpha: float
    K: float

    @property
    def lower(self) -> np.ndarray:
        return self.omega_plus + self.c1

    @property
    def upper(self) -> np.ndarray:
        return self.omega_minus + self.c2

    @property
    def U0(self) -> float:
        """Sup-norm bound implied by the sandwich."""
        return float(max(np.max(np.abs(self.lower)), np.max(np.abs(self.upper))))

    def to_dict(self) -> dict:
        return {"c1": self.c1, "c2": self.c2, "x0": self.x0.tolist(), "alpha": self.alpha, "K": self.K, "U0": self.U0}


def build_barriers(f: Lagrangian, g_norm: float, phi: np.ndarray, mesh: Mesh, x0=None) -> BarrierField:
    """Both barriers with alpha = ||g|| + 1e-12 and x0 the vertex barycenter by default."""
    alpha = float(g_norm) + 1e-12
    x0 = mesh.vertices.mean(axis=0) if x0 is None else np.asarray(x0, dtype=float)
    fs_plus = barrier_conjugate(f, alpha, mesh, x0)
    wp = build_omega(fs_plus, alpha, x0, mesh)
    wm = build_omega(fs_plus, -alpha, x0, mesh)
    b = mesh.boundary_loop
    c1, c2 = fit_constants(wp[b], wm[b], np.asarray(phi, dtype=float), alpha)
    K = max(edge_lipschitz(mesh, wp), edge_lipschitz(mesh, wm))
    return BarrierField(wp, wm, c1, c2, x0, alpha, K)


@dataclass(frozen=True)
class LowerBarrier:
    ell: np.ndarray
    L: float
    anchors: np.ndarray
    slopes: np.ndarray
    phi_anchor: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        planes = self.phi_anchor[None, :] + np.einsum("pk,ak->pa", pts, self.slopes) - np.sum(
            self.slopes * self.anchors, axis=1
        )[None, :]
        return planes.max(axis=1)


def build_lower_barrier(lbsc: LBSCReport, phi: np.ndarray, mesh: Mesh) -> LowerBarrier:
    """Supremum of the supporting affine functions found by the LBSC check."""
    if not lbsc.passed:
        raise ValueError("boundary data fail the lower bounded slope condition; no lower barrier")
    anchors = mesh.boundary_points[lbsc.samples]
    phi_a = np.asarray(phi, dtype=float)[lbsc.samples]
    lb = LowerBarrier(np.empty(0), 0.0, anchors, lbsc.slopes.copy(), phi_a)
    ell = np.empty(mesh.n_vertices)
    for k in range(0, mesh.n_vertices, 4096):
        ell[k : k + 4096] = lb(mesh.vertices[k : k + 4096])
    return LowerBarrier(ell, edge_lipschitz(mesh, ell), anchors, lb.slopes, phi_a)


@dataclass(frozen=True)
class ComparisonReport:
    lower_margin: np.ndarray
    upper_margin: np.ndarray
    ell_margin: np.ndarray | None
    tolerance: float

    @property
    def min_margin(self) -> float:
        parts = [self.lower_margin.min(), self.upper_margin.min()]
        if self.ell_margin is not None:
            parts.append(self.ell_margin.min())
        return float(min(parts))

    @property
    def passed(self) -> bool:
        return self.min_margin >= -self.tolerance

    def to_dict(self) -> dict:
        return {
            "lower_min_margin": float(self.lower_margin.min()),
            "upper_min_margin": float(self.upper_margin.min()),
            "ell_min_margin": None if self.ell_margin is None else float(self.ell_margin.min()),
            "min_margin": self.min_margin,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def verify_comparison(u, barriers: BarrierField, ell: LowerBarrier | None = None, tol: float = 1e-6) -> ComparisonReport:
    """Per-vertex margins of omega_alpha + c1 <= u <= omega_{-alpha} + c2 and ell <= u."""
    u = np.asarray(getattr(u, "u", u), dtype=float)
    return ComparisonReport(
        lower_margin=u - barriers.lower,
        upper_margin=barriers.upper - u,
        ell_margin=None if ell is None else u - ell.ell,
        tolerance=tol,
    )
