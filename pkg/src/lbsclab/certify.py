"""A posteriori certificates: local Lipschitz bound with explicit Q, Theta(q) endpoint, boundary Hoelder constant."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lagrangian import Lagrangian
from .mesh import Mesh, _inward_normals, _sample_indices
from .solver import SolveResult

__all__ = [
    "lipschitz_constants",
    "LipschitzCertificate",
    "lipschitz_certificate",
    "ThetaProfile",
    "theta_values",
    "theta_endpoint",
    "theta_profile",
    "holder_exponent",
    "HolderCertificate",
    "holder_certificate",
    "holder_stable",
]

N_DIM = 2


def lipschitz_constants(r: float, eps: float, diam: float, area: float, u_sup: float, g_norm: float, c: float = 1.0):
    """(r0, q0, Q) for N = 2."""
    r0 = (r + 1.0) * diam + u_sup + 1.0
    if g_norm == 0.0:
        growth = 0.0
    elif eps <= 0.0:
        growth = np.inf
    else:
        growth = (N_DIM + 1) * (c * g_norm / eps) ** (N_DIM / (N_DIM + 1)) * area ** (1.0 / N_DIM)
    q0 = r0 + growth
    return r0, q0, u_sup + q0


@dataclass(frozen=True)
class LipschitzCertificate:
    r: float
    r0: float
    q0: float
    Q: float
    c_sobolev: float
    eps: float
    ratio: np.ndarray = field(repr=False)
    worst_ratio: float
    tolerance: float
    Q_quarter: float  # Q with eps/4, the modulus of the approximants
    worst_ratio_quarter: float

    @property
    def passed(self) -> bool:
        return self.worst_ratio <= 1.0 + self.tolerance

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "r0": self.r0,
            "q0": self.q0,
            "Q": self.Q,
            "c_sobolev": self.c_sobolev,
            "eps": self.eps,
            "worst_ratio": self.worst_ratio,
            "Q_eps_quarter": self.Q_quarter,
            "worst_ratio_eps_quarter": self.worst_ratio_quarter,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def lipschitz_certificate(
    result: SolveResult, mesh: Mesh, r: float, eps: float, g_norm: float, c_sobolev: float = 1.0, tol: float = 0.0
) -> LipschitzCertificate:
    """|grad u| dist(barycenter) / Q per triangle; Q from the data only."""
    dist = mesh.distance_to_boundary(mesh.barycenters)
    scaled = np.linalg.norm(result.grad, axis=1) * dist
    r0, q0, Q = lipschitz_constants(r, eps, mesh.diam, mesh.area, result.sup_norm, g_norm, c_sobolev)
    _, _, Q4 = lipschitz_constants(r, eps / 4, mesh.diam, mesh.area, result.sup_norm, g_norm, c_sobolev)
    ratio = scaled / Q
    return LipschitzCertificate(
        r=r, r0=r0, q0=q0, Q=Q, c_sobolev=c_sobolev, eps=eps, ratio=ratio, worst_ratio=float(ratio.max()),
        tolerance=tol, Q_quarter=Q4, worst_ratio_quarter=float(scaled.max() / Q4),
    )


def _level_values(result: SolveResult, mesh: Mesh, z) -> np.ndarray:
    """v = <grad u, x - z> - u at triangle barycenters."""
    b = mesh.barycenters
    u_b = result.u[mesh.triangles].mean(axis=1)
    return np.einsum("tk,tk->t", result.grad, b - np.asarray(z, dtype=float)) - u_b


def theta_values(v: np.ndarray, areas: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Theta(q) = integral over t > q of |{v >= t}|, exact for piecewise-constant v."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    return np.array([areas @ np.maximum(v - qq, 0.0) for qq in q])


def theta_endpoint(v: np.ndarray, areas: np.ndarray, tol: float = 1e-9) -> float:
    """Largest q with Theta(q) > tol (Theta is piecewise linear and nonincreasing)."""
    order = np.argsort(-v)
    vs, a = v[order], areas[order]
    A = np.cumsum(a)
    S = np.cumsum(a * vs)
    # on [vs[j+1], vs[j]] Theta(q) = S[j] - A[j] q, increasing breakpoint values theta_at
    theta_at = S - A * vs
    j = int(np.searchsorted(theta_at, tol, side="right")) - 1
    return float((S[j] - tol) / A[j]) + 0.0  # no negative zero in reports


@dataclass(frozen=True)
class ThetaProfile:
    z: np.ndarray
    q: np.ndarray
    theta: np.ndarray
    endpoint: float
    q0: float | None

    @property
    def passed(self) -> bool:
        return self.q0 is None or self.endpoint <= self.q0

    def to_dict(self) -> dict:
        return {"z": self.z.tolist(), "endpoint": self.endpoint, "q0": self.q0, "pass": self.passed}


def theta_profile(
    result: SolveResult, mesh: Mesh, z, q_grid: np.ndarray | None = None, q0: float | None = None, tol: float = 1e-9
) -> ThetaProfile:
    v = _level_values(result, mesh, z)
    areas = mesh.triangle_areas
    if q_grid is None:
        top = 1.5 * q0 if q0 is not None else max(float(v.max()), 1.0) * 1.5
        q_grid = np.linspace(0.0, top, 301)
    q_grid = np.asarray(q_grid, dtype=float)
    if q0 is not None and (q_grid.min() > 0.0 or q_grid.max() < 1.5 * q0):
        raise ValueError(f"q grid must cover [0, {1.5 * q0}]")
    return ThetaProfile(np.asarray(z, dtype=float), q_grid, theta_values(v, areas, q_grid),
                        theta_endpoint(v, areas, tol), q0)


def holder_exponent(p: float, n: int = 2) -> float:
    if p <= (n + 1) / 2:
        raise ValueError(f"growth exponent p={p} must exceed (n+1)/2 = {(n + 1) / 2}")
    return (2 * p - n - 1) / (4 * p + n - 3)


@dataclass(frozen=True)
class HolderCertificate:
    p: float
    c: float
    n: int
    alpha: float
    constant: float
    n_pairs: int
    growth_ok: bool

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.constant) and self.growth_ok)

    def to_dict(self) -> dict:
        return {"p": self.p, "c": self.c, "n": self.n, "alpha": self.alpha, "constant": self.constant, "n_pairs": self.n_pairs,
                "growth_ok": self.growth_ok, "pass": self.passed}


def _growth_holds(f: Lagrangian, c: float, p: float, half_width: float = 4.0, n: int = 81) -> bool:
    a = np.linspace(-half_width, half_width, n)
    xi = np.stack(np.meshgrid(a, a, indexing="ij"), axis=-1).reshape(-1, 2)
    return bool(np.all(f(xi) >= c * np.linalg.norm(xi, axis=1) ** p - 1e-12))


def holder_certificate(
    result: SolveResult,
    mesh: Mesh,
    p: float,
    c: float,
    f: Lagrangian | None = None,
    n_anchors: int = 512,
    n_depth: int = 64,
    depth: float | None = None,
) -> HolderCertificate:
    """sup |u(x) - u(gamma)| / |x - gamma|^alpha over boundary anchors and points along inward normals."""
    if mesh.spec is not None and mesh.spec.kind not in ("disc", "ellipse"):
        raise ValueError("boundary Hoelder certificate needs a smooth boundary (disc or ellipse)")
    alpha = holder_exponent(p, 2)
    loop = mesh.boundary_points
    idx = _sample_indices(len(loop), n_anchors)
    normals = _inward_normals(loop)[idx]
    depth = 0.5 * float(mesh.dist.max()) if depth is None else depth
    s = depth * np.arange(1, n_depth + 1) / n_depth
    gam = loop[idx]
    pts = gam[:, None, :] + s[None, :, None] * normals[:, None, :]
    vals = mesh.interpolate(result.u, pts.reshape(-1, 2)).reshape(len(idx), n_depth)
    u_gam = result.u[mesh.boundary_loop][idx]
    q = np.abs(vals - u_gam[:, None]) / s[None, :] ** alpha
    growth_ok = True if f is None else _growth_holds(f, c, p)
    return HolderCertificate(p, c, 2, alpha, float(q.max()), int(q.size), growth_ok)


def holder_stable(coarse: HolderCertificate, fine: HolderCertificate, rel: float = 0.1) -> bool:
    return abs(fine.constant - coarse.constant) <= rel * abs(coarse.constant)
