"""Nonconvexity components of f, pyramidal surgery on relaxed minimizers and the Vitali-type repair."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .lagrangian import ConjugateGrid, Lagrangian
from .mesh import Mesh
from .solver import gradient_operator

log = logging.getLogger(__name__)

__all__ = [
    "NonconvexSet",
    "SurgeryPatch",
    "detect_components",
    "choose_simplex",
    "build_patch",
    "apply_patch",
    "EnergyDecrease",
    "verify_energy_decrease",
    "RepairReport",
    "vitali_repair",
    "offending_mask",
    "write_patches",
]


@dataclass(frozen=True)
class NonconvexSet:
    index: int
    polygon: np.ndarray  # CCW hull vertices in gradient space
    n_grid_points: int
    hull_excess: float  # fraction of grid points in the shrunk hull that are not in the component
    separation: float  # distance to the nearest other component (inf when alone)

    def __post_init__(self):
        P = self.polygon
        e = np.roll(P, -1, axis=0) - P
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        object.__setattr__(self, "_normals", n)  # outward for CCW
        object.__setattr__(self, "_offsets", np.einsum("ij,ij->i", n, P))

    def signed_depth(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the boundary, positive inside."""
        pts = np.asarray(pts, dtype=float)
        return np.min(self._offsets - pts @ self._normals.T, axis=-1)

    def contains(self, pts: np.ndarray, margin: float = 1e-9) -> np.ndarray:
        return self.signed_depth(pts) > margin

    def ray_exit(self, p: np.ndarray, d: np.ndarray) -> float:
        """Largest s with p + s d in the polygon (p inside, d unit)."""
        nd = self._normals @ d
        slack = self._offsets - self._normals @ p
        with np.errstate(divide="ignore"):
            s = np.where(nd > 1e-15, slack / nd, np.inf)
        return float(s.min())

    def to_dict(self) -> dict:
        return {"index": self.index, "n_vertices": len(self.polygon), "n_grid_points": self.n_grid_points,
                "hull_excess": self.hull_excess, "separation": self.separation}


@dataclass(frozen=True)
class ComponentReport:
    components: list
    passed: bool
    message: str = ""
    touches_box: bool = False

    def to_dict(self) -> dict:
        return {"components": [c.to_dict() for c in self.components], "pass": self.passed, "message": self.message,
                "touches_box": self.touches_box}


def detect_components(f: Lagrangian, fss: ConjugateGrid, tol_gap: float = 1e-3, max_excess: float = 0.02) -> ComponentReport:
    """Connected components of {f - f** > tol_gap} on the biconjugate grid, each replaced by its convex hull."""
    pts = fss.points
    gap = f(pts) - fss.values
    mask = gap > tol_gap
    labels, n = ndimage.label(mask)
    comps: list[NonconvexSet] = []
    msgs = []
    step = fss.spacing
    raw = []
    for i in range(1, n + 1):
        P = pts[labels == i]
        try:
            hull = ConvexHull(P)
        except (QhullError, ValueError):
            msgs.append(f"degenerate component of {len(P)} grid points")
            continue
        poly = P[hull.vertices]
        raw.append((P, poly))
    for i, (P, poly) in enumerate(raw):
        base = NonconvexSet(i, poly, len(P), 0.0, np.inf)
        inner = base.contains(pts.reshape(-1, 2), margin=1.5 * step)
        in_comp = mask.reshape(-1)
        excess = float(np.mean(~in_comp[inner])) if inner.any() else 0.0
        sep = np.inf
        for j, (Q, _) in enumerate(raw):
            if j != i:
                sep = min(sep, float(cKDTree(Q).query(P)[0].min()))
        comps.append(NonconvexSet(i, poly, len(P), excess, sep))
        if excess > max_excess:
            msgs.append(f"component {i} is not convex (hull excess {excess:.3f})")
        if sep <= step * 1.01:
            msgs.append(f"component {i} touches another component")
    # unbounded components (slabs) are legitimate but only known up to the box
    on_edge = bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())
    return ComponentReport(comps, not msgs, "; ".join(msgs), on_edge)


def offending_mask(grads: np.ndarray, comps: list[NonconvexSet], margin: float = 1e-9) -> np.ndarray:
    out = np.zeros(len(grads), dtype=bool)
    for S in comps:
        out |= S.contains(grads, margin)
    return out


def _inradius(xi: np.ndarray) -> np.ndarray:
    """Distance from 0 to the nearest edge line of each triangle xi[..., 3, 2] (0 assumed inside)."""
    a = xi
    e = np.roll(xi, -1, axis=-2) - xi
    cross = np.abs(a[..., 0] * e[..., 1] - a[..., 1] * e[..., 0])
    return np.min(cross / np.linalg.norm(e, axis=-1), axis=-1)


def choose_simplex(S: NonconvexSet, p: np.ndarray, n_rotations: int = 16):
    """Three exit points of rays at 120 degrees from p, rotated to maximize the inradius about 0."""
    th = (2 * np.pi / 3) * np.arange(n_rotations)[:, None] / n_rotations + (2 * np.pi / 3) * np.arange(3)[None, :]
    dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)  # (R, 3, 2)
    nd = dirs @ S._normals.T  # (R, 3, edges)
    slack = S._offsets - S._normals @ p
    with np.errstate(divide="ignore"):
        s = np.where(nd > 1e-15, slack / np.where(nd > 1e-15, nd, 1.0), np.inf).min(axis=-1)
    xi_all = s[..., None] * dirs
    radii = _inradius(xi_all)
    best = int(np.argmax(radii))
    xi = xi_all[best]
    # barycentric coordinates of 0 in the triangle xi
    A = np.vstack([xi.T, np.ones(3)])
    lam = np.linalg.solve(A, np.array([0.0, 0.0, 1.0]))
    return xi, lam, float(radii[best])


@dataclass(frozen=True)
class SurgeryPatch:
    center: np.ndarray
    triangle: int
    rho: float
    component: int
    grad: np.ndarray
    u_center: float
    delta: float
    delta_prime: float
    delta_eff: float
    simplex: np.ndarray
    lam: np.ndarray
    sign: int
    ball: np.ndarray = field(repr=False)  # vertex indices strictly inside B_rho
    E: np.ndarray = field(repr=False)  # vertex indices where the pyramid replaces u
    w: np.ndarray = field(repr=False)  # pyramid values on E

    def pyramid(self, pts: np.ndarray) -> np.ndarray:
        y = np.asarray(pts, dtype=float) - self.center
        s = y @ self.simplex.T
        v = s.max(axis=-1) if self.sign > 0 else s.min(axis=-1)
        return v + self.u_center + y @ self.grad - self.sign * (self.delta_eff / 3) * self.rho

    def to_dict(self) -> dict:
        return {
            "triangle": self.triangle,
            "center": self.center.tolist(),
            "rho": self.rho,
            "component": self.component,
            "grad": self.grad.tolist(),
            "delta": self.delta,
            "delta_prime": self.delta_prime,
            "delta_eff": self.delta_eff,
            "simplex": self.simplex.tolist(),
            "lambda": self.lam.tolist(),
            "sign": self.sign,
            "n_ball": int(len(self.ball)),
            "n_E": int(len(self.E)),
        }


def build_patch(
    u: np.ndarray,
    grads: np.ndarray,
    tri: int,
    S: NonconvexSet,
    sign: int,
    mesh: Mesh,
    rho_max: float | None = None,
    rho_min: float | None = None,
    locked: np.ndarray | None = None,
    tree: cKDTree | None = None,
    max_halvings: int = 12,
    tol: float = 1e-12,
    dist: float | None = None,
) -> SurgeryPatch | None:
    """Pyramidal patch at the barycenter of triangle ``tri``; None if no admissible radius exists."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    xbar = mesh.barycenters[tri]
    p = grads[tri]
    delta = float(S.signed_depth(p))
    if delta <= tol:
        return None
    delta_p = float(np.max(np.linalg.norm(S.polygon - p, axis=1)))
    xi, lam, d_eff = choose_simplex(S, p)
    u_c = float(u[mesh.triangles[tri]].mean())
    rho_min = 2.0 * mesh.h if rho_min is None else rho_min
    if dist is None:
        dist = float(mesh.distance_to_boundary(xbar[None])[0])
    rho = dist if rho_max is None else min(dist, rho_max)
    if rho < rho_min:
        return None
    tree = cKDTree(mesh.vertices) if tree is None else tree
    # the ladder starts at the distance of the nearest vertex violating a linearization bound;
    # search outward so that rejected candidates stay cheap
    reach = min(rho, 4.0 * rho_min)
    while True:
        near = np.asarray(tree.query_ball_point(xbar, reach), dtype=int)
        y = mesh.vertices[near] - xbar
        r = np.linalg.norm(y, axis=1)
        dev = u[near] - (u_c + y @ p)
        bad = (dev > 0.5 * d_eff * r + tol) | (dev < -0.5 * delta_p * r - tol)
        if bad.any() or reach >= rho:
            break
        reach = min(2.0 * reach, rho)
    if bad.any():
        rho = min(rho, float(r[bad].min()))
    for _ in range(max_halvings):
        if rho < rho_min:
            return None
        inside = r < rho * (1 - 1e-12)
        if not np.any(bad & inside):
            break
        rho *= 0.5
    else:
        return None
    ball = np.sort(near[inside])
    patch = SurgeryPatch(xbar, int(tri), float(rho), S.index, p.copy(), u_c, delta, delta_p, d_eff, xi, lam, sign,
                         ball, np.empty(0, dtype=int), np.empty(0))
    w = patch.pyramid(mesh.vertices[ball])
    sel = (w < u[ball]) if sign > 0 else (w > u[ball])
    if locked is not None:
        sel &= ~locked[ball]
    if not sel.any():
        return None
    return SurgeryPatch(xbar, int(tri), float(rho), S.index, p.copy(), u_c, delta, delta_p, d_eff, xi, lam, sign,
                        ball, ball[sel], w[sel])


def apply_patch(u: np.ndarray, patch: SurgeryPatch) -> np.ndarray:
    out = np.array(u, dtype=float)
    out[patch.E] = patch.w
    return out


@dataclass(frozen=True)
class EnergyDecrease:
    claim1: float  # integral of f**(grad new) - f**(grad old) over touched triangles
    claim2_margin: float  # integral of g (u_old - u_new), oriented to be positive
    density: float  # area(E) / area(B_rho)
    density_bound: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.claim1 <= self.tolerance and self.claim2_margin > 0

    def to_dict(self) -> dict:
        return {"claim1": self.claim1, "claim2_margin": self.claim2_margin, "density": self.density,
                "density_bound": self.density_bound, "tolerance": self.tolerance, "pass": self.passed}


def _touched(mesh: Mesh, verts: np.ndarray) -> np.ndarray:
    flag = np.zeros(mesh.n_vertices, dtype=bool)
    flag[verts] = True
    return np.flatnonzero(flag[mesh.triangles].any(axis=1))


def _triangle_grads(mesh: Mesh, u: np.ndarray, T: np.ndarray) -> np.ndarray:
    tri = mesh.triangles[T]
    P = mesh.vertices[tri]
    M = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=1)
    rhs = np.stack([u[tri[:, 1]] - u[tri[:, 0]], u[tri[:, 2]] - u[tri[:, 0]]], axis=1)
    return np.linalg.solve(M, rhs[..., None])[..., 0]


def verify_energy_decrease(
    u: np.ndarray, u_new: np.ndarray, patch: SurgeryPatch, fss: Lagrangian, g: np.ndarray, mesh: Mesh,
    tol: float = 1e-10,
) -> EnergyDecrease:
    T = _touched(mesh, patch.E)
    areas = mesh.triangle_areas[T]
    c1 = float(areas @ (fss(_triangle_grads(mesh, u_new, T)) - fss(_triangle_grads(mesh, u, T))))
    m = mesh.lumped_mass
    c2 = float(patch.sign * np.sum(m[patch.E] * g[patch.E] * (u[patch.E] - u_new[patch.E])))
    area_E = float(m[patch.E].sum())
    return EnergyDecrease(
        claim1=c1,
        claim2_margin=c2,
        density=area_E / (np.pi * patch.rho**2),
        density_bound=(2 * patch.delta_eff / (9 * patch.delta_prime)) ** 2,
        tolerance=tol,
    )


def _two_ring(mesh: Mesh) -> sp.csr_matrix:
    T = len(mesh.triangles)
    B = sp.csr_matrix((np.ones(3 * T), (np.repeat(np.arange(T), 3), mesh.triangles.ravel())),
                      shape=(T, mesh.n_vertices))
    A = (B @ B.T).astype(bool).astype(np.int32)
    return (A @ A).astype(bool).tocsr()


def density_points(ring: sp.csr_matrix, offending_in: np.ndarray) -> np.ndarray:
    """Triangles whose whole 2-ring lies inside the same component (labels >= 0)."""
    out = np.zeros(len(offending_in), dtype=bool)
    cand = np.flatnonzero(offending_in >= 0)
    for t in cand:
        nb = ring.indices[ring.indptr[t] : ring.indptr[t + 1]]
        out[t] = np.all(offending_in[nb] == offending_in[t])
    return out


@dataclass
class RepairReport:
    u: np.ndarray
    patches: list
    checks: list
    passes: list  # per pass: offending area fraction before, patches accepted
    offending_fraction_initial: float
    offending_fraction: float
    energy_before: float
    energy_after: float
    energy_true_after: float
    energy_true_after_outside: float
    energy_relaxed_after_outside: float
    tol_area: float
    tol_energy: float

    @property
    def passed(self) -> bool:
        return (
            self.offending_fraction <= self.tol_area
            and self.energy_after <= self.energy_before + self.tol_energy
            and all(c.claim2_margin > 0 for c in self.checks)
        )

    def to_dict(self) -> dict:
        dens_ok = all(c.density >= c.density_bound - 0.05 for c in self.checks)
        return {
            "n_patches": len(self.patches),
            "passes": self.passes,
            "offending_fraction_initial": self.offending_fraction_initial,
            "offending_fraction": self.offending_fraction,
            "relaxed_energy_before": self.energy_before,
            "relaxed_energy_after": self.energy_after,
            "true_energy_after": self.energy_true_after,
            "true_minus_relaxed_outside_offending": self.energy_true_after_outside - self.energy_relaxed_after_outside,
            "min_claim2_margin": min((c.claim2_margin for c in self.checks), default=None),
            "max_claim1": max((c.claim1 for c in self.checks), default=None),
            "density_ok": dens_ok,
            "tol_area": self.tol_area,
            "tol_energy": self.tol_energy,
            "pass": self.passed,
        }


def _energy(mesh: Mesh, G, f: Lagrangian, g: np.ndarray, u: np.ndarray, mask: np.ndarray | None = None) -> float:
    grads = (G @ u).reshape(-1, 2)
    a = mesh.triangle_areas
    dens = f(grads)
    lin = float(mesh.lumped_mass @ (g * u))
    if mask is not None:
        return float(a[mask] @ dens[mask])
    return float(a @ dens) + lin


def vitali_repair(
    u: np.ndarray,
    f: Lagrangian,
    fss: Lagrangian,
    comps: list[NonconvexSet],
    g: np.ndarray,
    mesh: Mesh,
    tol_area: float = 0.01,
    tol_energy: float = 1e-6,
    max_passes: int = 200,
    rho_min: float | None = None,
) -> RepairReport:
    """Greedy passes of disjoint pyramidal patches until the offending area fraction is at most tol_area."""
    g = np.broadcast_to(np.asarray(g, dtype=float), (mesh.n_vertices,))
    if np.all(g >= 0) and np.any(g > 0):
        sign = 1
    elif np.all(g <= 0) and np.any(g < 0):
        sign = -1
    else:
        raise ValueError("repair needs g of one sign, not identically zero")
    G = gradient_operator(mesh)
    areas = mesh.triangle_areas
    total = float(areas.sum())
    tree = cKDTree(mesh.vertices)
    bary_tree = cKDTree(mesh.barycenters)
    bary_dist = mesh.distance_to_boundary(mesh.barycenters)
    ring = _two_ring(mesh) if comps else None
    cur = np.array(u, dtype=float)
    locked = np.zeros(mesh.n_vertices, dtype=bool)
    patches: list[SurgeryPatch] = []
    checks: list[EnergyDecrease] = []
    passes = []
    E0 = _energy(mesh, G, fss, g, cur)

    def offending_labels(grads):
        lab = -np.ones(len(grads), dtype=int)
        for S in comps:
            lab[S.contains(grads)] = S.index
        return lab

    grads = (G @ cur).reshape(-1, 2)
    lab = offending_labels(grads)
    frac0 = float(areas[lab >= 0].sum() / total)
    frac = frac0
    for _ in range(max_passes if comps else 0):
        if passes and frac <= tol_area:
            break
        dens = density_points(ring, lab)
        locked[:] = False
        centers: list[tuple[np.ndarray, float]] = []
        accepted = 0
        cand = np.flatnonzero(dens)
        depth = np.array([comps[lab[t]].signed_depth(grads[t][None])[0] for t in cand])
        # deepest first: those admit the largest balls, as in a Vitali selection
        for t in cand[np.lexsort((cand, -depth))]:
            xb = mesh.barycenters[t]
            room = np.inf
            for c, r in centers:
                room = min(room, float(np.linalg.norm(xb - c)) - r)
            patch = build_patch(cur, grads, int(t), comps[lab[t]], sign, mesh, rho_max=room, rho_min=rho_min,
                                locked=locked, tree=tree, dist=float(bary_dist[t]))
            if patch is None:
                continue
            new = apply_patch(cur, patch)
            chk = verify_energy_decrease(cur, new, patch, fss, g, mesh)
            if not chk.passed:
                continue
            # a patch too small to cover whole triangles lowers the energy but repairs nothing
            T = _touched(mesh, patch.E)
            before = areas[T] @ (lab[T] >= 0)
            after = areas[T] @ offending_mask(_triangle_grads(mesh, new, T), comps)
            if after >= before:
                continue
            cur = new
            locked[patch.E] = True
            centers.append((patch.center, patch.rho))
            patches.append(patch)
            checks.append(chk)
            accepted += 1
        grads = (G @ cur).reshape(-1, 2)
        lab = offending_labels(grads)
        passes.append({"offending_before": frac, "accepted": accepted,
                       "offending_after": float(areas[lab >= 0].sum() / total)})
        frac = passes[-1]["offending_after"]
        log.info("repair pass %d: %d patches, offending %.4f", len(passes), accepted, frac)
        if accepted == 0:
            break
    outside = lab < 0
    return RepairReport(
        u=cur,
        patches=patches,
        checks=checks,
        passes=passes,
        offending_fraction_initial=frac0,
        offending_fraction=frac,
        energy_before=E0,
        energy_after=_energy(mesh, G, fss, g, cur),
        energy_true_after=_energy(mesh, G, f, g, cur),
        energy_true_after_outside=_energy(mesh, G, f, g, cur, outside),
        energy_relaxed_after_outside=_energy(mesh, G, fss, g, cur, outside),
        tol_area=tol_area,
        tol_energy=tol_energy,
    )


def write_patches(path: str | Path, patches: list[SurgeryPatch], checks: list[EnergyDecrease]) -> None:
    with open(path, "w") as fh:
        for p, c in zip(patches, checks):
            fh.write(json.dumps({**p.to_dict(), **c.to_dict()}, sort_keys=True) + "\n")
