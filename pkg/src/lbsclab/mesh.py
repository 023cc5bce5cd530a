"""Planar meshes of convex domains plus the boundary certificates used downstream.

Boundary vertices always come first in the vertex array and are stored in
counterclockwise order, so ``boundary_loop`` is simply ``arange(n_boundary)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay, cKDTree

__all__ = [
    "DomainSpec",
    "Mesh",
    "UniformConvexityReport",
    "LBSCReport",
    "triangulate",
    "check_uniform_convexity",
    "check_lbsc",
    "distance_field",
    "distance_to_polyline",
    "min_norm_slope",
]


@dataclass(frozen=True)
class DomainSpec:
    kind: str  # "disc" | "ellipse" | "polygon"
    h: float
    center: tuple[float, float] = (0.0, 0.0)
    radius: float | None = None
    semiaxes: tuple[float, float] | None = None
    angle: float = 0.0  # ellipse rotation
    vertices: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"mesh size h must be positive, got {self.h}")
        if self.kind == "disc":
            if self.radius is None or not self.radius > 0:
                raise ValueError(f"disc radius must be positive, got {self.radius}")
        elif self.kind == "ellipse":
            if self.semiaxes is None or min(self.semiaxes) <= 0:
                raise ValueError(f"ellipse semiaxes must be positive, got {self.semiaxes}")
        elif self.kind == "polygon":
            if self.vertices is None or len(self.vertices) < 3:
                raise ValueError("polygon needs at least 3 vertices")
            v = np.asarray(self.vertices, dtype=float)
            e = np.roll(v, -1, axis=0) - v
            cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
            if np.any(cross <= 0):
                raise ValueError(
                    "polygon must be counterclockwise and strictly convex "
                    f"(edge cross products {np.round(cross, 12).tolist()})"
                )
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def disc(cls, center=(0.0, 0.0), radius=1.0, h=0.1) -> "DomainSpec":
        return cls("disc", h=h, center=tuple(center), radius=float(radius))

    @classmethod
    def ellipse(cls, center=(0.0, 0.0), semiaxes=(1.0, 0.5), h=0.1, angle=0.0) -> "DomainSpec":
        return cls("ellipse", h=h, center=tuple(center), semiaxes=tuple(semiaxes), angle=angle)

    @classmethod
    def polygon(cls, vertices: Sequence[Sequence[float]], h=0.1) -> "DomainSpec":
        return cls("polygon", h=h, vertices=tuple(tuple(map(float, p)) for p in vertices))

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        kind = d["kind"]
        h = float(d["h"])
        if kind == "disc":
            return cls.disc(d.get("center", (0.0, 0.0)), d["radius"], h)
        if kind == "ellipse":
            return cls.ellipse(d.get("center", (0.0, 0.0)), d["semiaxes"], h, d.get("angle", 0.0))
        if kind == "polygon":
            return cls.polygon(d["vertices"], h)
        raise ValueError(f"unknown domain kind {kind!r}")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "h": self.h}
        if self.kind == "disc":
            out.update(center=list(self.center), radius=self.radius)
        elif self.kind == "ellipse":
            out.update(center=list(self.center), semiaxes=list(self.semiaxes), angle=self.angle)
        else:
            out.update(vertices=[list(p) for p in self.vertices])
        return out

    def boundary_points(self) -> np.ndarray:
        """Counterclockwise points exactly on the boundary, spacing at most h."""
        h = self.h
        if self.kind == "disc":
            n = max(8, math.ceil(2 * math.pi * self.radius / h))
            t = 2 * math.pi * np.arange(n) / n
            return np.asarray(self.center) + self.radius * np.c_[np.cos(t), np.sin(t)]
        if self.kind == "ellipse":
            a, b = self.semiaxes
            s = np.linspace(0.0, 2 * math.pi, 20001)
            speed = np.hypot(a * np.sin(s), b * np.cos(s))
            arclen = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(s))])
            n = max(8, math.ceil(arclen[-1] / h))
            t = np.interp(np.arange(n) * arclen[-1] / n, arclen, s)
            local = np.c_[a * np.cos(t), b * np.sin(t)]
            c, sn = math.cos(self.angle), math.sin(self.angle)
            return np.asarray(self.center) + local @ np.array([[c, sn], [-sn, c]])
        v = np.asarray(self.vertices, dtype=float)
        pts = []
        for p, q in zip(v, np.roll(v, -1, axis=0)):
            k = max(1, math.ceil(np.linalg.norm(q - p) / h))
            pts.append(p + (q - p) * (np.arange(k) / k)[:, None])
        return np.vstack(pts)


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    n_boundary: int
    dist: np.ndarray
    diam: float
    area: float
    h: float
    spec: DomainSpec | None = None
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    @property
    def boundary_loop(self) -> np.ndarray:
        return np.arange(self.n_boundary)

    @property
    def boundary_vertices(self) -> frozenset[int]:
        return frozenset(range(self.n_boundary))

    @property
    def boundary_points(self) -> np.ndarray:
        return self.vertices[: self.n_boundary]

    @property
    def is_boundary(self) -> np.ndarray:
        mask = np.zeros(len(self.vertices), dtype=bool)
        mask[: self.n_boundary] = True
        return mask

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def lumped_mass(self) -> np.ndarray:
        m = np.zeros(self.n_vertices)
        np.add.at(m, self.triangles.ravel(), np.repeat(self.triangle_areas / 3.0, 3))
        return m

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def distance_to_boundary(self, points: np.ndarray) -> np.ndarray:
        return distance_to_polyline(np.asarray(points, dtype=float), self.boundary_points)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Triangle index and barycentric weights for each query point (-1 if outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tree = self._tree
        if tree is None:
            tree = cKDTree(self.barycenters)
            object.__setattr__(self, "_tree", tree)
        k = min(16, len(self.triangles))
        _, cand = tree.query(points, k=k)
        cand = np.atleast_2d(cand)
        tri = np.full(len(points), -1)
        bary = np.zeros((len(points), 3))
        for j in range(k):
            todo = tri < 0
            if not todo.any():
                break
            w = self._barycentric(points[todo], cand[todo, j])
            ok = np.all(w >= -1e-10, axis=1)
            idx = np.flatnonzero(todo)[ok]
            tri[idx] = cand[todo, j][ok]
            bary[idx] = w[ok]
        for i in np.flatnonzero(tri < 0):  # brute-force fallback
            w = self._barycentric(np.repeat(points[i : i + 1], len(self.triangles), 0), np.arange(len(self.triangles)))
            best = np.argmax(w.min(axis=1))
            if w[best].min() >= -1e-9:
                tri[i], bary[i] = best, w[best]
        return tri, bary

    def _barycentric(self, pts: np.ndarray, tris: np.ndarray) -> np.ndarray:
        p = self.vertices[self.triangles[tris]]
        v0, v1, v2 = p[:, 0], p[:, 1], p[:, 2]
        det = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])
        l1 = ((pts[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (pts[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])) / det
        l2 = ((v1[:, 0] - v0[:, 0]) * (pts[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (pts[:, 0] - v0[:, 0])) / det
        return np.c_[1 - l1 - l2, l1, l2]

    def interpolate(self, u: np.ndarray, points: np.ndarray) -> np.ndarray:
        tri, w = self.locate(points)
        if np.any(tri < 0):
            raise ValueError("interpolation point outside the mesh")
        return np.einsum("ij,ij->i", w, u[self.triangles[tri]])

    def to_csv(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "mesh.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "x", "y", "boundary", "dist"])
            for i, (p, d) in enumerate(zip(self.vertices, self.dist)):
                w.writerow([i, repr(float(p[0])), repr(float(p[1])), int(i < self.n_boundary), repr(float(d))])
        with open(directory / "mesh_triangles.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "v0", "v1", "v2"])
            for i, t in enumerate(self.triangles):
                w.writerow([i, *map(int, t)])


def distance_to_polyline(points: np.ndarray, loop: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact distance from each point to the closed polyline through ``loop``."""
    a = loop
    b = np.roll(loop, -1, axis=0)
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        t = np.clip(np.einsum("pij,ij->pi", p - a, ab) / ab2, 0.0, 1.0)
        proj = a + t[..., None] * ab
        out[s : s + chunk] = np.sqrt(np.min(np.sum((p - proj) ** 2, axis=-1), axis=1))
    return out


def _inside_convex(points: np.ndarray, loop: np.ndarray) -> np.ndarray:
    a = loop
    e = np.roll(loop, -1, axis=0) - a
    rel = points[:, None, :] - a[None]
    cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
    return np.all(cross > 0, axis=1)


def triangulate(spec: DomainSpec) -> Mesh:
    """Boundary-conforming Delaunay mesh: boundary samples plus a hexagonal interior lattice."""
    h = spec.h
    bnd = spec.boundary_points()
    lo, hi = bnd.min(axis=0), bnd.max(axis=0)
    center = bnd.mean(axis=0)
    dy = h * math.sqrt(3) / 2
    rows = np.arange(math.floor((lo[1] - center[1]) / dy) - 1, math.ceil((hi[1] - center[1]) / dy) + 2)
    cols = np.arange(math.floor((lo[0] - center[0]) / h) - 1, math.ceil((hi[0] - center[0]) / h) + 2)
    jj, ii = np.meshgrid(rows, cols, indexing="ij")
    lattice = np.c_[(center[0] + ii * h + 0.5 * h * (jj % 2)).ravel(), (center[1] + jj * dy).ravel()]
    lattice = lattice[_inside_convex(lattice, bnd)]
    lattice = lattice[distance_to_polyline(lattice, bnd) > 0.45 * h]
    pts = np.vstack([bnd, lattice])

    # split over-long interior edges near the boundary until every edge is <= 1.5 h
    for _ in range(10):
        tri = Delaunay(pts).simplices.astype(np.int64)
        e = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        long = np.linalg.norm(pts[e[:, 0]] - pts[e[:, 1]], axis=1) > 1.5 * h
        if not long.any():
            break
        pts = np.vstack([pts, 0.5 * (pts[e[long, 0]] + pts[e[long, 1]])])
    p = pts[tri]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    flip = area2 < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    tri = tri[np.abs(area2) > 1e-12 * h * h]

    dist = distance_to_polyline(pts, bnd)
    dist[: len(bnd)] = 0.0
    diff = bnd[:, None, :] - bnd[None, :, :]
    diam = float(np.sqrt(np.max(np.einsum("ijk,ijk->ij", diff, diff))))
    mesh = Mesh(
        vertices=pts,
        triangles=tri,
        n_boundary=len(bnd),
        dist=dist,
        diam=diam,
        area=0.0,
        h=h,
        spec=spec,
    )
    object.__setattr__(mesh, "area", float(np.sum(mesh.triangle_areas)))
    _freeze(mesh.vertices, mesh.triangles, mesh.dist)
    return mesh


def distance_field(mesh: Mesh) -> np.ndarray:
    d = distance_to_polyline(mesh.vertices, mesh.boundary_points)
    d[: mesh.n_boundary] = 0.0
    return d


def _inward_normals(loop: np.ndarray) -> np.ndarray:
    e_next = np.roll(loop, -1, axis=0) - loop
    e_prev = loop - np.roll(loop, 1, axis=0)

    def unit_normal(e):
        n = np.c_[-e[:, 1], e[:, 0]]
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    b = unit_normal(e_next) + unit_normal(e_prev)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _sample_indices(n: int, n_samples: int | None) -> np.ndarray:
    if n_samples is None or n_samples >= n:
        return np.arange(n)
    return np.unique(np.floor(np.arange(n_samples) * n / n_samples).astype(int))


@dataclass(frozen=True)
class UniformConvexityReport:
    R: float
    samples: np.ndarray
    witnesses: np.ndarray
    worst_margin: float
    worst_pair: tuple[int, int]
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "R": self.R,
            "n_samples": int(len(self.samples)),
            "worst_margin": self.worst_margin,
            "worst_pair": list(self.worst_pair),
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def check_uniform_convexity(
    mesh: Mesh, R: float, n_samples: int = 256, tol: float | None = None
) -> UniformConvexityReport:
    if n_samples < 8:
        raise ValueError("need at least 8 boundary samples")
    loop = mesh.boundary_points
    normals = _inward_normals(loop)
    idx = _sample_indices(len(loop), n_samples)
    g, b = loop[idx], normals[idx]
    diff = g[None, :, :] - g[:, None, :]  # diff[i, j] = g_j - g_i
    margin = R * np.einsum("ik,ijk->ij", b, diff) - 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(margin, np.inf)
    i, j = np.unravel_index(np.argmin(margin), margin.shape)
    worst = float(margin[i, j])
    tol = 1e-9 * mesh.diam**2 if tol is None else tol
    return UniformConvexityReport(
        R=float(R),
        samples=idx,
        witnesses=b,
        worst_margin=worst,
        worst_pair=(int(idx[i]), int(idx[j])),
        tolerance=tol,
        passed=worst >= -tol,
    )


def min_norm_slope(d: np.ndarray, c: np.ndarray, tol: float = 1e-12, seed: int = 0) -> np.ndarray | None:
    """Smallest-norm z with ``d @ z <= c`` (rows of d unit length), or None if infeasible.

    Randomized incremental algorithm for a 2-variable convex program: when a
    constraint is violated the new optimum lies on its line, which reduces to
    clipping a scalar into an interval.
    """
    m = len(c)
    order = np.random.default_rng(seed).permutation(m)
    d, c = d[order], c[order]
    z = np.zeros(2)
    i = 0
    while i < m:
        bad = np.flatnonzero(d[i:] @ z - c[i:] > tol)
        if bad.size == 0:
            break
        k = i + int(bad[0])
        n = d[k]
        p = c[k] * n
        e = np.array([-n[1], n[0]])
        a = d[:k] @ e
        rhs = c[:k] - d[:k] @ p
        par = np.abs(a) < 1e-14
        if np.any(rhs[par] < -tol):
            return None
        pos, neg = a > 1e-14, a < -1e-14
        hi = np.min(rhs[pos] / a[pos]) if pos.any() else np.inf
        lo = np.max(rhs[neg] / a[neg]) if neg.any() else -np.inf
        if lo > hi + tol:
            return None
        t = min(max(0.0, lo), hi) if lo <= hi else 0.5 * (lo + hi)
        z = p + t * e
        i = k + 1
    return z


@dataclass(frozen=True)
class LBSCReport:
    M: float
    samples: np.ndarray
    slopes: np.ndarray  # one row per sample, |z| <= M
    min_norms: np.ndarray  # per-sample minimal slope norm (inf if infeasible)
    worst_violation: float
    minimal_rank: float | str
    offending: int | None
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "n_samples": int(len(self.samples)),
            "worst_violation": self.worst_violation,
            "minimal_rank": self.minimal_rank,
            "offending_boundary_index": self.offending,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def check_lbsc(
    mesh: Mesh, phi: np.ndarray, M: float, tol: float = 1e-9, n_samples: int | None = None
) -> LBSCReport:
    """Lower bounded slope condition of rank M for boundary data ``phi``.

    Every boundary vertex acts as a constraint; ``n_samples`` restricts the
    points at which a supporting slope is sought.
    """
    loop = mesh.boundary_points
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (len(loop),):
        raise ValueError(f"phi must have one value per boundary vertex ({len(loop)})")
    idx = _sample_indices(len(loop), n_samples)
    slopes = np.zeros((len(idx), 2))
    norms = np.zeros(len(idx))
    scale = max(1.0, float(np.max(np.abs(phi))))
    for s, i in enumerate(idx):
        d = np.delete(loop - loop[i], i, axis=0)
        c = np.delete(phi - phi[i], i)
        ln = np.linalg.norm(d, axis=1)
        z = min_norm_slope(d / ln[:, None], c / ln, tol=1e-13 * scale)
        if z is None:
            norms[s] = np.inf
            continue
        nz = float(np.linalg.norm(z))
        norms[s] = nz
        slopes[s] = z if nz <= M else z * (M / nz)
    diff = loop[None, :, :] - loop[idx][:, None, :]
    viol = phi[idx][:, None] + np.einsum("ik,ijk->ij", slopes, diff) - phi[None, :]
    worst = float(np.max(viol))
    finite = np.isfinite(norms)
    minimal = float(np.max(norms)) if finite.all() else "infeasible"
    worst_sample = int(np.argmax(norms))
    offending = int(idx[worst_sample]) if not finite.all() or norms[worst_sample] > M else None
    passed = bool(finite.all() and worst <= tol)
    return LBSCReport(
        M=float(M),
        samples=idx,
        slopes=slopes,
        min_norms=norms,
        worst_violation=worst if finite.all() else float("inf"),
        minimal_rank=minimal,
        offending=offending,
        tolerance=tol,
        passed=passed,
    )
