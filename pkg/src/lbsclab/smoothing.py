"""Smooth approximations f_k <= f, the regularized integrands h_k and mollified loads g_k."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial import cKDTree

from .lagrangian import Lagrangian, RadialProfile, legendre_1d, radial
from .mesh import Mesh

__all__ = ["SmoothingSchedule", "smooth_lagrangian", "regularize", "smooth_g", "moreau_profile", "convexity_defect"]


@dataclass(frozen=True)
class SmoothingSchedule:
    ks: tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256)
    sigma_ratio: float = 0.1
    t_max: float = 8.0
    deltas: tuple[float, ...] | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])) or min(self.ks) <= 0:
            raise ValueError("k values must be positive and increasing")

    def mu(self, k: int) -> float:
        return 1.0 / k

    def sigma(self, k: int) -> float:
        return self.sigma_ratio * self.mu(k)

    def build(self, f: Lagrangian) -> tuple[list[Lagrangian], "SmoothingSchedule"]:
        """Smooth f for every k; returns the f_k and a copy of the schedule with measured bands."""
        fks = [smooth_lagrangian(f, k, self.t_max, sigma=self.sigma(k)) for k in self.ks]
        return fks, replace(self, deltas=tuple(fk.params["delta"] for fk in fks))

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "mu": [self.mu(k) for k in self.ks],
            "sigma": [self.sigma(k) for k in self.ks],
            "t_max": self.t_max,
            "deltas": None if self.deltas is None else list(self.deltas),
        }


def convexity_defect(F: np.ndarray, ds: float) -> float:
    """Most negative second difference of an even profile, scaled to a curvature."""
    even = np.concatenate([F[:0:-1], F])
    return float(min(0.0, np.min(np.diff(even, 2)) / ds**2))


def moreau_profile(F: np.ndarray, s: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Moreau envelope of the even extension of a sampled profile and its derivative.

    Computed through a 1-D discrete Legendre transform, e(t) = t^2/2mu - max_s (ts/mu - F(s) - s^2/2mu).
    """
    ss = np.concatenate([-s[:0:-1], s])
    FF = np.concatenate([F[:0:-1], F])
    val, idx = legendre_1d(ss, FF + ss**2 / (2 * mu), s / mu)
    env = s**2 / (2 * mu) - val
    prox = ss[idx]
    return env, (s - prox) / mu


def _piecewise_quadratic(t: np.ndarray, d: np.ndarray, curv_tail: float):
    """Profile with piecewise-linear derivative d on grid t, F(0) = 0 by construction."""
    ds = t[1] - t[0]
    vals = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * ds)])
    T = t[-1]

    def dF(x):
        x = np.asarray(x, dtype=float)
        inside = np.interp(x, t, d)
        return np.where(x <= T, inside, d[-1] + curv_tail * (x - T))

    def F(x):
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, 0.0, T)
        i = np.minimum((xc / ds).astype(int), len(t) - 2)
        u = xc - t[i]
        slope = (d[i + 1] - d[i]) / ds
        inside = vals[i] + d[i] * u + 0.5 * slope * u**2
        over = x - T
        tail = vals[-1] + d[-1] * over + 0.5 * curv_tail * over**2
        return np.where(x <= T, inside, tail)

    return F, dF


def smooth_lagrangian(
    f: Lagrangian, k: int, t_max: float = 8.0, sigma: float | None = None, tol: float = 1e-6
) -> Lagrangian:
    """Moreau envelope (mu = 1/k) then Gaussian mollification, on the radial profile of f.

    Rejects f whose profile is not convex on [0, t_max]; pass the convexification instead.
    """
    if f.profile is None:
        raise ValueError(f"smoothing needs a radial Lagrangian, got {f.name!r}")
    mu = 1.0 / k
    sigma = 0.1 * mu if sigma is None else sigma
    ds = sigma / 10
    pad = 8 * sigma + 2 * mu
    n = int(np.ceil((t_max + pad) / ds)) + 1
    s = np.arange(n) * ds
    F0 = f.profile.F(s)
    scale = 1.0 + np.max(np.abs(F0[s <= t_max]))
    if convexity_defect(F0[s <= t_max], ds) < -tol * scale:
        raise ValueError(f"{f.name!r} is not convex on the working box; smooth its convexification")

    _, de = moreau_profile(F0, s, mu)
    dd = np.concatenate([-de[:0:-1], de])
    dd = gaussian_filter1d(dd, sigma / ds, mode="nearest", truncate=6.0)[n - 1 :]
    keep = s <= t_max + 2 * sigma
    t, d = s[keep], dd[keep]
    curv = max((d[-1] - d[-2]) / ds, 0.0)
    F, dF = _piecewise_quadratic(t, d, curv)

    probe = s[s <= t_max]
    diff = F0[s <= t_max] - F(probe)
    params = dict(f.params)
    params.update(
        k=k, mu=mu, sigma=sigma, delta=float(max(diff.max(), 0.0)), upper_violation=float(max(-diff.min(), 0.0)),
        t_max=t_max,
    )
    return radial(f"{f.name}_k{k}", F, dF, r=f.r, eps=f.eps / 4, p_growth=f.p_growth, params=params)


def regularize(fk: Lagrangian, k: int) -> Lagrangian:
    """h_k = f_k + |xi|^2 / k."""
    c = 1.0 / k
    prof = None
    if fk.profile is not None:
        P = fk.profile
        prof = RadialProfile(lambda t: P.F(t) + c * t**2, lambda t: P.dF(t) + 2 * c * t)

    def ev(xi):
        return fk.eval(xi) + c * np.sum(xi**2, axis=-1)

    gr = None
    if fk.grad is not None:
        def gr(xi):
            return fk.grad(xi) + 2 * c * xi

    params = dict(fk.params)
    params["reg"] = c
    return Lagrangian(f"{fk.name}+reg", ev, gr, r=fk.r, eps=max(fk.eps, 2 * c), p_growth=fk.p_growth,
                      profile=prof, params=params)


def smooth_g(g: np.ndarray, k: int, mesh: Mesh, width: float | None = None) -> np.ndarray:
    """Mass-weighted average over a compact kernel of radius 1/k, clamped to ||g|| + 1."""
    g = np.asarray(g, dtype=float)
    w = 1.0 / k if width is None else width
    bound = np.max(np.abs(g)) + 1.0
    tree = cKDTree(mesh.vertices)
    nbrs = tree.query_ball_point(mesh.vertices, w)
    m = mesh.lumped_mass
    out = np.empty_like(g)
    for i, nb in enumerate(nbrs):
        nb = np.asarray(nb)
        r2 = np.sum((mesh.vertices[nb] - mesh.vertices[i]) ** 2, axis=1) / w**2
        wt = np.clip(1.0 - r2, 0.0, None) ** 3 * m[nb]
        out[i] = wt @ g[nb] / wt.sum()
    return np.clip(out, -bound, bound)
