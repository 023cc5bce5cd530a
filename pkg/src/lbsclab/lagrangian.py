"""Lagrangians f(xi), their sampled conjugates and the structural hypothesis checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import qmc

__all__ = [
    "Lagrangian",
    "RadialProfile",
    "Box",
    "ConjugateGrid",
    "ConvexityReport",
    "radial",
    "catalog",
    "make_lagrangian",
    "tabulated",
    "radial_convexification",
    "legendre_1d",
    "legendre_grid",
    "conjugate",
    "conjugate_bruteforce",
    "biconjugate",
    "check_hypotheses",
]


@dataclass(frozen=True)
class RadialProfile:
    """f(xi) = F(|xi|) with F even, F(0) = min."""

    F: Callable[[np.ndarray], np.ndarray]
    dF: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Lagrangian:
    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    r: float = 0.0
    eps: float = 0.0
    p_growth: tuple[float, float] | None = None
    profile: RadialProfile | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, xi) -> np.ndarray:
        return self.eval(np.asarray(xi, dtype=float))

    @property
    def meta(self) -> dict:
        return {"name": self.name, "r": self.r, "eps": self.eps, "p_growth": self.p_growth, **self.params}


def radial(name: str, F, dF, **kw) -> Lagrangian:
    def ev(xi):
        return F(np.linalg.norm(xi, axis=-1))

    def gr(xi):
        t = np.linalg.norm(xi, axis=-1)
        scale = np.where(t > 0, dF(t) / np.where(t > 0, t, 1.0), 0.0)
        return xi * scale[..., None]

    return Lagrangian(name, ev, gr, profile=RadialProfile(F, dF), **kw)


def _quadratic() -> Lagrangian:
    return radial("quadratic", lambda t: 0.5 * t**2, lambda t: t, r=0.0, eps=1.0, p_growth=(0.5, 2.0))


def _torsion() -> Lagrangian:
    # (F3) holds literally (one point outside the ball) with r = 1 only for eps <= 1/4;
    # eps = 1 holds when both points lie outside the unit ball.
    return radial(
        "torsion",
        lambda t: np.where(t <= 1.0, t, 0.5 * t**2 + 0.5),
        lambda t: np.where(t <= 1.0, 1.0, t),
        r=1.0,
        eps=0.25,
        p_growth=(0.5, 2.0),
    )


def _pnorm(c: float = 1.0, p: float = 3.0) -> Lagrangian:
    if c <= 0 or p <= 1:
        raise ValueError("pnorm needs c > 0 and p > 1")
    eps = c if p >= 2 else 0.0
    return radial(
        "pnorm",
        lambda t: c * t**p,
        lambda t: c * p * t ** (p - 1),
        r=1.0,
        eps=eps,
        p_growth=(c, p),
        params={"c": c, "p": p},
    )


def _double_well() -> Lagrangian:
    return radial(
        "double_well",
        lambda t: (t**2 - 1.0) ** 2,
        lambda t: 4.0 * t * (t**2 - 1.0),
        r=1.0,
        eps=0.25,
    )


def _euclidean() -> Lagrangian:
    return radial("euclidean", lambda t: t, lambda t: np.ones_like(t), r=0.0, eps=0.0)


def _two_well(a=(1.0, 0.0)) -> Lagrangian:
    a = np.asarray(a, dtype=float)

    def ev(xi):
        return np.minimum(np.sum((xi - a) ** 2, axis=-1), np.sum((xi + a) ** 2, axis=-1))

    def gr(xi):
        d1, d2 = xi - a, xi + a
        use1 = np.sum(d1**2, axis=-1) <= np.sum(d2**2, axis=-1)
        return 2 * np.where(use1[..., None], d1, d2)

    return Lagrangian("two_well", ev, gr, r=float(np.linalg.norm(a)), eps=2.0, params={"a": a.tolist()})


def tabulated(t: np.ndarray, values: np.ndarray, name: str = "tabulated", **kw) -> Lagrangian:
    """Radial Lagrangian from samples of its profile; linear between and beyond samples."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("profile abscissae must start at 0 and increase")
    slope = np.diff(v) / np.diff(t)

    def F(s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= t[-1], np.interp(s, t, v), v[-1] + slope[-1] * (s - t[-1]))

    def dF(s):
        s = np.asarray(s, dtype=float)
        k = np.clip(np.searchsorted(t, s, side="right") - 1, 0, len(slope) - 1)
        return slope[k]

    return radial(name, F, dF, **kw)


def load_tabulated(path: str | Path, **kw) -> Lagrangian:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    data = np.array([[float(a), float(b)] for a, b, *_ in rows])
    return tabulated(data[:, 0], data[:, 1], name=Path(path).stem, **kw)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


_CATALOG: dict[str, tuple[Callable[..., Lagrangian], str]] = {
    "quadratic": (_quadratic, "1/2 |xi|^2, uniformly convex, eps=1"),
    "torsion": (_torsion, "|xi| inside the unit ball, 1/2|xi|^2 + 1/2 outside (thin torsion rods)"),
    "pnorm": (_pnorm, "c |xi|^p, parameters c, p"),
    "double_well": (_double_well, "(|xi|^2 - 1)^2, nonconvex; relaxation vanishes on the unit disc"),
    "euclidean": (_euclidean, "|xi|, convex but not superlinear"),
    "two_well": (_two_well, "min(|xi-a|^2, |xi+a|^2), nonconvex slab relaxation"),
    "tabulated": (load_tabulated, "radial profile read from a CSV of (t, F(t)) samples"),
}


def catalog() -> dict[str, str]:
    return {k: v[1] for k, v in sorted(_CATALOG.items())}


def make_lagrangian(name: str, **params) -> Lagrangian:
    try:
        factory = _CATALOG[name][0]
    except KeyError:
        raise KeyError(f"unknown Lagrangian {name!r}; known: {sorted(_CATALOG)}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# Legendre-Fenchel transform on grids


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float]
    hi: tuple[float, float]
    step: float

    @classmethod
    def square(cls, half_width: float, step: float) -> "Box":
        return cls((-half_width, -half_width), (half_width, half_width), step)

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for lo, hi in zip(self.lo, self.hi):
            n = int(round((hi - lo) / self.step)) + 1
            out.append(np.linspace(lo, hi, n))
        return out[0], out[1]

    def points(self) -> np.ndarray:
        a, b = self.axes
        return np.stack(np.meshgrid(a, b, indexing="ij"), axis=-1)


def _lower_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    hull: list[int] = []
    for i in range(len(x)):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            # drop i1 if it lies on or above the chord i0 -> i
            if (y[i1] - y[i0]) * (x[i] - x[i0]) >= (y[i] - y[i0]) * (x[i1] - x[i0]):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.asarray(hull)


def legendre_1d(x: np.ndarray, y: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """max_i (s x_i - y_i) for every slope s, in O(len(x) + len(s) log len(x)).

    Returns the values and the maximizing sample index.
    """
    hull = _lower_hull(x, y)
    if len(hull) == 1:
        k = np.zeros(len(s), dtype=int)
    else:
        slopes = np.diff(y[hull]) / np.diff(x[hull])
        k = np.searchsorted(slopes, s, side="left")
    idx = hull[k]
    return s * x[idx] - y[idx], idx


def legendre_grid(
    axes_in: tuple[np.ndarray, np.ndarray], values: np.ndarray, axes_out: tuple[np.ndarray, np.ndarray]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Discrete conjugate of a product-grid function, one axis at a time.

    Returns (values, argmax index along axis 0, argmax index along axis 1).
    """
    x1, x2 = axes_in
    s1, s2 = axes_out
    g = np.empty((len(x1), len(s2)))
    j_star = np.empty((len(x1), len(s2)), dtype=int)
    for i in range(len(x1)):
        g[i], j_star[i] = legendre_1d(x2, values[i], s2)
    out = np.empty((len(s1), len(s2)))
    i_star = np.empty((len(s1), len(s2)), dtype=int)
    for j in range(len(s2)):
        out[:, j], i_star[:, j] = legendre_1d(x1, -g[:, j], s1)
    j_of = j_star[i_star, np.arange(len(s2))[None, :]]
    return out, i_star, j_of


@dataclass(frozen=True)
class ConjugateGrid:
    axes: tuple[np.ndarray, np.ndarray]
    values: np.ndarray
    finite_mask: np.ndarray
    argmax: np.ndarray  # maximizing point of the source grid, shape (m1, m2, 2)

    @property
    def spacing(self) -> float:
        return float(self.axes[0][1] - self.axes[0][0])

    @property
    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def contains(self, pts: np.ndarray) -> bool:
        pts = np.asarray(pts)
        a, b = self.axes
        return bool(
            np.all(pts[..., 0] >= a[0]) and np.all(pts[..., 0] <= a[-1])
            and np.all(pts[..., 1] >= b[0]) and np.all(pts[..., 1] <= b[-1])
        )

    def __call__(self, pts) -> np.ndarray:
        """Bilinear interpolation; points outside the grid are rejected."""
        pts = np.asarray(pts, dtype=float)
        if not self.contains(pts):
            a, b = self.axes
            need = np.max(np.abs(pts.reshape(-1, 2)), axis=0)
            raise ValueError(
                f"evaluation outside the sampled box [{a[0]}, {a[-1]}] x [{b[0]}, {b[-1]}]; "
                f"need half-widths at least {need.tolist()}"
            )
        a, b = self.axes
        fa = np.clip((pts[..., 0] - a[0]) / (a[1] - a[0]), 0, len(a) - 1 - 1e-12)
        fb = np.clip((pts[..., 1] - b[0]) / (b[1] - b[0]), 0, len(b) - 1 - 1e-12)
        i, j = fa.astype(int), fb.astype(int)
        ta, tb = fa - i, fb - j
        v = self.values
        return (
            (1 - ta) * (1 - tb) * v[i, j] + ta * (1 - tb) * v[i + 1, j]
            + (1 - ta) * tb * v[i, j + 1] + ta * tb * v[i + 1, j + 1]
        )

    def to_csv(self, path: str | Path) -> None:
        pts = self.points.reshape(-1, 2)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z1", "z2", "value", "finite"])
            for p, v, m in zip(pts, self.values.ravel(), self.finite_mask.ravel()):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(v)), int(m)])


def _interior(idx: np.ndarray, n: int) -> np.ndarray:
    return (idx > 0) & (idx < n - 1)


def conjugate(f: Lagrangian, primal_box: Box, dual_box: Box) -> ConjugateGrid:
    x = primal_box.axes
    fx = f(primal_box.points())
    s = dual_box.axes
    vals, i_star, j_star = legendre_grid(x, fx, s)
    mask = _interior(i_star, len(x[0])) & _interior(j_star, len(x[1]))
    argmax = np.stack([x[0][i_star], x[1][j_star]], axis=-1)
    return ConjugateGrid(s, vals, mask, argmax)


def conjugate_bruteforce(f_values: np.ndarray, primal_axes, dual_axes, chunk: int = 64) -> np.ndarray:
    """Direct O(n_primal * n_dual) supremum; the oracle for ``legendre_grid``."""
    X = np.stack(np.meshgrid(*primal_axes, indexing="ij"), axis=-1).reshape(-1, 2)
    fv = f_values.reshape(-1)
    S = np.stack(np.meshgrid(*dual_axes, indexing="ij"), axis=-1).reshape(-1, 2)
    out = np.empty(len(S))
    for k in range(0, len(S), chunk):
        out[k : k + chunk] = np.max(S[k : k + chunk] @ X.T - fv[None, :], axis=1)
    return out.reshape(len(dual_axes[0]), len(dual_axes[1]))


@dataclass(frozen=True)
class Biconjugate(ConjugateGrid):
    fstar: ConjugateGrid | None = None
    f_values: np.ndarray | None = None


def biconjugate(f: Lagrangian, primal_box: Box, dual_box: Box) -> Biconjugate:
    """f** sampled on the primal grid, via two discrete transforms."""
    fstar = conjugate(f, primal_box, dual_box)
    x = primal_box.axes
    vals, i_star, j_star = legendre_grid(fstar.axes, fstar.values, x)
    s = fstar.axes
    mask = _interior(i_star, len(s[0])) & _interior(j_star, len(s[1]))
    argmax = np.stack([s[0][i_star], s[1][j_star]], axis=-1)
    return Biconjugate(x, vals, mask, argmax, fstar=fstar, f_values=f(primal_box.points()))


def radial_convexification(f: Lagrangian, t_max: float, n: int = 20001) -> Lagrangian:
    """f** of a radial Lagrangian: lower convex hull of the even extension of its profile."""
    if f.profile is None:
        raise ValueError("radial_convexification needs a radial Lagrangian")
    t = np.linspace(0.0, t_max, n)
    F = f.profile.F(t)
    tt = np.concatenate([-t[:0:-1], t])
    FF = np.concatenate([F[:0:-1], F])
    hull = _lower_hull(tt, FF)
    env = np.interp(tt, tt[hull], FF[hull])[n - 1 :]
    base = tabulated(t, env, name=f"{f.name}**")
    tail = t_max * 0.999

    def F2(s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= tail, base.profile.F(s), f.profile.F(s))

    def dF2(s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= tail, base.profile.dF(s), f.profile.dF(s))

    return radial(f"{f.name}**", F2, dF2, r=f.r, eps=f.eps, p_growth=f.p_growth, params=dict(f.params))


# ---------------------------------------------------------------------------
# hypothesis checks


@dataclass(frozen=True)
class ConvexityReport:
    f1_pass: bool
    f2_pass: bool
    f3_pass: bool
    f3_worst_margin: float
    f3_both_outside_pass: bool
    f3_both_outside_margin: float
    superlinear: bool
    witnesses: list = field(default_factory=list)
    tolerance: float = 0.0
    r: float = 0.0
    eps: float = 0.0

    @property
    def passed(self) -> bool:
        return self.f1_pass and self.f2_pass and self.f3_pass and self.superlinear

    def to_dict(self) -> dict:
        return {
            "f1_pass": self.f1_pass,
            "f2_pass": self.f2_pass,
            "f3_pass": self.f3_pass,
            "f3_worst_margin": self.f3_worst_margin,
            "f3_both_outside_pass": self.f3_both_outside_pass,
            "f3_both_outside_margin": self.f3_both_outside_margin,
            "superlinear": self.superlinear,
            "r": self.r,
            "eps": self.eps,
            "tolerance": self.tolerance,
            "witnesses": [[list(map(float, a)), list(map(float, b)), float(t)] for a, b, t in self.witnesses],
        }


THETAS = (0.25, 0.5, 0.75)


def f3_margins(f: Lagrangian, xi: np.ndarray, zeta: np.ndarray, eps: float) -> np.ndarray:
    """theta f(xi) + (1-theta) f(zeta) - eps/2 theta(1-theta)|xi-zeta|^2 - f(mix), per theta."""
    fx, fz = f(xi), f(zeta)
    d2 = np.sum((xi - zeta) ** 2, axis=-1)
    out = []
    for th in THETAS:
        mix = th * xi + (1 - th) * zeta
        out.append(th * fx + (1 - th) * fz - 0.5 * eps * th * (1 - th) * d2 - f(mix))
    return np.stack(out, axis=-1)


def is_superlinear(f: Lagrangian, dual_half_width: float = 2.0, primal_factor: float = 8.0, n: int = 161) -> bool:
    """finite_mask must be all true on two nested dual boxes (ratio 2)."""
    for D in (dual_half_width, 2 * dual_half_width):
        P = primal_factor * D
        primal = Box.square(P, 2 * P / (2 * n - 2))
        dual = Box.square(D, 2 * D / (n - 1))
        if not conjugate(f, primal, dual).finite_mask.all():
            return False
    return True


def check_hypotheses(
    f: Lagrangian,
    half_width: float = 4.0,
    n_samples: int = 4096,
    seed: int = 0,
    r: float | None = None,
    eps: float | None = None,
    tol: float | None = None,
) -> ConvexityReport:
    r = f.r if r is None else r
    eps = f.eps if eps is None else eps
    pts = (qmc.Sobol(4, scramble=True, seed=seed).random(n_samples) * 2 - 1) * half_width
    xi, zeta = pts[:, :2], pts[:, 2:]
    vals = np.concatenate([f(xi), f(zeta)])
    f0 = float(f(np.zeros(2)))
    tol = 1e-9 * (1.0 + float(np.max(np.abs(vals[np.isfinite(vals)])))) if tol is None else tol
    f1 = abs(f0) <= tol and bool(np.all(vals >= -tol))
    f2 = bool(np.all(np.isfinite(vals))) and np.isfinite(f0)

    out_x = np.linalg.norm(xi, axis=1) > r + 1
    out_z = np.linalg.norm(zeta, axis=1) > r + 1
    marg = f3_margins(f, xi, zeta, eps)
    either = out_x | out_z
    both = out_x & out_z
    worst_either = float(np.min(marg[either])) if either.any() else np.inf
    worst_both = float(np.min(marg[both])) if both.any() else np.inf
    bad = np.argwhere((marg < -tol) & either[:, None])
    witnesses = [(xi[i], zeta[i], THETAS[k]) for i, k in bad[:10]]
    return ConvexityReport(
        f1_pass=bool(f1),
        f2_pass=bool(f2),
        f3_pass=worst_either >= -tol,
        f3_worst_margin=worst_either,
        f3_both_outside_pass=worst_both >= -tol,
        f3_both_outside_margin=worst_both,
        superlinear=is_superlinear(f),
        witnesses=witnesses,
        tolerance=tol,
        r=r,
        eps=eps,
    )
