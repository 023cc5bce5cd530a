from functools import lru_cache

import numpy as np
import pytest

from lbsclab.lagrangian import THETAS, f3_margins, make_lagrangian, radial
from lbsclab.mesh import DomainSpec, triangulate
from lbsclab.smoothing import SmoothingSchedule, regularize, smooth_g, smooth_lagrangian


@lru_cache(maxsize=None)
def _torsion_k(k: int):
    return smooth_lagrangian(make_lagrangian("torsion"), k, t_max=5.0)


def _brute_moreau(f, xi: np.ndarray, mu: float, half: float = 5.0, step: float = 0.01) -> np.ndarray:
    a = np.arange(-half, half + step / 2, step)
    Y = np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)
    fy = f(Y)
    return np.array([np.min(fy + np.sum((Y - x) ** 2, axis=1) / (2 * mu)) for x in xi])


def test_quadratic_moreau_closed_form():
    fk = smooth_lagrangian(make_lagrangian("quadratic"), 10)
    assert fk(np.array([1.0, 0.0])) == pytest.approx(1 / 2.2, abs=1e-9)
    assert fk.params["delta"] == pytest.approx(0.5 * 8.0**2 * (1 - 1 / 1.1), rel=1e-3)


def test_normalized_at_zero():
    for name in ("quadratic", "torsion"):
        fk = smooth_lagrangian(make_lagrangian(name), 16)
        assert abs(float(fk(np.zeros(2)))) <= 1e-12


def test_torsion_matches_brute_force_moreau():
    f = make_lagrangian("torsion")
    xi = np.array([[0.0, 0.0], [0.4, 0.3], [1.0, 0.0], [1.5, -1.0], [-2.0, 2.0]])
    fk = _torsion_k(4)
    ref = _brute_moreau(f, xi, 0.25)
    # mollification of the derivative moves values by O(sigma^2 curvature), sigma = 0.025
    assert np.max(np.abs(fk(xi) - ref)) <= 2e-3


def test_torsion_band_shrinks_monotonically():
    f = make_lagrangian("torsion")
    a = np.linspace(-3, 3, 61)
    pts = np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)
    dists = [float(np.max(np.abs(_torsion_k(k)(pts) - f(pts)))) for k in (4, 16, 64)]
    assert dists[0] > dists[1] > dists[2]


def test_sandwich_and_monotone_sequence():
    f = make_lagrangian("torsion")
    a = np.linspace(-3.5, 3.5, 71)
    pts = np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)
    prev = None
    deltas = []
    for k in (4, 8, 16, 32):
        fk = _torsion_k(k)
        d = fk.params["delta"]
        deltas.append(d)
        assert np.all(fk(pts) <= f(pts) + 1e-9 + fk.params["upper_violation"])
        assert fk.params["upper_violation"] <= 1e-6
        assert np.all(fk(pts) >= f(pts) - d - 1e-9)
        if prev is not None:
            assert np.all(fk(pts) >= prev(pts) - 1e-9)
        prev = fk
    assert all(b <= a for a, b in zip(deltas, deltas[1:]))


def test_modulus_retained_with_quarter_eps():
    f = make_lagrangian("torsion")
    hk = regularize(_torsion_k(16), 16)
    rng = np.random.default_rng(3)
    xi = rng.uniform(-4.5, 4.5, (4000, 2))
    zeta = rng.uniform(-4.5, 4.5, (4000, 2))
    keep = (np.linalg.norm(xi, axis=1) > f.r + 2) & (np.linalg.norm(zeta, axis=1) > f.r + 2)
    marg = f3_margins(hk, xi[keep], zeta[keep], f.eps / 4)
    assert marg.shape[1] == len(THETAS)
    assert marg.min() >= -1e-9


def test_rejects_nonconvex_profile():
    with pytest.raises(ValueError, match="not convex"):
        smooth_lagrangian(make_lagrangian("double_well"), 8)
    with pytest.raises(ValueError, match="radial"):
        smooth_lagrangian(make_lagrangian("two_well"), 8)


def test_regularize_examples():
    zero = radial("zero", lambda t: 0 * t, lambda t: 0 * t)
    h = regularize(zero, 4)
    xi = np.array([[1.0, 2.0], [-0.5, 0.0]])
    assert np.allclose(h(xi), 0.25 * np.sum(xi**2, axis=1))
    fk = smooth_lagrangian(make_lagrangian("torsion"), 100, t_max=4.0)
    hk = regularize(fk, 100)
    assert abs(float(hk(np.array([2.0, 0.0]))) - 2.54) <= fk.params["delta"]


def test_regularize_hessian_shift():
    fk = _torsion_k(8)
    hk = regularize(fk, 8)
    x = np.array([1.7, -0.4])
    e = 1e-4

    def hess(fn):
        H = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                di, dj = np.eye(2)[i] * e, np.eye(2)[j] * e
                H[i, j] = (fn(x + di + dj) - fn(x + di - dj) - fn(x - di + dj) + fn(x - di - dj)) / (4 * e * e)
        return H

    assert np.allclose(hess(hk) - hess(fk), (2 / 8) * np.eye(2), atol=1e-4)


def test_gradient_consistent_with_values():
    hk = regularize(_torsion_k(16), 16)
    rng = np.random.default_rng(0)
    xi = rng.uniform(-3, 3, (50, 2))
    e = 1e-6
    fd = np.stack([(hk(xi + e * d) - hk(xi - e * d)) / (2 * e) for d in np.eye(2)], axis=1)
    assert np.allclose(hk.grad(xi), fd, atol=1e-5)


@pytest.fixture(scope="module")
def disc():
    return triangulate(DomainSpec.disc(h=1 / 32))


def test_smooth_g_constant(disc):
    g = np.full(disc.n_vertices, -3.0)
    assert np.allclose(smooth_g(g, 8, disc), g)


def test_smooth_g_step(disc):
    g = np.sign(disc.vertices[:, 0])
    k = 16
    gk = smooth_g(g, k, disc)
    far = np.abs(disc.vertices[:, 0]) > 1.0 / k
    assert np.max(np.abs(gk[far] - g[far])) <= 1e-3
    assert np.max(np.abs(gk)) <= np.max(np.abs(g)) + 1e-12


def test_schedule():
    s = SmoothingSchedule()
    assert s.ks[0] == 4 and s.ks[-1] == 256
    assert s.mu(8) == 1 / 8 and s.sigma(10) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        SmoothingSchedule(ks=(8, 4))
    _, built = SmoothingSchedule(ks=(4, 8), t_max=3.0).build(make_lagrangian("torsion"))
    assert len(built.deltas) == 2 and built.deltas[1] <= built.deltas[0]
