from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbsclab.lagrangian import (
    Box,
    biconjugate,
    catalog,
    check_hypotheses,
    conjugate,
    conjugate_bruteforce,
    is_superlinear,
    legendre_1d,
    load_tabulated,
    make_lagrangian,
    radial_convexification,
)


def test_catalog_names():
    names = catalog()
    for n in ("quadratic", "torsion", "pnorm", "double_well", "tabulated"):
        assert n in names
    with pytest.raises(KeyError):
        make_lagrangian("nope")


def test_quadratic_self_conjugate():
    f = make_lagrangian("quadratic")
    fs = conjugate(f, Box.square(6.0, 0.01), Box.square(2.0, 0.05))
    exact = 0.5 * np.sum(fs.points**2, axis=-1)
    assert fs.finite_mask.all()
    assert np.max(np.abs(fs.values - exact)) <= 0.01**2


@lru_cache(maxsize=None)
def _torsion_star_fine():
    return conjugate(make_lagrangian("torsion"), Box.square(5.0, 0.005), Box.square(3.0, 0.05))


@pytest.mark.parametrize("zeta,expected", [((0.5, 0.0), 0.0), ((1.0, 0.0), 0.0), ((2.0, 0.0), 1.5)])
def test_torsion_conjugate_points(zeta, expected):
    fs = _torsion_star_fine()
    assert fs(np.array(zeta)) == pytest.approx(expected, abs=1e-3)


def test_euclidean_not_superlinear():
    f = make_lagrangian("euclidean")
    fs = conjugate(f, Box.square(4.0, 0.02), Box.square(2.0, 0.05))
    r = np.linalg.norm(fs.points, axis=-1)
    assert not fs.finite_mask[r > 1.05].any()
    assert np.max(np.abs(fs.values[r < 0.95])) < 0.02
    assert not is_superlinear(f)
    assert is_superlinear(make_lagrangian("torsion"))


def test_bruteforce_matches_fast():
    f = make_lagrangian("double_well")
    primal, dual = Box.square(2.0, 0.05), Box.square(3.0, 0.1)
    fast = conjugate(f, primal, dual).values
    brute = conjugate_bruteforce(f(primal.points()), primal.axes, dual.axes)
    assert np.max(np.abs(fast - brute)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=40), st.floats(-3, 3))
def test_legendre_1d_brute(values, s):
    x = np.linspace(-2, 2, len(values))
    y = np.asarray(values)
    v, idx = legendre_1d(x, y, np.array([s]))
    assert v[0] == pytest.approx(np.max(s * x - y), abs=1e-12)
    assert s * x[idx[0]] - y[idx[0]] == pytest.approx(v[0], abs=1e-12)


@lru_cache(maxsize=None)
def _torsion_star():
    return conjugate(make_lagrangian("torsion"), Box.square(4.0, 0.02), Box.square(2.0, 0.02))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_young_fenchel(x1, x2, z1, z2):
    f = make_lagrangian("torsion")
    fs = _torsion_star()
    x, z = np.array([x1, x2]), np.array([z1, z2])
    assert x @ z <= f(x) + fs(z) + 1e-9


def test_conjugate_monotone_in_f():
    tors = make_lagrangian("torsion")
    quad = make_lagrangian("quadratic")
    primal, dual = Box.square(4.0, 0.05), Box.square(2.0, 0.1)
    # 1/2|xi|^2 <= torsion everywhere, so the conjugates are ordered the other way
    assert np.all(quad(primal.points()) <= tors(primal.points()) + 1e-12)
    assert np.all(conjugate(quad, primal, dual).values >= conjugate(tors, primal, dual).values - 1e-12)


def test_biconjugate_fixes_convex():
    f = make_lagrangian("quadratic")
    primal = Box.square(1.5, 0.02)
    fss = biconjugate(f, primal, Box.square(3.0, 0.02))
    L = 1.5 * np.sqrt(2)
    assert np.max(np.abs(fss.values - fss.f_values)) <= 2 * 0.02 * L
    assert np.all(fss.values <= fss.f_values + 1e-12)


def test_biconjugate_torsion_is_f():
    f = make_lagrangian("torsion")
    fss = biconjugate(f, Box.square(2.0, 0.02), Box.square(4.0, 0.02))
    assert np.max(np.abs(fss.values - fss.f_values)) <= 2 * 0.04 * 2 * np.sqrt(2)


def test_radial_convexification_double_well():
    f = make_lagrangian("double_well")
    fc = radial_convexification(f, 4.0)
    t = np.linspace(0, 3, 301)
    pts = np.c_[t, np.zeros_like(t)]
    expected = np.where(t <= 1, 0.0, (t**2 - 1) ** 2)
    assert np.max(np.abs(fc(pts) - expected)) < 1e-6
    assert np.all(fc(pts) <= f(pts) + 1e-12)


def test_hypotheses_catalog():
    assert check_hypotheses(make_lagrangian("quadratic")).passed
    assert check_hypotheses(make_lagrangian("torsion")).passed
    assert check_hypotheses(make_lagrangian("pnorm", c=0.5, p=3.0)).passed
    dw = check_hypotheses(make_lagrangian("double_well"))
    assert not dw.f1_pass  # f(0) = 1
    eu = check_hypotheses(make_lagrangian("euclidean"), eps=0.5)
    assert not eu.f3_pass and not eu.superlinear


def test_torsion_f3_variants():
    # with eps = 1 the one-outside form fails (xi=(2,0), zeta=0) while both-outside holds
    rep = check_hypotheses(make_lagrangian("torsion"), eps=1.0)
    assert not rep.f3_pass
    assert rep.f3_both_outside_pass
    assert rep.witnesses


def test_hypotheses_deterministic():
    a = check_hypotheses(make_lagrangian("torsion"))
    b = check_hypotheses(make_lagrangian("torsion"))
    assert a.to_dict() == b.to_dict()


def test_conjugate_rejects_outside():
    fs = conjugate(make_lagrangian("quadratic"), Box.square(4.0, 0.1), Box.square(1.0, 0.1))
    with pytest.raises(ValueError, match="half-widths"):
        fs(np.array([2.0, 0.0]))


def test_tabulated_roundtrip(tmp_path):
    t = np.linspace(0, 5, 51)
    p = tmp_path / "prof.csv"
    p.write_text("t,F\n" + "\n".join(f"{a},{0.5 * a * a}" for a in t))
    f = load_tabulated(p, r=0.0, eps=1.0)
    xi = np.array([[1.0, 1.0], [0.3, -2.0]])
    assert np.allclose(f(xi), 0.5 * np.sum(xi**2, axis=1), atol=0.01)
