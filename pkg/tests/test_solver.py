from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbsclab.lagrangian import make_lagrangian
from lbsclab.mesh import DomainSpec, triangulate
from lbsclab.smoothing import SmoothingSchedule, regularize, smooth_lagrangian
from lbsclab.solver import (
    SolveOptions,
    assemble,
    gradient_field,
    harmonic_lift,
    minimize,
    minimizing_sequence,
    strict_convexity_check,
)


@pytest.fixture(scope="module")
def disc():
    return triangulate(DomainSpec.disc(h=1 / 32))


@pytest.fixture(scope="module")
def square():
    return triangulate(DomainSpec.polygon([(0, 0), (1, 0), (1, 1), (0, 1)], h=1 / 16))


def test_energy_zero_function(disc):
    F = assemble(disc, make_lagrangian("torsion"), np.cos(disc.vertices[:, 0]), 0.0)
    assert F.energy(np.zeros(disc.n_vertices)) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_affine_energy_and_gradient(square, a1, a2, b):
    a = np.array([a1, a2])
    u = square.vertices @ a + b
    f = make_lagrangian("torsion")
    F = assemble(square, f, 0.0, u[square.boundary_loop])
    assert np.allclose(gradient_field(square, u), a, atol=1e-10)
    assert F.energy(u) == pytest.approx(float(f(a)) * 1.0, rel=1e-10, abs=1e-12)


def test_poisson_energy_closed_form(disc):
    F = assemble(disc, make_lagrangian("quadratic"), 1.0, 0.0)
    u = (np.sum(disc.vertices**2, axis=1) - 1) / 4
    assert F.energy(u) == pytest.approx(-np.pi / 16, abs=2e-3)


def test_analytic_gradients(disc):
    u = (np.sum(disc.vertices**2, axis=1) - 1) / 4
    bary = disc.vertices[disc.triangles].mean(axis=1)
    assert np.max(np.abs(gradient_field(disc, u) - bary / 2)) <= 1 / 32


def test_poisson_solve(disc):
    res = minimize(assemble(disc, make_lagrangian("quadratic"), 1.0, 0.0))
    exact = (np.sum(disc.vertices**2, axis=1) - 1) / 4
    assert res.converged and np.max(np.abs(res.u - exact)) <= 5e-3
    assert np.all(np.diff(res.energy_trace) <= 1e-14 * max(1.0, abs(res.energy)))
    assert np.all(res.u[disc.boundary_loop] == 0.0)


def test_affine_minimizer_exact(square):
    a = np.array([1.2, 0.9])
    phi = square.boundary_points @ a + 0.3
    f = make_lagrangian("pnorm", c=0.5, p=3.0)
    F = assemble(square, f, 0.0, phi)
    res = minimize(F, np.zeros(square.n_vertices))
    assert np.max(np.abs(res.u - (square.vertices @ a + 0.3))) <= 1e-6
    assert res.energy == pytest.approx(float(f(a)), rel=1e-9)


def test_jensen_floor(square, rng):
    a = np.array([0.7, -1.1])
    f = make_lagrangian("torsion")
    F = assemble(square, f, 0.0, square.boundary_points @ a)
    floor = float(f(a))
    for _ in range(5):
        u = F.with_boundary(square.vertices @ a + rng.normal(0, 0.1, square.n_vertices))
        assert F.energy(u) >= floor - 1e-12


def test_torsion_energy_sign(disc):
    # f >= |xi| and the unit disc has Cheeger constant 2, so u = 0 is optimal while |g| < 2
    f = make_lagrangian("torsion")
    F = assemble(disc, f, -1.0, 0.0)
    res = minimize(F, harmonic_lift(F))
    assert res.energy == pytest.approx(0.0, abs=1e-12)
    h = regularize(smooth_lagrangian(f, 16, t_max=4.0), 16)
    res = minimize(assemble(disc, h, -6.0, 0.0))
    assert res.converged and res.energy < 0
    assert res.energy >= -6.0 * np.pi * res.sup_norm


def test_sequence_affine_is_constant(square):
    a = np.array([1.5, 0.5])
    phi = square.boundary_points @ a
    seq = minimizing_sequence(make_lagrangian("torsion"), np.zeros(square.n_vertices), phi,
                              SmoothingSchedule(ks=(4, 8, 16), t_max=4.0), square)
    for step in seq:
        assert np.max(np.abs(step.result.u - square.vertices @ a)) <= 1e-6


def test_sequence_energy_decreases(disc):
    phi = np.zeros(disc.n_boundary)
    seq = minimizing_sequence(make_lagrangian("torsion"), np.full(disc.n_vertices, -4.0), phi,
                              SmoothingSchedule(ks=(4, 8, 16, 32), t_max=4.0), disc)
    E = np.array([s.true_energy for s in seq])
    assert len(seq) == 4 and np.all(np.diff(E) <= 1e-8)
    assert all(s.result.converged for s in seq)


def test_strict_convexity_two_starts(disc):
    f = make_lagrangian("torsion")
    h = regularize(smooth_lagrangian(f, 16, t_max=4.0), 16)
    F = assemble(disc, h, -6.0, 0.0)
    a = minimize(F, np.zeros(disc.n_vertices))
    b = minimize(F, F.with_boundary(np.full(disc.n_vertices, -1.0)))
    rep = strict_convexity_check(a, b, f.r)
    assert rep.n_checked > 0 and rep.passed


def test_nonconvergence_flag(disc):
    res = minimize(assemble(disc, make_lagrangian("quadratic"), 1.0, 0.0), opts=SolveOptions(max_iters=3, min_iters=1))
    assert not res.converged and res.iterations <= 3


def test_rejects_value_only_lagrangian(disc):
    f = make_lagrangian("quadratic")
    with pytest.raises(ValueError, match="gradient"):
        assemble(disc, replace(f, grad=None), 0.0, 0.0)
