import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.cvp_core import (BumpKernel, GaussKernel, Jet, LayeredKernel, MeasureDeformation, SpacetimeGrid,
                               action, ell, eval_kernel, kernel_from_dict, klein_gordon_kernel, lattice_measure,
                               lattice_vacuum, make_measure, minimize_action, push_forward, weak_el_residual)

coord = st.floats(-3, 3, allow_nan=False)


def _two_point():
    """Two points with L(x,x) = 1 and L(x1,x2) = 1/2 for the unit bump kernel."""
    d = np.sqrt(1.0 - 1.0 / np.sqrt(2.0))
    return BumpKernel(dim=2, r=1.0), make_measure([[0.0, 0.0], [d, 0.0]], [1.0, 1.0])


# ---------------------------------------------------------------------------
# kernels


def test_gauss_kernel_peak_is_one():
    assert eval_kernel(GaussKernel(dim=2, r=1.5, width=0.4), [0.3, -0.2], [0.3, -0.2]) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("k", [BumpKernel(dim=2, r=1.2), GaussKernel(dim=2, r=1.2)])
def test_kernel_vanishes_beyond_range(k):
    assert eval_kernel(k, [0.0, 0.0], [1.0, 0.7]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(coord, min_size=6, max_size=6))
def test_kernels_are_symmetric(c):
    x, y = np.array(c[:3]) * 0.3, np.array(c[3:]) * 0.3
    for k in (BumpKernel(dim=3, r=1.5), GaussKernel(dim=3, r=1.5), klein_gordon_kernel(lam=0.5, window=(-1, 1))):
        assert abs(eval_kernel(k, x, y) - eval_kernel(k, y, x)) <= 1e-15


def test_kernel_derivatives_match_finite_differences():
    k = klein_gordon_kernel(0.7, 0.5, lam=0.6, window=(-2.0, 2.0))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3)) * 0.1
    y = x + rng.normal(size=(5, 3)) * 0.4
    d = k.derivatives(x, y)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (k.value(x + e, y) - k.value(x - e, y)) / (2 * h)
        assert np.max(np.abs(fd - d.d1[:, j])) < 1e-7
        fd2 = (k.derivatives(x, y + e, second=False).d1 - k.derivatives(x, y - e, second=False).d1) / (2 * h)
        assert np.max(np.abs(fd2 - d.h12[:, :, j])) < 1e-6


def test_eval_kernel_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        eval_kernel(BumpKernel(dim=2), [0.0, 0.0, 0.0], [0.0, 0.0])


def test_klein_gordon_kernel_rejects_unstable_dispersion():
    with pytest.raises(ValueError):
        klein_gordon_kernel(c=1.0, mu=1.0)


def test_layered_kernel_rejects_negative_lagrangian():
    with pytest.raises(ValueError):
        LayeredKernel(dim=3, z_c=5.0, k_0=1.0)


@pytest.mark.parametrize("k", [BumpKernel(dim=2, r=1.3, amplitude=2.0), GaussKernel(dim=2, r=1.1, width=0.3),
                               klein_gordon_kernel(0.6, 0.4, lam=0.2, window=(1.0, 3.0))])
def test_kernel_dict_roundtrip(k):
    d = k.to_dict()
    if d["family"] == "layered":
        d["periods"] = [None, None, None]
    k2 = kernel_from_dict(d)
    x, y = np.array([0.1, 0.2, 0.05][:k.dim]), np.array([0.5, -0.3, -0.1][:k.dim])
    assert eval_kernel(k2, x, y) == pytest.approx(eval_kernel(k, x, y), abs=1e-15)


def test_unknown_kernel_family():
    with pytest.raises(ValueError):
        kernel_from_dict({"family": "nope"})


# ---------------------------------------------------------------------------
# action and ell


def test_action_of_zero_kernel():
    mu = make_measure(np.random.default_rng(0).normal(size=(4, 2)), np.ones(4))
    assert action(BumpKernel(dim=2, amplitude=0.0), mu) == 0.0


def test_action_single_point():
    assert action(BumpKernel(dim=2), make_measure([[0.0, 0.0]], [2.0])) == pytest.approx(4.0)


def test_action_two_points():
    k, mu = _two_point()
    assert action(k, mu) == pytest.approx(3.0, abs=1e-14)


def test_ell_two_points():
    k, mu = _two_point()
    assert ell(k, mu, 1.0, mu.points[0]) == pytest.approx(0.5, abs=1e-14)


def test_ell_zero_kernel():
    mu = make_measure([[0.0, 0.0], [0.4, 0.1]], [1.0, 2.0])
    np.testing.assert_array_equal(ell(BumpKernel(dim=2, amplitude=0.0), mu, 0.0, mu.points), 0.0)


def test_ell_vanishes_on_periodic_lattice():
    k, mu, s = lattice_vacuum(BumpKernel(dim=2, r=1.5), 6, 5, periodic_time=True)
    assert np.max(np.abs(ell(k, mu, s, mu.points))) < 1e-14


def test_ell_vanishes_on_klein_gordon_vacuum_interior():
    k, mu, s = lattice_vacuum(klein_gordon_kernel(), 8, 4)
    interior = (mu.grid.slice_of >= 1) & (mu.grid.slice_of <= 6)
    assert np.max(np.abs(ell(k, mu, s, mu.points)[interior])) < 1e-14


# ---------------------------------------------------------------------------
# weak EL residual


def test_weak_el_zero_jet():
    k, mu = _two_point()
    assert np.all(weak_el_residual(k, mu, 1.0, Jet.zeros(2, 2)) == 0.0)


def test_weak_el_scalar_jet_on_critical_lattice():
    k, mu, s = lattice_vacuum(BumpKernel(dim=2, r=1.5), 6, 5, periodic_time=True)
    r = weak_el_residual(k, mu, s, Jet(np.ones(mu.n), np.zeros((mu.n, 2))))
    assert np.max(np.abs(r)) < 1e-14


def test_weak_el_matches_finite_difference():
    rng = np.random.default_rng(1)
    k = GaussKernel(dim=2, r=1.5, width=0.5)
    mu = make_measure(rng.uniform(0, 2, size=(7, 2)), rng.uniform(0.5, 1.5, size=7))
    s = 0.8
    u = Jet(rng.normal(size=7), rng.normal(size=(7, 2)))
    h = 1e-6

    def f(e):
        return (1 + e * u.scalar) * ell(k, mu, s, mu.points + e * u.vector)

    fd = (f(h) - f(-h)) / (2 * h)
    assert np.max(np.abs(fd - weak_el_residual(k, mu, s, u))) < 1e-6


def test_weak_el_rejects_mismatched_jet():
    k, mu = _two_point()
    with pytest.raises(ValueError):
        weak_el_residual(k, mu, 1.0, Jet.zeros(3, 2))


# ---------------------------------------------------------------------------
# minimizer


def test_minimizer_fixed_point_on_lattice():
    k = BumpKernel(dim=2, r=1.5)
    _, mu, _ = lattice_vacuum(k, 6, 5, periodic_time=True)
    k = k.with_periods((6.0, 5.0))
    out, rep = minimize_action(k, mu)
    assert rep.converged and rep.iterations == 0
    np.testing.assert_array_equal(out.weights, mu.weights)


def test_minimizer_restores_two_site_toy():
    k = BumpKernel(dim=2, r=1.0)
    mu = make_measure([[0.0, 0.0], [0.5, 0.0]], [1.2, 0.8])
    out, rep = minimize_action(k, mu, tol=1e-12, move_points=False)
    assert rep.converged
    np.testing.assert_allclose(out.weights, [1.0, 1.0], atol=1e-10)
    assert rep.actions[-1] <= rep.actions[0]
    assert np.all(np.diff(rep.actions) <= 0)
    assert out.volume == pytest.approx(mu.volume)


def test_minimizer_zero_tolerance_flags_nonconvergence():
    mu = make_measure([[0.0, 0.0], [0.5, 0.0]], [1.2, 0.8])
    _, rep = minimize_action(BumpKernel(dim=2, r=1.0), mu, tol=0.0, max_iter=50, move_points=False)
    assert not rep.converged


# ---------------------------------------------------------------------------
# measures, jets, deformations


def test_push_forward_identity():
    mu = lattice_measure(3, 4)
    nu = push_forward(mu, MeasureDeformation.identity(mu))
    np.testing.assert_array_equal(nu.points, mu.points)
    np.testing.assert_array_equal(nu.weights, mu.weights)


def test_push_forward_doubles_weights():
    mu = lattice_measure(3, 4)
    nu = push_forward(mu, MeasureDeformation(np.full(mu.n, 2.0), mu.points))
    np.testing.assert_array_equal(nu.weights, 2 * mu.weights)
    np.testing.assert_array_equal(nu.points, mu.points)


def test_translation_keeps_action():
    rng = np.random.default_rng(2)
    k = GaussKernel(dim=2, r=1.5)
    mu = make_measure(rng.uniform(0, 2, size=(6, 2)), rng.uniform(0.5, 1.5, size=6))
    nu = push_forward(mu, MeasureDeformation(np.ones(6), mu.points + np.array([0.37, -1.2])))
    assert action(k, nu) == pytest.approx(action(k, mu), rel=1e-13)


def test_deformation_rejects_nonpositive_weight():
    with pytest.raises(ValueError):
        MeasureDeformation(np.array([1.0, 0.0]), np.zeros((2, 2)))


def test_measure_validation():
    with pytest.raises(ValueError):
        make_measure([[0.0, 0.0]], [-1.0])
    with pytest.raises(ValueError):
        make_measure([[np.nan, 0.0]], [1.0])


def test_grid_dict_roundtrip():
    g = lattice_measure(4, 3).grid
    g2 = SpacetimeGrid.from_dict(g.to_dict())
    assert (g2.T, g2.X, g2.ht, g2.hx, g2.lattice) == (g.T, g.X, g.ht, g.hx, g.lattice)
    np.testing.assert_array_equal(g2.slice_of, g.slice_of)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_jet_flat_roundtrip(n, m, seed):
    rng = np.random.default_rng(seed)
    j = Jet(rng.normal(size=n), rng.normal(size=(n, m)))
    j2 = Jet.from_flat(j.flat(), m)
    np.testing.assert_array_equal(j2.scalar, j.scalar)
    np.testing.assert_array_equal(j2.vector, j.vector)
