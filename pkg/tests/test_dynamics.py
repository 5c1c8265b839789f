import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import unitary_group

from artifact.cvp_core import Jet, klein_gordon_kernel
from artifact.dynamics import (NonHermitianError, conserving_pack, dyson, el_residual_scaling, error_operator,
                               extract_generators, flow_record, hermiticity_scan, holo_evolve,
                               intermediate_structures, ket_lift_tail, lift_holomorphic, lift_mixed,
                               lift_norm_check, lift_tail, midpoint_generator, norm_balance, norm_exponent,
                               observable_transform, perturb, restricted_flow, scattering_setup)
from artifact.fock import BraKetState, FockBasis, coherent
from artifact.polymaps import CPoly

Z_IN = np.array([0.3 + 0.1j, -0.2j, 0.1])


def _zero_mu(n):
    return CPoly.zero(n, 1)


# ---------------------------------------------------------------------------
# setup and perturbation series


def test_setup_rejects_unsupported_expansions():
    k = klein_gordon_kernel(0.7, 0.5)
    with pytest.raises(NotImplementedError):
        scattering_setup(k, 14, 3, 3, 11, retarded=False)
    with pytest.raises(NotImplementedError):
        scattering_setup(k, 14, 3, 3, 11, small_inner=False)
    with pytest.raises(ValueError):
        scattering_setup(k, 14, 3, 3, 12)
    with pytest.raises(ValueError):
        scattering_setup(k, 14, 3, 3, 11, order=0)


def test_incoming_coordinates_roundtrip(scenario):
    u = scenario.incoming(Z_IN)
    np.testing.assert_allclose(scenario.z_of(scenario.band(u, scenario.t_in)), Z_IN, atol=1e-14)


def test_zero_incoming_gives_empty_series(scenario):
    series = perturb(scenario, Jet.zeros(scenario.measure.n, 3))
    assert series.order == 0 and series.inners == []


def test_scalar_incoming_rejected(scenario):
    u = scenario.incoming(Z_IN)
    with pytest.raises(ValueError):
        perturb(scenario, Jet(np.ones(scenario.measure.n), u.vector))


def test_linear_kernel_has_no_higher_orders(linear_scenario):
    series = perturb(linear_scenario, linear_scenario.incoming(Z_IN))
    assert series.orders[1].norm() <= 1e-14 * series.orders[0].norm()


def test_second_order_is_homogeneous(scenario):
    a = perturb(scenario, scenario.incoming(Z_IN))
    b = perturb(scenario, scenario.incoming(2 * Z_IN))
    assert a.orders[1].norm() > 1e-3
    np.testing.assert_allclose(b.orders[1].vector, 4 * a.orders[1].vector, atol=1e-10)
    assert a.greens_residual <= 1e-10


def test_restricted_flow_at_incoming_slice(scenario):
    series = perturb(scenario, scenario.incoming(Z_IN))
    r = restricted_flow(scenario, series, scenario.t_in)
    np.testing.assert_allclose(r[0].vector, series.orders[0].vector, atol=1e-13)
    assert np.max(np.abs(r[1].vector)) <= 1e-13


def test_residual_scaling_exponent(scenario):
    out = el_residual_scaling(scenario, scenario.incoming(Z_IN), [0.1, 0.05, 0.025])
    assert out["expected_slope"] == 3
    assert np.all(np.abs(np.array(out["slopes"]) - 3) < 0.15)


def test_flow_record_at_incoming_slice(scenario):
    rec = flow_record(scenario, perturb(scenario, scenario.incoming(Z_IN)))
    np.testing.assert_allclose(rec.z[0, 0], Z_IN, atol=1e-14)
    assert np.max(np.abs(rec.z[1, 0])) <= 1e-13
    np.testing.assert_array_equal(rec.s_mu[:, 0], 0.0)
    assert rec.half_sq[2, 0] == pytest.approx(0.5 * np.sum(np.abs(Z_IN) ** 2), abs=1e-14)


@pytest.mark.parametrize("which", ["linear_scenario", "scenario"])
def test_norm_balance(which, request):
    setup = request.getfixturevalue(which)
    nb = norm_balance(setup, Z_IN)
    assert nb.degrees == [2, 3]
    assert nb.max_defect <= 1e-8
    assert nb.route_difference <= 1e-10
    assert len(nb.rows()) == 2


def test_fit_flow_starts_at_identity(scenario, scenario_fit):
    ident = CPoly.identity(scenario.n)
    P = scenario_fit.P[scenario.t_in]
    assert (P - ident).max_coeff() <= 1e-10
    assert scenario_fit.mu[scenario.t_in].max_coeff() <= 1e-10
    assert scenario_fit.fit_residual <= 1e-9
    assert set(scenario_fit.to_dict()) == {"slices", "s", "fit_residual", "P", "mu"}


def test_fit_flow_reproduces_records(scenario, scenario_fit):
    rec = flow_record(scenario, perturb(scenario, scenario.incoming(Z_IN)))
    for i, t in enumerate(scenario.slices()):
        np.testing.assert_allclose(scenario_fit.P[int(t)](Z_IN), rec.z[0, i] + rec.z[1, i], atol=1e-9)


# ---------------------------------------------------------------------------
# Fock lifts


def test_lift_of_identity_is_identity():
    b = FockBasis(2, 4)
    v = coherent(b, np.array([0.3, -0.2j]))
    np.testing.assert_array_equal(lift_holomorphic(CPoly.identity(2), b).apply_ket(v).coeffs, v.coeffs)


def test_lift_rejects_bad_maps():
    b = FockBasis(1, 4)
    with pytest.raises(ValueError):
        lift_holomorphic(CPoly.coordinate(1, 0, conj=True), b)
    with pytest.raises(ValueError):
        lift_mixed(CPoly.identity(1) + CPoly.constant(1, 0.1), None, 0.0, b)
    with pytest.raises(ValueError):
        lift_mixed(CPoly.identity(2), None, 0.0, b)


@pytest.mark.parametrize("eps", [0.1, 0.3])
def test_holomorphic_lift_maps_coherent_states(eps):
    b = FockBasis(1, 12)
    P = CPoly.identity(1) + CPoly.coordinate(1, 0).product(CPoly.coordinate(1, 0)) * eps
    z = np.array([0.4 - 0.1j])
    out = lift_holomorphic(P, b).apply_ket(coherent(b, z))
    expected = coherent(b, P(z))
    assert np.linalg.norm(out.coeffs - expected.coeffs) <= 1e-8 + ket_lift_tail(P, b.n_max, z)
    low = b.number <= b.n_max // 2
    np.testing.assert_allclose(out.coeffs[low], expected.coeffs[low], atol=1e-12)


def test_unitary_lift_conserves_norm():
    b = FockBasis(2, 6)
    U = unitary_group.rvs(2, random_state=0)
    z = np.array([0.4 + 0.2j, -0.3j])
    chk = lift_norm_check(CPoly.linear(U), None, 0.0, b, z)
    assert chk.ok
    assert chk.exponent_defect <= 1e-14
    assert chk.functor_one == pytest.approx(chk.conserved_one, rel=1e-14)


def test_scalar_exponent_scales_norm():
    b = FockBasis(2, 6)
    z = np.array([0.4 + 0.2j, -0.3j])
    mu = CPoly(2, 1, {((1, 0), (1, 0)): np.array([-0.5 + 0j])})
    chk = lift_norm_check(CPoly.identity(2), mu, 1.2, b, z)
    assert chk.ok
    assert chk.functor_one == pytest.approx(np.exp(np.sum(np.abs(z) ** 2) - 0.6 * abs(z[0]) ** 2), rel=1e-14)
    assert chk.exponent_defect == pytest.approx(0.6 * abs(z[0]) ** 2, rel=1e-12)
    ex = norm_exponent(CPoly.identity(2), mu, 1.2)
    assert ex(z)[0] == pytest.approx(-0.6 * abs(z[0]) ** 2, abs=1e-15)


def test_mixed_lift_on_coherent_pair():
    b = FockBasis(1, 10)
    P = CPoly.identity(1) * 0.9 + CPoly.coordinate(1, 0, conj=True) * 0.1
    z = np.array([0.3 + 0.2j])
    st = BraKetState.from_pair(coherent(b, z), coherent(b, z))
    one = lift_mixed(P, None, 0.0, b).apply(st).one()
    assert abs(one - np.exp(np.abs(P(z)[0]) ** 2)) <= lift_tail(P, None, 0.0, b.n_max, z) + 1e-10


# ---------------------------------------------------------------------------
# generators and evolution


def _cayley_pack(dt=0.1, seed=0):
    U = unitary_group.rvs(2, random_state=seed)
    return U, midpoint_generator(CPoly.identity(2), CPoly.linear(U), _zero_mu(2), _zero_mu(2), dt, 2.0)


def test_midpoint_generator_of_fixed_map_is_zero():
    pk = midpoint_generator(CPoly.identity(2), CPoly.identity(2), _zero_mu(2), _zero_mu(2), 0.1, 2.0)
    assert pk.phi.terms == {} and pk.sigma.terms == {}


def test_midpoint_generator_of_unitary_step():
    U, pk = _cayley_pack()
    A, V = pk.phi.linear_part()
    cayley = 2 * (U - np.eye(2)) @ np.linalg.inv(U + np.eye(2)) / 0.1
    np.testing.assert_allclose(A, cayley, atol=1e-12)
    assert np.max(np.abs(V)) <= 1e-13
    assert pk.hermiticity_defect(FockBasis(2, 4)) <= 1e-12


def test_holo_evolve_is_unitary():
    _, pk = _cayley_pack()
    b = FockBasis(2, 4)
    S = holo_evolve(pk, b, 0.7)
    np.testing.assert_allclose(np.conj(S).T @ S, np.eye(b.dim), atol=1e-12)


def test_holo_evolve_refuses_non_hermitian():
    pk = conserving_pack(np.array([[0.5 + 0j]]), CPoly.zero(1, 1), 0.0, 2.0)
    pk.sigma = CPoly.zero(1, 1)
    with pytest.raises(NonHermitianError):
        holo_evolve(pk, FockBasis(1, 3), 1.0)


def _mixing_pack(eta):
    A = np.array([[0.4j, 0.1], [-0.1, -0.3j]])
    mix = CPoly.stack([CPoly.coordinate(2, 1, conj=True).product(CPoly.coordinate(2, 0)),
                       CPoly.coordinate(2, 0, conj=True).product(CPoly.coordinate(2, 0))])
    return conserving_pack(A, mix, eta, 2.0)


def test_conserving_pack_without_mixing():
    b = FockBasis(2, 4)
    pk = _mixing_pack(0.0)
    assert pk.mixing_terms() == []
    assert abs(error_operator(pk, b)).max() <= 1e-14
    assert pk.hermiticity_defect(b) <= 1e-15


def test_dyson_without_mixing_is_exact():
    b = FockBasis(2, 3)
    pk = _mixing_pack(0.0)
    rng = np.random.default_rng(0)
    W = rng.normal(size=(b.dim, b.dim)) + 1j * rng.normal(size=(b.dim, b.dim))
    res = dyson(pk, b, W, 0.5, 2, n_steps=8)
    assert res.truncation_error(0) <= 1e-10 * np.linalg.norm(W)
    assert all(np.max(np.abs(o)) <= 1e-12 * np.linalg.norm(W) for o in res.orders[1:])


def test_dyson_orders_converge():
    b = FockBasis(2, 3)
    pk = _mixing_pack(0.05)
    assert len(pk.mixing_terms()) > 0
    W = np.outer(np.conj(coherent(b, [0.2, 0.1j]).coeffs), coherent(b, [0.2, 0.1j]).coeffs)
    res = dyson(pk, b, W, 0.5, 2, n_steps=16)
    errs = [res.truncation_error(k) for k in range(3)]
    assert errs[0] > errs[1] > errs[2]


def test_dyson_needs_reference_for_error():
    b = FockBasis(1, 2)
    pk = conserving_pack(np.array([[0.3j]]), CPoly.zero(1, 1), 0.0, 2.0)
    res = dyson(pk, b, np.eye(b.dim), 0.1, 1, n_steps=4, exact=False)
    with pytest.raises(ValueError):
        res.truncation_error()


def test_observable_transform_of_identity():
    b = FockBasis(2, 3)
    Op, err = observable_transform(_mixing_pack(0.05), b, np.eye(b.dim), 0.5, 2, n_steps=8)
    np.testing.assert_allclose(Op, np.eye(b.dim), atol=1e-14)
    assert err <= 1e-14


def test_observable_transform_without_mixing():
    b = FockBasis(2, 3)
    O = np.diag(np.arange(b.dim, dtype=float))
    Op, _ = observable_transform(_mixing_pack(0.0), b, O, 0.5, 2, n_steps=8)
    np.testing.assert_array_equal(Op, O)


def test_hamiltonian_of_linear_generator():
    b = FockBasis(2, 2)
    A = np.array([[0.4j, 0.1], [-0.1, -0.3j]])
    pk = conserving_pack(A, CPoly.zero(2, 2), 0.0, 2.0)
    H = pk.hamiltonian(b)
    one = b.number == 1
    # on the one-particle sector H acts as i A
    np.testing.assert_allclose(H[np.ix_(one, one)], 1j * A, atol=1e-15)
    S = holo_evolve(pk, b, 0.3)
    np.testing.assert_allclose(S[np.ix_(one, one)], expm(0.3 * A), atol=1e-12)


def test_extracted_generators_hermitian_only_with_compensation(scenario, scenario_fit):
    b = FockBasis(scenario.n, 4)
    packs = extract_generators(scenario, scenario_fit)
    assert len(packs) == len(scenario_fit.slices) - 1
    assert max(r["defect"] for r in hermiticity_scan(packs, b)) <= 1e-8
    bare = extract_generators(scenario, scenario_fit, compensate=False)
    assert max(r["defect"] for r in hermiticity_scan(bare, b)) > 1e-3


def test_intermediate_structures(scenario, scenario_fit):
    out = intermediate_structures(scenario, scenario_fit, slices=[scenario.t_in, scenario.t_in + 2])
    assert out[0].norm_correction == 0.0
    for st in out:
        assert max(st.pack.residuals().values()) <= 1e-10
    np.testing.assert_allclose(out[0].pack.G, np.eye(2 * scenario.n), atol=1e-10)
