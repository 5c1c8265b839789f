import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm, sqrtm

from artifact.cvp_core import Jet
from artifact.complex_structure import (GramError, KreinEvolution, SolutionBasis, build_J, build_T, canonical_J,
                                        grams, hol_inner, hol_projectors, holomorphic_expansion_check,
                                        integrability_check, structure_pack)
from artifact.linfield import restrict

S2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _standard_sigma(n: int) -> np.ndarray:
    return np.kron(np.eye(n), S2)


def _random_pair(rng, n):
    A = rng.normal(size=(2 * n, 2 * n))
    G = A @ A.T + 2 * n * np.eye(2 * n)
    B = rng.normal(size=(2 * n, 2 * n))
    return G, B - B.T


def _oscillators(freqs, t):
    """Symplectic evolution exp(t Sg^-1 H) for a positive energy Gram H."""
    n = len(freqs)
    Sg = _standard_sigma(n)
    H = np.kron(np.diag(freqs), np.eye(2))
    A = np.linalg.solve(Sg, H)
    return expm(t * A), Sg, A


# ---------------------------------------------------------------------------
# polar construction


def test_build_T_examples():
    np.testing.assert_array_equal(build_T(np.eye(2), S2), S2)
    np.testing.assert_allclose(build_T(2 * np.eye(2), 3 * S2), [[0.0, -1.5], [1.5, 0.0]], atol=1e-15)


def test_build_T_singular():
    with pytest.raises(GramError):
        build_T(np.zeros((2, 2)), S2)


def test_build_J_example_and_scale_invariance():
    J = build_J(S2)
    np.testing.assert_allclose(J, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(build_J(1.5 * S2), J, atol=1e-15)
    np.testing.assert_allclose(build_J(1.5 * S2, 2 * np.eye(2)), J, atol=1e-15)


def test_build_J_rejects_real_spectrum():
    with pytest.raises(GramError):
        build_J(np.diag([1.0, -1.0]))


def test_hol_projectors_example():
    P, Q = hol_projectors(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(P, 0.5 * np.array([[1, -1j], [1j, 1]]), atol=1e-15)
    np.testing.assert_allclose(P + Q, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(np.array([[0.0, 1.0], [-1.0, 0.0]]) @ P, 1j * P, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_structure_pack_identities(n, seed):
    rng = np.random.default_rng(seed)
    G, Sg = _random_pair(rng, n)
    pk = structure_pack(G, Sg)
    scale = np.linalg.cond(G) * np.linalg.cond(Sg)
    for name, r in pk.residuals().items():
        assert r <= 1e-12 * scale, name
    u, v = rng.normal(size=2 * n), rng.normal(size=2 * n)
    z = hol_inner(pk.H1, pk.P_hol, u, v)
    assert abs(z.imag - u @ Sg @ v) <= 1e-10 * scale
    assert abs(z.real - u @ Sg @ pk.J @ v) <= 1e-10 * scale
    assert hol_inner(pk.H1, pk.P_hol, u, u).real >= 0
    Z = pk.Z
    np.testing.assert_allclose(Z @ pk.J, 1j * Z, atol=1e-10 * scale)
    assert abs(np.conj(Z @ u) @ (Z @ v) - z) <= 1e-10 * scale


def test_structure_pack_dict():
    d = structure_pack(np.eye(2), S2).to_dict()
    assert d["J"] == [[0.0, 1.0], [-1.0, 0.0]]
    assert set(d["residuals"]) == {"J2", "JtG", "GT_Sg", "proj"}


# ---------------------------------------------------------------------------
# Gram matrices of linearized solutions


@pytest.fixture(scope="module")
def band_basis(kg_vacuum):
    k, mu, s, op = kg_vacuum
    t0 = 6
    jets = []
    for e in np.eye(2 * mu.grid.X):
        v = Jet(np.zeros(mu.n), np.zeros((mu.n, 3)))
        z = v.vector[:, 2].reshape(mu.grid.T, mu.grid.X)
        z[t0 - 1:t0 + 1] = e.reshape(2, mu.grid.X)
        v.vector[:, 2] = z.ravel()
        jets.append(restrict(op, v, t0))
    return SolutionBasis(tuple(jets)), t0


def test_grams_symmetry(kg_vacuum, band_basis):
    k, mu, s, op = kg_vacuum
    basis, t0 = band_basis
    G, Sg = grams(op.calc, basis, t0)
    np.testing.assert_array_equal(G, G.T)
    np.testing.assert_array_equal(Sg, -Sg.T)
    pk = structure_pack(G, Sg)
    assert max(pk.residuals().values()) <= 1e-10


def test_grams_reject_dependent_basis(kg_vacuum, band_basis):
    k, mu, s, op = kg_vacuum
    basis, t0 = band_basis
    dup = SolutionBasis(basis.jets[:2] + basis.jets[:1])
    with pytest.raises(GramError):
        grams(op.calc, dup, t0)
    grams(op.calc, dup, t0, check=False)


def test_solution_basis_combine(band_basis):
    basis, _ = band_basis
    c = np.arange(1.0, basis.dim + 1)
    u = basis.combine(c)
    expected = sum(ci * j.vector for ci, j in zip(c, basis.jets))
    np.testing.assert_allclose(u.vector, expected, atol=1e-14)
    with pytest.raises(ValueError):
        SolutionBasis(())


# ---------------------------------------------------------------------------
# Krein construction


@pytest.mark.parametrize("freqs", [[1.0], [1.0, 1.7], [0.6, 1.1, 1.9]])
def test_canonical_J_is_polar_part(freqs):
    U, Sg, A = _oscillators(freqs, 0.8)
    ev = KreinEvolution(U, Sg)
    assert ev.unitarity_defect() <= 1e-12
    cj = canonical_J(ev)
    assert cj.ok, cj.diagnostic
    oracle = -A @ np.linalg.inv(np.real(sqrtm(-A @ A)))
    np.testing.assert_allclose(cj.J, oracle, atol=1e-10)
    np.testing.assert_allclose(cj.J @ U, U @ cj.J, atol=1e-10)
    np.testing.assert_allclose(cj.J @ cj.J, -np.eye(len(U)), atol=1e-10)


def test_canonical_J_agrees_with_energy_structure():
    U, Sg, A = _oscillators([0.7, 1.3], 0.5)
    H = Sg @ A
    np.testing.assert_allclose(canonical_J(KreinEvolution(U, Sg)).J, -structure_pack(H, Sg).J, atol=1e-10)


def test_canonical_J_jordan_block():
    cj = canonical_J(KreinEvolution(np.array([[1.0, 1.0], [0.0, 1.0]]), S2))
    assert not cj.ok
    assert "Jordan" in cj.diagnostic


def test_canonical_J_neutral_eigenspace():
    cj = canonical_J(KreinEvolution(np.diag([2.0, 0.5]), S2))
    assert not cj.ok
    assert "neutral" in cj.diagnostic


def test_canonical_J_degenerate_identity():
    cj = canonical_J(KreinEvolution(np.eye(2), S2))
    assert not cj.ok
    assert "degenerate" in cj.diagnostic


def test_integrability_zero_nonlinearity():
    U, Sg, _ = _oscillators([1.0, 1.7], 0.8)
    assert integrability_check(KreinEvolution(U, Sg), np.zeros((4, 4, 4))) == []


def test_integrability_generic_nonlinearity():
    U, Sg, _ = _oscillators([1.0, 1.7], 0.8)
    D2P = np.random.default_rng(0).normal(size=(4, 4, 4))
    D2P = 0.5 * (D2P + D2P.transpose(0, 2, 1))
    table = integrability_check(KreinEvolution(U, Sg), D2P)
    assert len(table) == 1
    assert table[0]["violation"] > 1e-3


def test_integrability_needs_canonical_J():
    with pytest.raises(ValueError):
        integrability_check(KreinEvolution(np.eye(2), S2), np.zeros((2, 2, 2)))


# ---------------------------------------------------------------------------
# holomorphic expansion


def test_holomorphic_expansion_of_holomorphic_map():
    rng = np.random.default_rng(1)
    P_hol = structure_pack(np.eye(4), _standard_sigma(2)).P_hol
    B = rng.normal(size=(4, 4, 4)) + 1j * rng.normal(size=(4, 4, 4))
    quad = np.einsum("kab,ai,bj->kij", B, P_hol, P_hol)
    lin = P_hol @ (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))) @ P_hol
    res = holomorphic_expansion_check([lin, quad], P_hol)
    assert max(res) <= 1e-12


def test_holomorphic_expansion_of_generic_map():
    rng = np.random.default_rng(2)
    P_hol = structure_pack(np.eye(4), _standard_sigma(2)).P_hol
    res = holomorphic_expansion_check([np.eye(4), rng.normal(size=(4, 4, 4))], P_hol)
    assert res[0] <= 1e-14
    assert res[1] > 1e-3
