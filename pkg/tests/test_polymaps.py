import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.polymaps import (CPoly, bidegree_parts, fit_homogeneous, fit_polynomial, invert_real_linear,
                               monomial_keys, multi_indices)


def _crand(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def _random_map(rng, n, scale=0.2):
    """Identity-like map with random quadratic terms in z and conj z."""
    P = CPoly.linear(np.eye(n) + 0.1 * _crand(rng, n, n), 0.1 * _crand(rng, n, n))
    for key in monomial_keys(n, 2):
        P._add_term(key, scale * _crand(rng, n))
    return P


def test_multi_indices_count():
    for n, k in [(1, 3), (2, 2), (3, 4)]:
        idx = multi_indices(n, k)
        assert len(idx) == math.comb(n + k - 1, k)
        assert all(sum(i) == k for i in idx)


def test_monomial_keys_count():
    assert len(monomial_keys(2, 2)) == math.comb(4 + 2 - 1, 2)


def test_evaluation_of_coordinates():
    z = np.array([0.3 + 0.4j, -1.0 + 0.5j])
    assert CPoly.coordinate(2, 1)(z)[0] == z[1]
    assert CPoly.coordinate(2, 0, conj=True)(z)[0] == np.conj(z[0])
    np.testing.assert_array_equal(CPoly.identity(2)(z), z)


def test_product_and_conj():
    rng = np.random.default_rng(0)
    z = _crand(rng, 2)
    x, y = CPoly.coordinate(2, 0), CPoly.coordinate(2, 1, conj=True)
    assert (x * y)(z)[0] == pytest.approx(z[0] * np.conj(z[1]), abs=1e-15)
    P = _random_map(rng, 2)
    np.testing.assert_allclose(P.conj()(z), np.conj(P(z)), atol=1e-14)


def test_linear_part_roundtrip():
    rng = np.random.default_rng(1)
    U, V = _crand(rng, 3, 3), _crand(rng, 3, 3)
    U2, V2 = CPoly.linear(U, V).linear_part()
    np.testing.assert_allclose(U2, U, atol=1e-15)
    np.testing.assert_allclose(V2, V, atol=1e-15)


def test_invert_real_linear():
    rng = np.random.default_rng(2)
    U, V = np.eye(3) + 0.3 * _crand(rng, 3, 3), 0.3 * _crand(rng, 3, 3)
    Ui, Vi = invert_real_linear(U, V)
    z = _crand(rng, 3)
    w = U @ z + V @ np.conj(z)
    np.testing.assert_allclose(Ui @ w + Vi @ np.conj(w), z, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_compose_matches_evaluation(n, seed):
    rng = np.random.default_rng(seed)
    P, Q = _random_map(rng, n), _random_map(rng, n)
    z = 0.3 * _crand(rng, n)
    np.testing.assert_allclose(P.compose(Q, 4)(z), P(Q(z)), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(0, 2 ** 31 - 1))
def test_inverse_to_order(n, seed):
    rng = np.random.default_rng(seed)
    P = _random_map(rng, n)
    Q = P.inverse(5)
    ident = CPoly.identity(n)
    for k in range(6):
        diff = (P.compose(Q, 5) - ident).degree_part(k)
        assert diff.max_coeff() <= 1e-10 * max(1.0, P.max_coeff()) ** (k + 2)


def test_inverse_error_shrinks_with_radius():
    rng = np.random.default_rng(3)
    P = _random_map(rng, 2)
    Q = P.inverse(4)
    errs = []
    for r in (0.1, 0.05):
        z = r * np.array([1.0 + 0.5j, -0.3 + 0.8j])
        errs.append(np.linalg.norm(Q(P(z)) - z))
    assert errs[1] <= errs[0] / 16


def test_is_holomorphic():
    assert CPoly.identity(2).is_holomorphic()
    assert not CPoly.coordinate(2, 0, conj=True).is_holomorphic()


def test_majorant_bounds_values():
    rng = np.random.default_rng(4)
    P = _random_map(rng, 2)
    z = 0.4 * _crand(rng, 2)
    assert np.all(np.abs(P(z)) <= P.majorant(np.abs(z)) + 1e-14)


def test_fit_recovers_polynomial():
    rng = np.random.default_rng(5)
    P = _random_map(rng, 2)
    zs = _crand(rng, 60, 2)
    values = np.array([P(z) for z in zs])
    F = fit_polynomial(zs, values, [1, 2])
    for key, c in P.terms.items():
        np.testing.assert_allclose(F.terms[key], c, atol=1e-10)


def test_fit_homogeneous_and_sample_count():
    rng = np.random.default_rng(6)
    zs = _crand(rng, 10, 2)
    F = fit_homogeneous(zs, zs[:, 0] * np.conj(zs[:, 1]), 2)
    assert F.terms[((0, 1), (1, 0))][0] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_polynomial(zs[:3], zs[:3, 0], [2])


def test_bidegree_parts_sum_to_map():
    rng = np.random.default_rng(7)
    P = _random_map(rng, 2)
    parts = bidegree_parts(P)
    assert set(parts) == {(0, 1), (1, 0), (0, 2), (1, 1), (2, 0)}
    z = _crand(rng, 2)
    np.testing.assert_allclose(sum(p(z) for p in parts.values()), P(z), atol=1e-14)


def test_compose_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        CPoly.identity(2).compose(CPoly.constant(2, [1.0, 2.0, 3.0]), 2)


def test_to_list_format():
    out = CPoly.coordinate(1, 0).to_list()
    assert out == [{"alpha": [0], "beta": [1], "coeff": [[1.0, 0.0]]}]
