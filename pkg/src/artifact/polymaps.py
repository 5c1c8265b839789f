"""Polynomials in (conj z, z) on C^n with scalar or vector coefficients.

A term c * conj(z)^alpha * z^beta is stored under the key (alpha, beta);
coefficients are complex arrays of shape (m,).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

Key = tuple  # (alpha, beta)


def _zero(n: int) -> tuple:
    return (0,) * n


def multi_indices(n: int, k: int) -> list[tuple]:
    """All multi-indices of length n and total degree k."""
    out = []
    for combo in itertools.combinations_with_replacement(range(n), k):
        idx = [0] * n
        for c in combo:
            idx[c] += 1
        out.append(tuple(idx))
    return out


def monomial_keys(n: int, k: int) -> list[Key]:
    """Keys (alpha, beta) with |alpha| + |beta| = k."""
    out = []
    for q in range(k + 1):
        for a in multi_indices(n, q):
            for b in multi_indices(n, k - q):
                out.append((a, b))
    return out


def key_degree(key: Key) -> int:
    return sum(key[0]) + sum(key[1])


@dataclass
class CPoly:
    n: int
    m: int
    terms: dict = field(default_factory=dict)

    # construction -----------------------------------------------------------------
    @classmethod
    def zero(cls, n: int, m: int) -> "CPoly":
        return cls(n, m, {})

    @classmethod
    def constant(cls, n: int, c) -> "CPoly":
        c = np.atleast_1d(np.asarray(c, dtype=complex))
        return cls(n, len(c), {(_zero(n), _zero(n)): c})

    @classmethod
    def identity(cls, n: int) -> "CPoly":
        return cls.linear(np.eye(n), np.zeros((n, n)))

    @classmethod
    def linear(cls, U: np.ndarray, V: Optional[np.ndarray] = None) -> "CPoly":
        """z -> U z + V conj(z)."""
        U = np.asarray(U, dtype=complex)
        m, n = U.shape
        out = cls(n, m, {})
        for j in range(n):
            e = tuple(1 if i == j else 0 for i in range(n))
            out._add_term((_zero(n), e), U[:, j])
            if V is not None:
                out._add_term((e, _zero(n)), np.asarray(V, dtype=complex)[:, j])
        return out.prune()

    @classmethod
    def coordinate(cls, n: int, i: int, conj: bool = False) -> "CPoly":
        e = tuple(1 if j == i else 0 for j in range(n))
        key = (e, _zero(n)) if conj else (_zero(n), e)
        return cls(n, 1, {key: np.ones(1, dtype=complex)})

    # algebra ----------------------------------------------------------------------
    def copy(self) -> "CPoly":
        return CPoly(self.n, self.m, {k: v.copy() for k, v in self.terms.items()})

    def _add_term(self, key: Key, c) -> None:
        c = np.asarray(c, dtype=complex).reshape(-1)
        if key in self.terms:
            self.terms[key] = self.terms[key] + c
        else:
            self.terms[key] = c.copy()

    def prune(self, tol: float = 0.0) -> "CPoly":
        self.terms = {k: v for k, v in self.terms.items() if np.max(np.abs(v)) > tol}
        return self

    def __add__(self, other: "CPoly") -> "CPoly":
        out = self.copy()
        for k, v in other.terms.items():
            out._add_term(k, v)
        out.m = max(self.m, other.m)
        return out

    def __neg__(self) -> "CPoly":
        return self * -1.0

    def __sub__(self, other: "CPoly") -> "CPoly":
        return self + (-other)

    def __mul__(self, c) -> "CPoly":
        if isinstance(c, CPoly):
            return self.product(c)
        return CPoly(self.n, self.m, {k: v * c for k, v in self.terms.items()})

    __rmul__ = __mul__

    def product(self, other: "CPoly", max_degree: Optional[int] = None) -> "CPoly":
        """Product with broadcasting of scalar (m = 1) coefficients."""
        out = CPoly(self.n, max(self.m, other.m), {})
        for (a1, b1), c1 in self.terms.items():
            d1 = sum(a1) + sum(b1)
            for (a2, b2), c2 in other.terms.items():
                if max_degree is not None and d1 + sum(a2) + sum(b2) > max_degree:
                    continue
                key = (tuple(x + y for x, y in zip(a1, a2)), tuple(x + y for x, y in zip(b1, b2)))
                out._add_term(key, c1 * c2)
        return out

    def component(self, i: int) -> "CPoly":
        return CPoly(self.n, 1, {k: v[i:i + 1].copy() for k, v in self.terms.items()})

    @classmethod
    def stack(cls, comps: list["CPoly"]) -> "CPoly":
        n = comps[0].n
        out = cls(n, len(comps), {})
        keys = set().union(*[c.terms.keys() for c in comps])
        for k in keys:
            out.terms[k] = np.array([c.terms[k][0] if k in c.terms else 0.0 for c in comps], dtype=complex)
        return out

    def conj(self) -> "CPoly":
        """The polynomial z -> conj(f(z))."""
        return CPoly(self.n, self.m, {(b, a): np.conj(v) for (a, b), v in self.terms.items()})

    def degree_part(self, k: int) -> "CPoly":
        return CPoly(self.n, self.m, {key: v.copy() for key, v in self.terms.items() if key_degree(key) == k})

    def truncate(self, max_degree: int) -> "CPoly":
        return CPoly(self.n, self.m, {key: v.copy() for key, v in self.terms.items() if key_degree(key) <= max_degree})

    @property
    def degree(self) -> int:
        return max((key_degree(k) for k in self.terms), default=0)

    def linear_part(self) -> tuple[np.ndarray, np.ndarray]:
        """(U, V) with the degree-one part z -> U z + V conj(z)."""
        U = np.zeros((self.m, self.n), dtype=complex)
        V = np.zeros((self.m, self.n), dtype=complex)
        for (a, b), c in self.terms.items():
            if sum(a) + sum(b) != 1:
                continue
            if sum(b) == 1:
                U[:, b.index(1)] += c
            else:
                V[:, a.index(1)] += c
        return U, V

    def is_holomorphic(self, tol: float = 0.0) -> bool:
        return all(sum(a) == 0 or np.max(np.abs(c)) <= tol for (a, b), c in self.terms.items())

    def majorant(self, r: np.ndarray) -> np.ndarray:
        """Sum of |coefficients| times |z|^(alpha + beta) at radii r."""
        r = np.abs(np.asarray(r, dtype=float))
        out = np.zeros(self.m)
        for (a, b), c in self.terms.items():
            out = out + np.abs(c) * np.prod(r ** (np.array(a) + np.array(b)))
        return out

    def max_coeff(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.terms.values()), default=0.0)

    # evaluation -------------------------------------------------------------------
    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        zb = np.conj(z)
        out = np.zeros(self.m, dtype=complex)
        for (a, b), c in self.terms.items():
            out = out + c * np.prod(zb ** np.array(a)) * np.prod(z ** np.array(b))
        return out

    def compose(self, g: "CPoly", max_degree: int) -> "CPoly":
        """self(g(z)), truncated at max_degree; g maps C^n -> C^n."""
        if g.m != self.n:
            raise ValueError("inner map has the wrong dimension")
        gc = [g.component(i) for i in range(self.n)]
        gb = [c.conj() for c in gc]
        one = CPoly.constant(g.n, 1.0)
        cache: dict = {}

        def power(i: int, e: int, bar: bool) -> CPoly:
            key = (i, e, bar)
            if key not in cache:
                if e == 0:
                    cache[key] = one
                else:
                    cache[key] = power(i, e - 1, bar).product(gb[i] if bar else gc[i], max_degree)
            return cache[key]

        out = CPoly(g.n, self.m, {})
        for (a, b), c in self.terms.items():
            t = CPoly.constant(g.n, 1.0)
            for i in range(self.n):
                if a[i]:
                    t = t.product(power(i, a[i], True), max_degree)
                if b[i]:
                    t = t.product(power(i, b[i], False), max_degree)
            for k, v in t.terms.items():
                out._add_term(k, v[0] * c)
        return out.truncate(max_degree)

    def inverse(self, max_degree: int) -> "CPoly":
        """Formal inverse map to the given degree; needs P(0) = 0 and an invertible linear part."""
        U, V = self.linear_part()
        Ui, Vi = invert_real_linear(U, V)
        Linv = CPoly.linear(Ui, Vi)
        nonlin = self - CPoly.linear(U, V)
        nonlin = CPoly(self.n, self.m, {k: v for k, v in nonlin.terms.items() if key_degree(k) >= 2})
        Q = Linv
        ident = CPoly.identity(self.n)
        for _ in range(max_degree):
            Q = Linv.compose(ident - nonlin.compose(Q, max_degree), max_degree)
        return Q.prune()

    def to_list(self) -> list:
        return [{"alpha": list(a), "beta": list(b), "coeff": [[float(x.real), float(x.imag)] for x in c]}
                for (a, b), c in sorted(self.terms.items())]


def invert_real_linear(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of z -> U z + V conj(z) in the same form."""
    n = U.shape[0]
    R = np.block([[(U + V).real, (-U + V).imag], [(U + V).imag, (U - V).real]])
    Ri = np.linalg.inv(R)
    A, B = Ri[:n, :n], Ri[:n, n:]
    C, D = Ri[n:, :n], Ri[n:, n:]
    # y = x_re + i x_im ; z = (A + iC) y_re + (B + iD) y_im
    P = A + 1j * C
    Q = B + 1j * D
    return 0.5 * (P - 1j * Q), 0.5 * (P + 1j * Q)


def fit_homogeneous(zs: np.ndarray, values: np.ndarray, k: int) -> CPoly:
    """Least-squares coefficients of a homogeneous polynomial of degree k from samples."""
    return fit_polynomial(zs, values, [k])


def fit_polynomial(zs: np.ndarray, values: np.ndarray, degrees: Iterable[int]) -> CPoly:
    """Least-squares coefficients of a polynomial with the given homogeneous degrees."""
    zs = np.asarray(zs, dtype=complex)
    values = np.asarray(values, dtype=complex)
    if values.ndim == 1:
        values = values[:, None]
    s, n = zs.shape
    keys = [key for k in degrees for key in monomial_keys(n, k)]
    if s < len(keys):
        raise ValueError(f"need at least {len(keys)} samples, got {s}")
    zb = np.conj(zs)
    D = np.empty((s, len(keys)), dtype=complex)
    for j, (a, b) in enumerate(keys):
        D[:, j] = np.prod(zb ** np.array(a), axis=1) * np.prod(zs ** np.array(b), axis=1)
    coef, *_ = np.linalg.lstsq(D, values, rcond=None)
    out = CPoly(n, values.shape[1], {})
    for j, key in enumerate(keys):
        out.terms[key] = coef[j].copy()
    return out


def bidegree_parts(P: CPoly) -> dict:
    """Split into parts homogeneous of degree q in conj z and p in z, keyed (q, p)."""
    out: dict = {}
    for (a, b), c in P.terms.items():
        out.setdefault((sum(a), sum(b)), CPoly(P.n, P.m, {}))._add_term((a, b), c)
    return out
