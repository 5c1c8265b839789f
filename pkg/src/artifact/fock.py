"""Truncated bosonic Fock space in the occupation-number basis.

States with total particle number <= n_max are enumerated by total number,
then lexicographically with higher occupation of earlier modes first:
(0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...

Elements of F* x F are stored as a matrix W with W[a, b] = conj(bra_a) ket_b.
A ket operator O acts as W -> W O^T, a bra operator as W -> conj(O) W.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import gammainc


class BasisMismatch(ValueError):
    pass


class FockBasis:
    def __init__(self, d: int, n_max: int):
        if d < 1 or n_max < 0:
            raise ValueError("need d >= 1 and n_max >= 0")
        self.d = int(d)
        self.n_max = int(n_max)
        states = []
        for n in range(self.n_max + 1):
            level = [s for s in itertools.product(range(n, -1, -1), repeat=self.d) if sum(s) == n]
            level.sort(key=lambda s: tuple(-x for x in s))
            states.extend(level)
        self.states: list[tuple[int, ...]] = states
        self.index = {s: i for i, s in enumerate(states)}
        self.occ = np.array(states, dtype=int).reshape(len(states), self.d)
        self.number = self.occ.sum(axis=1)

    @property
    def dim(self) -> int:
        return len(self.states)

    def __eq__(self, other) -> bool:
        return isinstance(other, FockBasis) and (self.d, self.n_max) == (other.d, other.n_max)

    def __hash__(self) -> int:
        return hash((self.d, self.n_max))

    @cached_property
    def a_dag(self) -> list[sp.csr_matrix]:
        out = []
        for k in range(self.d):
            rows, cols, vals = [], [], []
            for j, s in enumerate(self.states):
                if self.number[j] == self.n_max:
                    continue
                t = list(s)
                t[k] += 1
                rows.append(self.index[tuple(t)])
                cols.append(j)
                vals.append(math.sqrt(t[k]))
            out.append(sp.csr_matrix((vals, (rows, cols)), shape=(self.dim, self.dim)))
        return out

    @cached_property
    def a(self) -> list[sp.csr_matrix]:
        return [m.T.tocsr() for m in self.a_dag]

    def sector_mask(self, n: int) -> np.ndarray:
        return self.number == n

    def vacuum(self) -> "FockVector":
        c = np.zeros(self.dim, dtype=complex)
        c[0] = 1.0
        return FockVector(self, c)

    def basis_vector(self, occupation: Sequence[int]) -> "FockVector":
        c = np.zeros(self.dim, dtype=complex)
        c[self.index[tuple(occupation)]] = 1.0
        return FockVector(self, c)


@dataclass
class FockVector:
    basis: FockBasis
    coeffs: np.ndarray
    loss: float = 0.0
    tail: float = 0.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape != (self.basis.dim,):
            raise ValueError("coefficient vector does not match basis")

    def norm2(self) -> float:
        return float(np.real(np.vdot(self.coeffs, self.coeffs)))

    def __add__(self, other: "FockVector") -> "FockVector":
        _same(self.basis, other.basis)
        return FockVector(self.basis, self.coeffs + other.coeffs, self.loss + other.loss)

    def __mul__(self, c: complex) -> "FockVector":
        return FockVector(self.basis, c * self.coeffs, self.loss, self.tail)

    __rmul__ = __mul__

    def to_dict(self) -> dict:
        return {"d": self.basis.d, "n_max": self.basis.n_max,
                "coeffs": [[float(z.real), float(z.imag)] for z in self.coeffs]}

    @classmethod
    def from_dict(cls, data: dict) -> "FockVector":
        b = FockBasis(data["d"], data["n_max"])
        c = np.array([complex(re, im) for re, im in data["coeffs"]])
        return cls(b, c)


def _same(b1: FockBasis, b2: FockBasis) -> None:
    if b1 != b2:
        raise BasisMismatch(f"basis mismatch: (d={b1.d}, N={b1.n_max}) vs (d={b2.d}, N={b2.n_max})")


def creation_matrix(basis: FockBasis, phi: np.ndarray) -> sp.csr_matrix:
    phi = np.asarray(phi, dtype=complex)
    out = sp.csr_matrix((basis.dim, basis.dim), dtype=complex)
    for k in range(basis.d):
        if phi[k] != 0:
            out = out + phi[k] * basis.a_dag[k]
    return out


def annihilation_matrix(basis: FockBasis, phi: np.ndarray) -> sp.csr_matrix:
    """Matrix of a(conj phi) = sum_k conj(phi_k) a_k."""
    return creation_matrix(basis, phi).conj().T.tocsr()


def creation(basis: FockBasis, phi: np.ndarray, state: FockVector) -> FockVector:
    """a^dag(phi) state; amplitude pushed above n_max is dropped and its norm^2 added to loss."""
    _same(basis, state.basis)
    phi = np.asarray(phi, dtype=complex)
    out = creation_matrix(basis, phi) @ state.coeffs
    top = np.where(basis.number == basis.n_max, state.coeffs, 0)
    # exact overflow norm from the commutation relation: |phi|^2 |top|^2 + |a(phi) top|^2
    overflow = np.real(np.vdot(phi, phi)) * np.real(np.vdot(top, top))
    ann_top = annihilation_matrix(basis, phi) @ top
    overflow += np.real(np.vdot(ann_top, ann_top))
    return FockVector(basis, out, state.loss + float(overflow))


def annihilation(basis: FockBasis, phi: np.ndarray, state: FockVector) -> FockVector:
    _same(basis, state.basis)
    return FockVector(basis, annihilation_matrix(basis, phi) @ state.coeffs, state.loss)


def ccr_residual(basis: FockBasis, phi: np.ndarray, psi: np.ndarray) -> float:
    """Operator norm of [a(conj phi), a^dag(psi)] - <phi|psi> on sectors n < n_max."""
    A = annihilation_matrix(basis, phi).toarray()
    B = creation_matrix(basis, psi).toarray()
    C = A @ B - B @ A - np.vdot(phi, psi) * np.eye(basis.dim)
    keep = basis.number < basis.n_max
    return float(np.linalg.norm(C[np.ix_(keep, keep)], 2))


def ccr_boundary_residual(basis: FockBasis, phi: np.ndarray, psi: np.ndarray) -> float:
    """Same commutator restricted to the top sector n = n_max (truncation artifact)."""
    A = annihilation_matrix(basis, phi).toarray()
    B = creation_matrix(basis, psi).toarray()
    C = A @ B - B @ A - np.vdot(phi, psi) * np.eye(basis.dim)
    top = basis.number == basis.n_max
    return float(np.linalg.norm(C[np.ix_(top, top)], 2))


def exp_tail(x: float, n_max: int) -> float:
    """sum_{k > n_max} x^k / k!  for x >= 0."""
    if x <= 0:
        return 0.0
    return float(math.exp(x) * gammainc(n_max + 1, x))


def coherent_amplitudes(basis: FockBasis, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    fact = np.array([math.prod(math.factorial(n) for n in s) for s in basis.states], dtype=float)
    return np.prod(z[None, :] ** basis.occ, axis=1) / np.sqrt(fact)


def coherent(basis: FockBasis, z: np.ndarray) -> FockVector:
    """sum_n z^n / sqrt(n!) truncated at n_max, with the norm^2 tail attached."""
    z = np.asarray(z, dtype=complex)
    nz = float(np.real(np.vdot(z, z)))
    return FockVector(basis, coherent_amplitudes(basis, z), tail=exp_tail(nz, basis.n_max))


def coherent_overlap_tail(phi: np.ndarray, z: np.ndarray, n_max: int) -> float:
    """Bound on |<Y(phi)|Y(z)> - exp<phi|z>| from truncation."""
    return exp_tail(float(np.linalg.norm(phi) * np.linalg.norm(z)), n_max)


def overlap(x: FockVector, y: FockVector) -> complex:
    _same(x.basis, y.basis)
    return complex(np.vdot(x.coeffs, y.coeffs))


def symmetrized_product(basis: FockBasis, occupation: Sequence[int]) -> FockVector:
    """(e_1^{p_1} x ... x e_d^{p_d})_s as a Fock vector; its norm^2 is p_1!...p_d!/n!."""
    n = sum(occupation)
    c = math.sqrt(math.prod(math.factorial(p) for p in occupation) / math.factorial(n))
    return basis.basis_vector(occupation) * c


def exp_creation(basis: FockBasis, z: np.ndarray) -> FockVector:
    """exp(a^dag(z)) |0>, by summing the truncated power series."""
    term = basis.vacuum()
    out = term
    M = creation_matrix(basis, z)
    for k in range(1, basis.n_max + 1):
        term = FockVector(basis, (M @ term.coeffs) / k)
        out = out + term
    return out


# ---------------------------------------------------------------------------
# Wick polynomials on F and on F* x F

KET_ANN, KET_DAG, BRA_ANN, BRA_DAG = "a", "a+", "abar", "abar+"
_KINDS = (KET_ANN, KET_DAG, BRA_ANN, BRA_DAG)


@dataclass(frozen=True)
class WickMonomial:
    coeff: complex
    dag: tuple = ()
    ann: tuple = ()
    bra_dag: tuple = ()
    bra_ann: tuple = ()

    def key(self) -> tuple:
        return (self.dag, self.ann, self.bra_dag, self.bra_ann)

    @property
    def is_holomorphic(self) -> bool:
        return not self.bra_dag and not self.bra_ann


@dataclass
class WickPolynomial:
    terms: list = field(default_factory=list)

    def __add__(self, other: "WickPolynomial") -> "WickPolynomial":
        return WickPolynomial(self.terms + other.terms).simplify()

    def __mul__(self, c: complex) -> "WickPolynomial":
        return WickPolynomial([WickMonomial(t.coeff * c, *t.key()) for t in self.terms])

    __rmul__ = __mul__

    def simplify(self, tol: float = 0.0) -> "WickPolynomial":
        acc: dict = {}
        for t in self.terms:
            acc[t.key()] = acc.get(t.key(), 0) + t.coeff
        return WickPolynomial([WickMonomial(c, *k) for k, c in acc.items() if abs(c) > tol])

    @classmethod
    def identity(cls) -> "WickPolynomial":
        return cls([WickMonomial(1.0)])


def wick_order(words: Iterable[tuple[complex, Sequence[tuple[str, int]]]]) -> WickPolynomial:
    """Normal-order words of ladder symbols without contraction terms.

    Each word is (coeff, [(kind, mode), ...]) with kind in {"a", "a+", "abar", "abar+"}.
    Creation symbols go left of annihilation symbols; bra and ket factors
    commute; repeated modes are sorted in increasing mode order.
    """
    out = []
    for coeff, ops in words:
        groups = {k: [] for k in _KINDS}
        for kind, mode in ops:
            if kind not in groups:
                raise ValueError(f"unknown ladder symbol {kind!r}")
            groups[kind].append(int(mode))
        out.append(WickMonomial(complex(coeff), tuple(sorted(groups[KET_DAG])), tuple(sorted(groups[KET_ANN])),
                                tuple(sorted(groups[BRA_DAG])), tuple(sorted(groups[BRA_ANN]))))
    return WickPolynomial(out).simplify()


@dataclass
class BraKetState:
    basis: FockBasis
    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=complex)
        if self.W.shape != (self.basis.dim, self.basis.dim):
            raise ValueError("state matrix does not match basis")

    @classmethod
    def from_pair(cls, bra: FockVector, ket: FockVector) -> "BraKetState":
        _same(bra.basis, ket.basis)
        return cls(bra.basis, np.outer(np.conj(bra.coeffs), ket.coeffs))

    def one(self) -> complex:
        """The expectation of the identity, sum_a conj(bra_a) ket_a."""
        return complex(np.trace(self.W))

    def expectation(self, O: np.ndarray) -> complex:
        """<bra| O |ket> extended linearly."""
        O = O.toarray() if sp.issparse(O) else np.asarray(O)
        return complex(np.sum(self.W * O))

    def __add__(self, other: "BraKetState") -> "BraKetState":
        _same(self.basis, other.basis)
        return BraKetState(self.basis, self.W + other.W)

    def __sub__(self, other: "BraKetState") -> "BraKetState":
        return self + other * (-1.0)

    def __mul__(self, c: complex) -> "BraKetState":
        return BraKetState(self.basis, c * self.W)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.linalg.norm(self.W))


def _ket(W: np.ndarray, M: sp.csr_matrix) -> np.ndarray:
    return (M @ W.T).T


def _bra(W: np.ndarray, M: sp.csr_matrix) -> np.ndarray:
    return M.conj() @ W


def _apply_modes(basis: FockBasis, W: np.ndarray, ket_modes: tuple, bra_modes: tuple, creators: bool) -> np.ndarray:
    mats = basis.a_dag if creators else basis.a
    for k in ket_modes:
        W = _ket(W, mats[k])
    for k in bra_modes:
        W = _bra(W, mats[k])
    return W


def apply_monomial(basis: FockBasis, m: WickMonomial, W: np.ndarray) -> np.ndarray:
    """Three steps: annihilators on bra and ket, then creators on both."""
    W = _apply_modes(basis, W, m.ann, m.bra_ann, creators=False)
    if not np.any(W):
        return W
    W = _apply_modes(basis, W, m.dag, m.bra_dag, creators=True)
    return m.coeff * W


def apply_wick_matrix(basis: FockBasis, poly: WickPolynomial, W: np.ndarray) -> np.ndarray:
    out = np.zeros_like(W, dtype=complex)
    for m in poly.terms:
        out = out + apply_monomial(basis, m, W)
    return out


def apply_wick(poly: WickPolynomial, state: BraKetState) -> BraKetState:
    return BraKetState(state.basis, apply_wick_matrix(state.basis, poly, state.W))


def apply_wick_ket(poly: WickPolynomial, state: FockVector) -> FockVector:
    if any(not m.is_holomorphic for m in poly.terms):
        raise ValueError("polynomial contains bra operators")
    W = apply_wick_matrix(state.basis, poly, state.coeffs[None, :])
    return FockVector(state.basis, W[0])


def wick_matrix(basis: FockBasis, poly: WickPolynomial) -> np.ndarray:
    """Dense matrix on F of a ket-only Wick polynomial."""
    return apply_wick_matrix(basis, poly, np.eye(basis.dim, dtype=complex)).T


def monomial_factors(basis: FockBasis, m: WickMonomial) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Ket and bra operators (creators after annihilators) of one monomial, coefficient excluded."""
    def word(dag, ann):
        M = sp.identity(basis.dim, dtype=complex, format="csr")
        for k in ann:
            M = basis.a[k] @ M
        for k in dag:
            M = basis.a_dag[k] @ M
        return M.tocsr()
    return word(m.dag, m.ann), word(m.bra_dag, m.bra_ann)


def superoperator(basis: FockBasis, poly: WickPolynomial, rows: Optional[int] = None) -> sp.csr_matrix:
    """Sparse matrix of W -> poly W on row-major flattened W.

    rows = 1 treats W as a single ket row; poly must then be ket-only.
    """
    D = basis.dim
    rows = D if rows is None else rows
    if rows not in (1, D):
        raise ValueError("W must have one row or one row per basis state")
    if rows == 1 and any(not m.is_holomorphic for m in poly.terms):
        raise ValueError("bra operators cannot act on a single ket")
    out = sp.csr_matrix((rows * D, rows * D), dtype=complex)
    for m in poly.terms:
        K, B = monomial_factors(basis, m)
        out = out + m.coeff * (K if rows == 1 else sp.kron(B.conj(), K, format="csr"))
    return out.tocsr()


def field_operator(basis: FockBasis, phi: np.ndarray) -> WickPolynomial:
    """a(conj phi) + a^dag(phi) for one-particle coordinates phi."""
    phi = np.asarray(phi, dtype=complex)
    terms = []
    for k in range(basis.d):
        if phi[k] != 0:
            terms.append(WickMonomial(phi[k], dag=(k,)))
            terms.append(WickMonomial(np.conj(phi[k]), ann=(k,)))
    return WickPolynomial(terms)


# ---------------------------------------------------------------------------
# Normal-ordered exponentials


@dataclass
class NormalExp:
    """:exp( sum_i a+_i A_i + sum_i abar+_i Abar_i + M ):

    A_i, Abar_i and M are Wick polynomials in annihilators only.  The series
    terminates on the truncated space because annihilators are nilpotent.
    """
    A: Sequence[Optional[WickPolynomial]]
    Abar: Sequence[Optional[WickPolynomial]] = ()
    M: Optional[WickPolynomial] = None

    def __post_init__(self):
        for p in list(self.A) + list(self.Abar) + ([self.M] if self.M else []):
            if p is None:
                continue
            for t in p.terms:
                if t.dag or t.bra_dag:
                    raise ValueError("exponent coefficients must contain annihilators only")

    def apply_matrix(self, basis: FockBasis, W: np.ndarray) -> np.ndarray:
        W = np.asarray(W, dtype=complex)
        rows = W.shape[0]
        if self.M is not None and self.M.terms:
            W = _exp_annihilators(basis, self.M, W)
        slots = [(k, False, superoperator(basis, p, rows)) for k, p in enumerate(self.A) if p is not None and p.terms]
        slots += [(k, True, superoperator(basis, p, rows)) for k, p in enumerate(self.Abar)
                  if p is not None and p.terms]
        return _normal_exp_rec(basis, slots, 0, W, (basis.n_max, basis.n_max))

    def apply(self, state: BraKetState) -> BraKetState:
        return BraKetState(state.basis, self.apply_matrix(state.basis, state.W))

    def apply_ket(self, state: FockVector) -> FockVector:
        if any(p is not None and p.terms for p in self.Abar) or (
                self.M is not None and any(not t.is_holomorphic for t in self.M.terms)):
            raise ValueError("bra operators present")
        return FockVector(state.basis, self.apply_matrix(state.basis, state.coeffs[None, :])[0])


def _exp_annihilators(basis: FockBasis, M: WickPolynomial, W: np.ndarray) -> np.ndarray:
    out = W.copy()
    term = W
    op = superoperator(basis, M, W.shape[0])
    for k in range(1, 2 * basis.n_max + 2):
        term = (op @ term.ravel()).reshape(W.shape) / k
        if not np.any(term):
            break
        out = out + term
    return out


def _normal_exp_rec(basis: FockBasis, slots: list, j: int, Y: np.ndarray, budget: tuple) -> np.ndarray:
    """Sum over creation counts of the remaining slots; budget = creations left on (ket, bra)."""
    if j == len(slots):
        return Y
    mode, bra_side, op = slots[j]
    out = _normal_exp_rec(basis, slots, j + 1, Y, budget)
    Z = Y
    create = basis.a_dag[mode]
    left = budget[1] if bra_side else budget[0]
    for m in range(1, left + 1):
        Z = (op @ Z.ravel()).reshape(Z.shape)
        if not np.any(Z):
            break
        nb = (budget[0], budget[1] - m) if bra_side else (budget[0] - m, budget[1])
        R = _normal_exp_rec(basis, slots, j + 1, Z, nb)
        for _ in range(m):
            R = _bra(R, create) if bra_side else _ket(R, create)
        out = out + R / math.factorial(m)
    return out


# ---------------------------------------------------------------------------
# Polarization


@dataclass
class PolarizationResult:
    matrix: np.ndarray
    max_abs: float
    certified_zero: bool
    rank_ok: bool
    condition: float


def polarization_reconstruct(basis: FockBasis, expectation: Callable[[np.ndarray], complex],
                             tol: float = 1e-10, radii: Optional[np.ndarray] = None) -> PolarizationResult:
    """Recover A from f(z) = <Y(z)|A|Y(z)> on truncated coherent states.

    z_k = r_k e^{i alpha_k}: a discrete Fourier transform in each alpha_k
    isolates the occupation difference n_k - m_k, and a Vandermonde solve in
    r_k^2 isolates min(m_k, n_k).  The result is the matrix of A in the
    occupation basis.
    """
    d, N = basis.d, basis.n_max
    L = 2 * N + 1
    if radii is None:
        n_r = 2 * N + 2
        radii = np.sqrt(2.5 * (1 + np.cos(np.pi * (np.arange(n_r) + 0.5) / n_r)))
    R = len(radii)
    if R < N + 1:
        return PolarizationResult(np.zeros((basis.dim, basis.dim), complex), np.nan, False, False, np.inf)
    phases = np.exp(2j * np.pi * np.arange(L) / L)
    samples = np.zeros((R,) * d + (L,) * d, dtype=complex)
    for ridx in itertools.product(range(R), repeat=d):
        r = radii[list(ridx)]
        for pidx in itertools.product(range(L), repeat=d):
            samples[ridx + pidx] = expectation(r * phases[list(pidx)])
    # Fourier in phases: component at frequency delta_k = n_k - m_k
    F = np.fft.fftn(samples, axes=tuple(range(d, 2 * d))) / L ** d
    pinvs = {}
    cond = 0.0
    for e in range(N + 1):
        V = radii[:, None] ** (e + 2 * np.arange(N + 1))[None, :]
        colscale = np.max(np.abs(V), axis=0)
        cond = max(cond, float(np.linalg.cond(V / colscale)))
        pinvs[e] = np.linalg.pinv(V / colscale) / colscale[:, None]
    A = np.zeros((basis.dim, basis.dim), dtype=complex)
    fact = np.array([math.prod(math.factorial(x) for x in s) for s in basis.states], dtype=float)
    for delta in itertools.product(range(-N, N + 1), repeat=d):
        fidx = tuple(dk % L for dk in delta)
        c = F[(slice(None),) * d + fidx]
        for k in range(d):
            c = np.moveaxis(np.tensordot(pinvs[abs(delta[k])], c, axes=([1], [k])), 0, k)
        # c[j_1..j_d] multiplies prod r_k^{2 j_k}, j_k = min(m_k, n_k)
        for j in itertools.product(range(N + 1), repeat=d):
            m = tuple(jk + max(0, -dk) for jk, dk in zip(j, delta))
            n = tuple(jk + max(0, dk) for jk, dk in zip(j, delta))
            if m in basis.index and n in basis.index:
                im, in_ = basis.index[m], basis.index[n]
                A[im, in_] = c[j] * math.sqrt(fact[im] * fact[in_])
    mx = float(np.max(np.abs(A))) if A.size else 0.0
    return PolarizationResult(A, mx, mx <= tol, True, cond)


def coherent_expectation_fn(basis: FockBasis, O: np.ndarray) -> Callable[[np.ndarray], complex]:
    O = O.toarray() if sp.issparse(O) else np.asarray(O)

    def f(z):
        v = coherent_amplitudes(basis, z)
        return complex(np.conj(v) @ O @ v)
    return f
