"""Complex structures on a finite-dimensional space of linearized solutions.

From the Gram matrices G (surface layer inner product) and Sg (symplectic
form) we build T = G^{-1} Sg, the polar complex structure
J = -(-T^2)^{-1/2} T, the holomorphic projectors and the one-particle scalar
product.  A second construction takes a symplectic evolution U and splits its
eigenvectors by the sign of their Krein norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cvp_core import Jet
from .linfield import JetCalculus
from .surface_layers import inner_product_t, sigma_t


class GramError(ValueError):
    pass


@dataclass(frozen=True)
class SolutionBasis:
    jets: tuple

    def __post_init__(self):
        if len(self.jets) == 0:
            raise ValueError("empty solution basis")

    @property
    def dim(self) -> int:
        return len(self.jets)

    def combine(self, coeffs: np.ndarray) -> Jet:
        out = self.jets[0] * float(coeffs[0])
        for c, j in zip(coeffs[1:], self.jets[1:]):
            out = out + j * float(c)
        return out


def grams(calc: JetCalculus, basis: SolutionBasis, t: int, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """G_ij = (b_i, b_j)^t and Sg_ij = sigma^t(b_i, b_j)."""
    n = basis.dim
    G = np.zeros((n, n))
    S = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            G[i, j] = G[j, i] = inner_product_t(calc, basis.jets[i], basis.jets[j], t)
            if j > i:
                S[i, j] = sigma_t(calc, basis.jets[i], basis.jets[j], t)
                S[j, i] = -S[i, j]
    if check:
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 1e-12 * max(1.0, abs(ev[-1])):
            raise GramError(f"surface layer Gram matrix not positive definite (min eigenvalue {ev[0]:.3e}); "
                            "restrict the space of varied jets")
    return G, S


def build_T(G: np.ndarray, Sg: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(G, Sg)
    except np.linalg.LinAlgError as e:
        raise GramError("singular Gram matrix") from e


def _sym_sqrt_inv(A: np.ndarray, G: Optional[np.ndarray]) -> np.ndarray:
    """A^{-1/2} for A self-adjoint and positive w.r.t. G (or diagonalizable with positive spectrum)."""
    if G is not None:
        L = np.linalg.cholesky(G)
        Li = np.linalg.inv(L)
        B = L.T @ A @ Li.T
        B = 0.5 * (B + B.T)
        w, V = np.linalg.eigh(B)
        if w[0] <= 0:
            raise GramError("-T^2 is not positive definite")
        return Li.T @ (V * w ** -0.5) @ V.T @ L.T
    w, V = np.linalg.eig(A)
    if np.any(np.abs(w.imag) > 1e-10 * np.abs(w).max()) or np.any(w.real <= 0):
        raise GramError("-T^2 is not positive definite")
    return np.real(V @ np.diag(w.real ** -0.5) @ np.linalg.inv(V))


def build_J(T: np.ndarray, G: Optional[np.ndarray] = None) -> np.ndarray:
    """J = -(-T^2)^{-1/2} T."""
    return -_sym_sqrt_inv(-T @ T, G) @ T


def hol_projectors(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    I = np.eye(len(J))
    return 0.5 * (I - 1j * J), 0.5 * (I + 1j * J)


def one_particle_product(G: np.ndarray, Sg: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Hermitian matrix H1 with <x|y> = x^* H1 y on holomorphic vectors.

    H1 = 2 Sg J, so that <P_hol u | P_hol v> = sigma(u, J v) + i sigma(u, v)
    for real u, v.
    """
    S = Sg @ J
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S)[0] <= 0:
        raise GramError("sigma(., J .) is not positive definite")
    return 2.0 * S.astype(complex)


def hol_inner(H1: np.ndarray, P_hol: np.ndarray, u: np.ndarray, v: np.ndarray) -> complex:
    x = P_hol @ u
    y = P_hol @ v
    return complex(np.conj(x) @ H1 @ y)


@dataclass
class StructurePack:
    G: np.ndarray
    Sg: np.ndarray
    T: np.ndarray
    J: np.ndarray
    P_hol: np.ndarray
    P_ah: np.ndarray
    H1: np.ndarray
    Z: np.ndarray = field(default=None)

    def residuals(self) -> dict:
        I = np.eye(len(self.J))
        return {
            "J2": float(np.max(np.abs(self.J @ self.J + I))),
            "JtG": float(np.max(np.abs(self.J.T @ self.G + self.G @ self.J))),
            "GT_Sg": float(np.max(np.abs(self.G @ self.T - self.Sg))),
            "proj": float(np.max(np.abs(self.P_hol @ self.P_hol - self.P_hol))),
        }

    def to_dict(self) -> dict:
        def c(A):
            return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(A, dtype=complex)]
        return {"G": self.G.tolist(), "Sg": self.Sg.tolist(), "T": self.T.tolist(), "J": self.J.tolist(),
                "P_hol": c(self.P_hol), "H1": c(self.H1), "residuals": self.residuals()}


def hol_coordinates(H1: np.ndarray, P_hol: np.ndarray) -> np.ndarray:
    """Z (n x d) with (Z u)^*(Z v) = <P_hol u|P_hol v> and Z J = i Z.

    The basis of the holomorphic subspace is obtained by orthonormalizing
    P_hol e_1, P_hol e_2, ... in order, so site-local data give site-local modes.
    """
    d = len(P_hol)
    n = d // 2
    cols = []
    for k in range(d):
        v = P_hol[:, k].copy()
        for e in cols:
            v = v - e * (np.conj(e) @ H1 @ v)
        nrm = np.real(np.conj(v) @ H1 @ v)
        if nrm > 1e-10 * max(1.0, np.real(np.conj(P_hol[:, k]) @ H1 @ P_hol[:, k])):
            cols.append(v / np.sqrt(nrm))
        if len(cols) == n:
            break
    E = np.array(cols).T
    return np.conj(E).T @ H1 @ P_hol


def structure_pack(G: np.ndarray, Sg: np.ndarray) -> StructurePack:
    T = build_T(G, Sg)
    J = build_J(T, G)
    P, Q = hol_projectors(J)
    H1 = one_particle_product(G, Sg, J)
    return StructurePack(G, Sg, T, J, P, Q, H1, hol_coordinates(H1, P))


# ---------------------------------------------------------------------------
# Krein-space construction


@dataclass(frozen=True)
class KreinEvolution:
    U: np.ndarray
    Sg: np.ndarray

    @property
    def K(self) -> np.ndarray:
        """Hermitian Krein form matrix: <u|v> = Im sigma(conj u, v) on the diagonal."""
        return -1j * self.Sg

    def unitarity_defect(self) -> float:
        K = self.K
        return float(np.max(np.abs(np.conj(self.U).T @ K @ self.U - K)))


@dataclass
class CanonicalJ:
    J: Optional[np.ndarray]
    eigenvalues: np.ndarray
    krein_norms: np.ndarray
    clusters: list
    diagnostic: str = ""

    @property
    def ok(self) -> bool:
        return self.J is not None


def _clusters(w: np.ndarray, tol: float) -> list[list[int]]:
    out: list[list[int]] = []
    for i in np.argsort(np.angle(w) + 10 * np.abs(w)):
        for c in out:
            if abs(w[c[0]] - w[i]) <= tol * max(1.0, abs(w[i])):
                c.append(int(i))
                break
        else:
            out.append([int(i)])
    return out


def canonical_J(ev: KreinEvolution, tol: float = 1e-8) -> CanonicalJ:
    """J = i Pi_+ - i Pi_- from Krein-definite invariant subspaces of U."""
    U = np.asarray(ev.U, dtype=complex)
    d = len(U)
    w, V = np.linalg.eig(U)
    if np.linalg.matrix_rank(V, tol=1e-10) < d:
        return CanonicalJ(None, w, np.zeros(d), [], "U is not diagonalizable (Jordan block)")
    K = ev.K
    norms = np.real(np.einsum("ij,ik,kj->j", np.conj(V), K, V))
    cl = _clusters(w, tol)
    Vinv = np.linalg.inv(V)
    signs = np.zeros(d)
    problems = []
    for c in cl:
        Vc = V[:, c]
        gram = np.conj(Vc).T @ K @ Vc
        e = np.linalg.eigvalsh(0.5 * (gram + np.conj(gram).T))
        scale = max(1.0, np.max(np.abs(e)))
        if np.all(e > tol * scale):
            signs[c] = 1.0
        elif np.all(e < -tol * scale):
            signs[c] = -1.0
        else:
            kind = "neutral" if np.any(np.abs(e) <= tol * scale) else "indefinite"
            problems.append(f"eigenvalue {w[c[0]]:.6g} (multiplicity {len(c)}): {kind} eigenspace")
    if problems:
        diag = "; ".join(problems)
        if any(len(c) > 1 for c in cl):
            diag += "; degenerate spectrum, J not unique"
        return CanonicalJ(None, w, norms, cl, diag)
    J = V @ np.diag(1j * signs) @ Vinv
    if np.max(np.abs(J.imag)) < 1e-9 * max(1.0, np.max(np.abs(J))) and np.isrealobj(ev.U):
        J = J.real
    return CanonicalJ(J, w, norms, cl, "")


def integrability_check(ev: KreinEvolution, D2P: np.ndarray, tol: float = 1e-10) -> list[dict]:
    """|| Pi_- D2P(phi_l, phi_l') || for positive-norm eigenvectors with distinct eigenvalues.

    D2P has shape (d, d, d): D2P[:, i, j] is the image of (e_i, e_j).  Only
    entries above tol are listed; an empty table means no violation.
    """
    cj = canonical_J(ev)
    if not cj.ok:
        raise ValueError(cj.diagnostic)
    U = np.asarray(ev.U, dtype=complex)
    w, V = np.linalg.eig(U)
    norms = np.real(np.einsum("ij,ik,kj->j", np.conj(V), ev.K, V))
    Vinv = np.linalg.inv(V)
    Pm = V @ np.diag((norms < 0).astype(float)) @ Vinv
    pos = np.flatnonzero(norms > 0)
    table = []
    for a in range(len(pos)):
        for b in range(a + 1, len(pos)):
            i, j = pos[a], pos[b]
            if abs(w[i] - w[j]) <= 1e-8 * max(1.0, abs(w[i])):
                continue
            img = np.einsum("kij,i,j->k", D2P, V[:, i], V[:, j])
            val = float(np.linalg.norm(Pm @ img))
            if val > tol:
                table.append({"l": int(i), "l2": int(j), "lambda_l": complex(w[i]), "lambda_l2": complex(w[j]),
                              "violation": val})
    return table


def _eval_multilinear(P: np.ndarray, args: Sequence[np.ndarray]) -> np.ndarray:
    out = P
    for a in args:
        out = np.tensordot(out, a, axes=([1], [0]))
    return out


def holomorphic_expansion_check(P_series: Sequence[np.ndarray], P_hol: np.ndarray, n_probe: int = 4,
                                seed: int = 0) -> list[float]:
    """Per order p: max over probes of || P_hol P(w..w) - P_hol P(P_hol w..P_hol w) ||.

    P_series[p-1] has shape (d,) + (d,)*p (image index first).  The difference
    collects exactly the terms with at least one anti-holomorphic argument.
    """
    rng = np.random.default_rng(seed)
    d = len(P_hol)
    out = []
    for P in P_series:
        p = P.ndim - 1
        worst = 0.0
        for _ in range(n_probe):
            w = rng.normal(size=d)
            full = P_hol @ _eval_multilinear(P.astype(complex), [w] * p)
            hol = P_hol @ _eval_multilinear(P.astype(complex), [P_hol @ w] * p)
            worst = max(worst, float(np.linalg.norm(full - hol)))
        out.append(worst)
    return out
