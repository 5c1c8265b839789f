"""Surface layer integrals over the slice prefixes Omega^t (sites in slices < t),
their slice-difference identities, the nonlinear surface layer integral, and
correlation measures.

All linear functionals are double sums over x in Omega^t, y outside, weighted
by rho_x rho_y.  Since every integrand Q is antisymmetric, the difference
between consecutive slices equals sum_{x in N^t} rho_x sum_y rho_y Q(x, y),
which is what the `predicted` columns of the slice reports evaluate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cvp_core import DiscreteMeasure, Jet, Kernel, MeasureDeformation, kernel_matrix
from .linfield import (InnerSolution, JetCalculus, LinearizedOperator, inner_from_scalar)


def _cut(calc: JetCalculus, Q: np.ndarray, t: int) -> float:
    inside = calc.measure.grid.past(t)
    r = calc.rho
    return float((r * inside) @ Q @ (r * ~inside))


def _cut_mask(calc: JetCalculus, Q: np.ndarray, inside: np.ndarray) -> float:
    r = calc.rho
    return float((r * inside) @ Q @ (r * ~inside))


def gamma_matrix(calc: JetCalculus, v: Jet) -> np.ndarray:
    return calc.first1(v) - calc.first2(v)


def gamma_t(calc: JetCalculus, v: Jet, t: int) -> float:
    """Conserved one-form: sum rho rho (nabla_1 - nabla_2)_v L over the cut at t."""
    return _cut(calc, gamma_matrix(calc, v), t)


def sigma_matrix(calc: JetCalculus, u: Jet, v: Jet) -> np.ndarray:
    return calc.second12(u, v) - calc.second12(v, u)


def sigma_t(calc: JetCalculus, u: Jet, v: Jet, t: int) -> float:
    """Symplectic form: (nabla_{1,u} nabla_{2,v} - nabla_{1,v} nabla_{2,u}) L over the cut."""
    return _cut(calc, sigma_matrix(calc, u, v), t)


def inner_matrix(calc: JetCalculus, u: Jet, v: Jet) -> np.ndarray:
    return calc.second11(u, v) - calc.second22(u, v)


def inner_product_t(calc: JetCalculus, u: Jet, v: Jet, t: int) -> float:
    """Surface layer inner product: (nabla_{1,u} nabla_{1,v} - nabla_{2,u} nabla_{2,v}) L."""
    return _cut(calc, inner_matrix(calc, u, v), t)


def delta2(calc: JetCalculus, s: float, u: Jet, v: Jet) -> np.ndarray:
    """Per site: 1/2 (sum_y rho_y (nabla_1+nabla_2)_u (nabla_1+nabla_2)_v L - a b s)."""
    S = calc.second11(u, v) + calc.second12(u, v) + calc.second12(v, u) + calc.second22(u, v)
    return 0.5 * (S @ calc.rho - u.scalar * v.scalar * s)


def cut_values(calc: JetCalculus, Q: np.ndarray) -> np.ndarray:
    """Values of the cut functional for t = 0..T."""
    return np.array([_cut(calc, Q, t) for t in range(calc.measure.grid.T + 1)])


@dataclass
class SliceReport:
    name: str
    t: np.ndarray
    value: np.ndarray
    difference: np.ndarray
    predicted: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return np.abs(self.difference - self.predicted)

    def max_residual(self, slices: Optional[Sequence[int]] = None) -> float:
        r = self.residual if slices is None else self.residual[np.isin(self.t[:-1], slices)]
        return float(np.max(r, initial=0.0))

    def max_difference(self, slices: Optional[Sequence[int]] = None) -> float:
        d = np.abs(self.difference) if slices is None else np.abs(self.difference[np.isin(self.t[:-1], slices)])
        return float(np.max(d, initial=0.0))

    def rows(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.t):
            row = {"t": int(t), "value": float(self.value[i])}
            if i < len(self.difference):
                row.update(difference=float(self.difference[i]), predicted_difference=float(self.predicted[i]),
                           residual=float(self.residual[i]))
            else:
                row.update(difference="", predicted_difference="", residual="")
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["t", "value", "difference", "predicted_difference", "residual"])
            w.writeheader()
            w.writerows(self.rows())


def _slice_sums(calc: JetCalculus, field: np.ndarray) -> np.ndarray:
    g = calc.measure.grid
    return np.array([np.sum(calc.rho[g.sites_in(t)] * field[g.sites_in(t)]) for t in range(g.T)])


def gamma_report(op: LinearizedOperator, v: Jet) -> SliceReport:
    """gamma^t for all t with predicted differences sum_N rho (2 nabla_v ell - <1, Delta v> + b s)."""
    calc = op.calc
    vals = cut_values(calc, gamma_matrix(calc, v))
    one = Jet(np.ones(calc.N), np.zeros((calc.N, calc.m)))
    pred_field = 2 * calc.grad_ell(v, op.s) - op.pairing(one, v) + v.scalar * op.s
    T = calc.measure.grid.T
    return SliceReport("gamma", np.arange(T + 1), vals, np.diff(vals), _slice_sums(calc, pred_field))


def sigma_report(op: LinearizedOperator, u: Jet, v: Jet) -> SliceReport:
    """sigma^t for all t with predicted differences sum_N rho (<u,Dv> - <v,Du>)."""
    calc = op.calc
    vals = cut_values(calc, sigma_matrix(calc, u, v))
    pred_field = op.pairing(u, v) - op.pairing(v, u)
    T = calc.measure.grid.T
    return SliceReport("sigma", np.arange(T + 1), vals, np.diff(vals), _slice_sums(calc, pred_field))


def inner_product_report(op: LinearizedOperator, u: Jet, v: Jet) -> SliceReport:
    """(u,v)^t with predicted differences sum_N rho (<u,Dv> + <v,Du> + a b s - 2 Delta_2)."""
    calc = op.calc
    vals = cut_values(calc, inner_matrix(calc, u, v))
    pred_field = (op.pairing(u, v) + op.pairing(v, u) + u.scalar * v.scalar * op.s
                  - 2 * delta2(calc, op.s, u, v))
    T = calc.measure.grid.T
    return SliceReport("inner_product", np.arange(T + 1), vals, np.diff(vals), _slice_sums(calc, pred_field))


def gram_spectrum(calc: JetCalculus, basis: Sequence[Jet], t: int) -> np.ndarray:
    G = np.array([[inner_product_t(calc, a, b, t) for b in basis] for a in basis])
    return np.linalg.eigvalsh(0.5 * (G + G.T))


# ---------------------------------------------------------------------------
# nonlinear surface layer integral


def nonlinear_osi_mask(k: Kernel, rho: DiscreteMeasure, d: MeasureDeformation, inside: np.ndarray) -> float:
    """sum_{x in Omega, y not} rho rho [f(x) L(F(x), y) - L(x, F(y)) f(y)]."""
    LF = kernel_matrix(k, d.F, rho.points)
    r = rho.weights
    A = d.f[:, None] * LF - LF.T * d.f[None, :]
    return float((r * inside) @ A @ (r * ~inside))


def nonlinear_osi(k: Kernel, rho: DiscreteMeasure, d: MeasureDeformation, t: int) -> float:
    return nonlinear_osi_mask(k, rho, d, rho.grid.past(t))


def volume_integrand(k: Kernel, rho: DiscreteMeasure, d: MeasureDeformation, s: float) -> np.ndarray:
    """Per site f(x) ell(F(x)) - ell~(x) + s (f(x) - 1).

    ell(y) = sum_j L(y, x_j) rho_j - s for the undeformed measure and
    ell~(x) = sum_j L(x, F(x_j)) f_j rho_j - s for the deformed one.
    """
    LF = kernel_matrix(k, d.F, rho.points)
    r = rho.weights
    ell_F = LF @ r - s
    ell_tilde = LF.T @ (d.f * r) - s
    return d.f * ell_F - ell_tilde + s * (d.f - 1.0)


def nonlinear_osi_volume_form(k: Kernel, rho: DiscreteMeasure, d: MeasureDeformation, t: int, s: float) -> float:
    inside = rho.grid.past(t)
    return float(np.sum((rho.weights * volume_integrand(k, rho, d, s))[inside]))


# ---------------------------------------------------------------------------
# Taylor coefficients in a deformation parameter


def chebyshev_nodes(n: int, radius: float) -> np.ndarray:
    j = np.arange(n)
    return radius * np.cos((2 * j + 1) * np.pi / (2 * n))


def taylor_coefficients(fn: Callable[[float], np.ndarray], degree: int, radius: float) -> np.ndarray:
    """Coefficients c_0..c_degree of a polynomial (in eps) of at most this degree.

    Exact (up to rounding) for polynomials; fn returns an array per eps.
    """
    nodes = chebyshev_nodes(degree + 1, radius)
    vals = np.array([np.atleast_1d(fn(e)) for e in nodes])
    V = np.vander(nodes / radius, degree + 1, increasing=True)
    c = np.linalg.solve(V, vals.reshape(degree + 1, -1))
    scale = radius ** np.arange(degree + 1)
    return (c / scale[:, None]).reshape((degree + 1,) + vals.shape[1:])


def series_deformation(rho: DiscreteMeasure, orders: Sequence[Jet], eps: float) -> MeasureDeformation:
    """f = 1 + sum eps^p b^(p), F = x + sum eps^p v^(p) for jets (b^(p), v^(p))."""
    f = np.ones(rho.n)
    F = rho.points.copy()
    for p, j in enumerate(orders, start=1):
        f = f + eps ** p * j.scalar
        F = F + eps ** p * j.vector
    return MeasureDeformation(f, F)


def series_degree(kernel: Kernel, n_orders: int) -> int:
    """Degree in eps of kernel values along a polynomial deformation, if finite."""
    return 4 * n_orders + 2


def compensate_inner(k: Kernel, rho: DiscreteMeasure, s: float, orders: Sequence[Jet], p_max: int,
                     radius: Optional[float] = None) -> tuple[list[InnerSolution], np.ndarray]:
    """Inner solutions n^(1..p_max) cancelling the eps^p coefficients of the volume integrand.

    With g(eps) the volume integrand of the deformation generated by `orders`
    (transverse jets, f = 1), the scalar of n^(p) is -g_p / s, built by the
    retarded divergence sweep.  Returns the inner solutions and the
    coefficient array g_p (p = 0..degree).
    """
    if s == 0:
        raise ZeroDivisionError("compensation needs a nonzero Lagrange multiplier s")
    if not any(np.any(o.vector) or np.any(o.scalar) for o in orders):
        z = [InnerSolution(Jet.zeros(rho.n, rho.dim)) for _ in range(p_max)]
        return z, np.zeros((p_max + 1, rho.n))
    deg = series_degree(k, len(orders))
    if radius is None:
        amp = sum(np.max(np.abs(o.vector)) for o in orders)
        pr = k.poly_radius
        radius = 0.5 * pr / amp if pr is not None else 1e-2 / amp
        radius = min(radius, 1.0)
    g = taylor_coefficients(lambda e: volume_integrand(k, rho, series_deformation(rho, orders, e), s), deg, radius)
    out = []
    for p in range(1, p_max + 1):
        out.append(inner_from_scalar(rho.grid, rho.weights, -g[p] / s, rho.dim, retarded=True))
    return out, g


# ---------------------------------------------------------------------------
# correlation measures


def correlation_measures(k: Kernel, rho: DiscreteMeasure, rho_tilde: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    """nu_x = rho_x sum_y rho~_y L(x, y~) and nu~_y = rho~_y sum_x rho_x L(y~, x)."""
    L = kernel_matrix(k, rho.points, rho_tilde.points)
    nu = rho.weights * (L @ rho_tilde.weights)
    nu_t = rho_tilde.weights * (L.T @ rho.weights)
    return nu, nu_t


def gamma_omega_from_correlations(nu: np.ndarray, nu_tilde: np.ndarray, inside: np.ndarray) -> float:
    """(Phi^* nu~ - nu)(Omega) for the site bijection x -> F(x)."""
    return float(np.sum((nu_tilde - nu)[inside]))
