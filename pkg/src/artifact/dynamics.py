"""Perturbative scattering on a layered lattice vacuum and its lift to Fock space.

Pipeline: incoming linear data -> perturbation series of the nonlinear
transverse field -> polynomial maps P^t(conj z, z) and mu^t(conj z, z) in
one-particle coordinates -> normal-ordered exponentials on bra-ket states,
infinitesimal generators, the holomorphic Hamiltonian and the Dyson series
for the bra/ket mixing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .complex_structure import SolutionBasis, StructurePack, grams, structure_pack
from .cvp_core import DiscreteMeasure, Jet, Kernel, lattice_vacuum
from .fock import (BRA_ANN, FockBasis, NormalExp, WickMonomial, WickPolynomial, coherent,
                   BraKetState, exp_tail, monomial_factors, superoperator, wick_matrix)
from .linfield import InnerSolution, LinearizedOperator, assemble_delta, flux, greens_apply, restrict
from .polymaps import CPoly, bidegree_parts, fit_homogeneous, key_degree
from .surface_layers import (compensate_inner, inner_product_t, nonlinear_osi, series_deformation, series_degree,
                             taylor_coefficients)


class PerturbationError(RuntimeError):
    pass


class NonHermitianError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scattering setup


@dataclass
class ScatteringSetup:
    kernel: Kernel
    measure: DiscreteMeasure
    s: float
    op: LinearizedOperator
    t_in: int
    t_out: int
    order: int
    Z: np.ndarray
    compensate: bool = True
    retarded: bool = True
    small_inner: bool = True
    z_comp: int = 2

    @property
    def T(self) -> int:
        return self.measure.grid.T

    @property
    def X(self) -> int:
        return self.measure.n // self.T

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def kappa(self) -> float:
        return 2.0 * self.s

    def band(self, jet: Jet, t: int) -> np.ndarray:
        """Transverse values on the slices t-1 and t."""
        u = jet.vector[:, self.z_comp].reshape(self.T, self.X)
        return np.concatenate([u[t - 1], u[t]])

    def band_jet(self, data: np.ndarray, t: int) -> Jet:
        vec = np.zeros((self.measure.n, self.measure.dim))
        u = vec[:, self.z_comp].reshape(self.T, self.X)
        u[t - 1] = data[: self.X]
        u[t] = data[self.X:]
        vec[:, self.z_comp] = u.ravel()
        return Jet(np.zeros(self.measure.n), vec)

    def z_of(self, band: np.ndarray) -> np.ndarray:
        return self.Z @ band

    def band_of(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        R = np.vstack([self.Z.real, self.Z.imag])
        return np.linalg.solve(R, np.concatenate([z.real, z.imag]))

    def incoming(self, z: np.ndarray) -> Jet:
        """Linear solution with one-particle coordinates z at t_in."""
        return restrict(self.op, self.band_jet(self.band_of(z), self.t_in), self.t_in)

    def slices(self) -> np.ndarray:
        return np.arange(self.t_in, self.t_out + 1)


def scattering_setup(kernel: Kernel, T: int, X: int, t_in: int, t_out: int, order: int = 2,
                     compensate: bool = True, retarded: bool = True, small_inner: bool = True) -> ScatteringSetup:
    """Lattice vacuum, linearized operator and one-particle coordinates at t_in.

    Only the retarded expansion with inner solutions entering linearly is
    implemented.
    """
    if not retarded:
        raise NotImplementedError("scattering runs use the retarded expansion")
    if not small_inner:
        raise NotImplementedError("inner solutions can only enter linearly")
    k, mu, s = lattice_vacuum(kernel, T, X)
    op = assemble_delta(k, mu, s)
    if op.bandwidth != 1:
        raise ValueError("scattering needs a nearest-neighbour (two-slice) Cauchy band")
    if not (1 <= t_in < t_out <= T - 3):
        raise ValueError("need 1 <= t_in < t_out <= T - 3")
    if order < 1:
        raise ValueError("order must be at least 1")
    proto = ScatteringSetup(k, mu, s, op, t_in, t_out, order, np.eye(2 * X, dtype=complex)[:X], compensate,
                            retarded, small_inner)
    jets = tuple(restrict(op, proto.band_jet(e, t_in), t_in) for e in np.eye(2 * X))
    G, Sg = grams(op.calc, SolutionBasis(jets), t_in)
    proto.Z = structure_pack(G, Sg).Z
    return proto


# ---------------------------------------------------------------------------
# perturbation series


def transverse_residual(setup: ScatteringSetup, orders: Sequence[Jet], eps: float) -> np.ndarray:
    """Transverse weak Euler-Lagrange residual rho_i sum_j d_z1 L(F_i, F_j) rho_j of the deformation."""
    k, mu = setup.kernel, setup.measure
    F = series_deformation(mu, orders, eps).F
    N = mu.n
    d = k.derivatives(np.repeat(F, N, axis=0), np.tile(F, (N, 1)), second=False)
    g = d.d1.reshape(N, N, -1)[:, :, setup.z_comp] @ mu.weights
    return mu.weights * g


def _radius(setup: ScatteringSetup, orders: Sequence[Jet]) -> float:
    amp = sum(float(np.max(np.abs(o.vector))) for o in orders)
    pr = setup.kernel.poly_radius
    if amp == 0:
        return 1.0
    r = 0.5 * pr / amp if pr is not None else 1e-2 / amp
    return min(r, 1.0)


@dataclass
class PerturbationSeries:
    orders: list
    inners: list
    g: np.ndarray
    greens_residual: float

    @property
    def order(self) -> int:
        return len(self.orders)

    def transverse(self, eps: float) -> Jet:
        out = self.orders[0] * eps
        for p, w in enumerate(self.orders[1:], start=2):
            out = out + w * eps ** p
        return out


def perturb(setup: ScatteringSetup, incoming: Jet, order: Optional[int] = None) -> PerturbationSeries:
    """Orders w^(1..P) solving the transverse equations with retarded Green's operators,
    plus inner solutions cancelling the volume integrand order by order.

    w^(p) is homogeneous of degree p in the incoming data.  Zero data give
    an empty series.
    """
    P = setup.order if order is None else order
    N, m = setup.measure.n, setup.measure.dim
    if not np.any(incoming.vector):
        return PerturbationSeries([], [], np.zeros((1, N)), 0.0)
    if np.any(incoming.scalar):
        raise ValueError("incoming solution must be scalar-free")
    orders = [incoming]
    res = 0.0
    for p in range(2, P + 1):
        deg = 2 * (p - 1)
        c = taylor_coefficients(lambda e: transverse_residual(setup, orders, e), deg, _radius(setup, orders))
        rhs = np.zeros((m + 1) * N)
        rhs[(1 + setup.z_comp) * N:(2 + setup.z_comp) * N] = c[p]
        gr = greens_apply(setup.op, "retarded", rhs)
        res = max(res, gr.residual)
        orders.append(gr.jet)
    D = series_degree(setup.kernel, P)
    inners, g = compensate_inner(setup.kernel, setup.measure, setup.s, orders, D)
    return PerturbationSeries(orders, inners, g, res)


def compensated_surface_layer(setup: ScatteringSetup, series: PerturbationSeries, eps: float,
                              comp_order: int, slices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Nonlinear surface layer integral of the perturbed measure at each slice.

    The transverse orders deform the measure nonlinearly; the inner solutions
    n^(1..comp_order) enter linearly through their one-form gamma^t = s flux.
    """
    k, mu = setup.kernel, setup.measure
    ts = setup.slices() if slices is None else np.asarray(slices)
    d = series_deformation(mu, series.orders, eps)
    out = np.array([nonlinear_osi(k, mu, d, int(t)) for t in ts])
    for p in range(1, min(comp_order, len(series.inners)) + 1):
        jet = series.inners[p - 1].jet
        out = out + eps ** p * setup.s * np.array([flux(mu.grid, mu.weights, jet, int(t)) for t in ts])
    return out


def residual_rows(setup: ScatteringSetup) -> np.ndarray:
    sl = setup.measure.grid.slice_of
    R = setup.op.bandwidth
    return (sl >= R) & (sl <= setup.T - 1 - R)


def el_residual_scaling(setup: ScatteringSetup, incoming: Jet, amplitudes: Sequence[float]) -> dict:
    """Transverse residual of the truncated series at several amplitudes and its scaling exponents."""
    series = perturb(setup, incoming)
    rows = residual_rows(setup)
    res = np.array([float(np.max(np.abs(transverse_residual(setup, series.orders, a)[rows])))
                    for a in amplitudes])
    amps = np.asarray(amplitudes, dtype=float)
    slopes = np.diff(np.log(res)) / np.diff(np.log(amps))
    ratios = res[:-1] / res[1:]
    return {"amplitudes": amps.tolist(), "residuals": res.tolist(), "slopes": slopes.tolist(),
            "ratios": ratios.tolist(), "expected_slope": series.order + 1}


def restricted_flow(setup: ScatteringSetup, series: PerturbationSeries, t: int) -> list:
    """Free solutions matching each order on the Cauchy band at t."""
    return [restrict(setup.op, w, t) for w in series.orders]


# ---------------------------------------------------------------------------
# per-degree flow data


@dataclass
class FlowRecord:
    """One-particle coordinates z^(p)(t) and s*mu^(k)(t) for one incoming datum."""
    slices: np.ndarray
    z: np.ndarray          # (P, n_slices, n) complex
    s_mu: np.ndarray       # (D+1, n_slices): s mu per degree
    s_mu_rel: np.ndarray   # inner-solution flux part
    h: np.ndarray          # surface-layer correction per degree
    half_sq: np.ndarray    # (D+1, n_slices): degree parts of |z_t|^2 / 2


def _degree_products(z: np.ndarray, D: int) -> np.ndarray:
    """Degree parts of |sum_p z^(p)|^2 / 2 from the homogeneous pieces."""
    P = z.shape[0]
    out = np.zeros((D + 1, z.shape[1]))
    for p in range(1, P + 1):
        for q in range(1, P + 1):
            if p + q <= D:
                out[p + q] += 0.5 * np.real(np.sum(np.conj(z[p - 1]) * z[q - 1], axis=-1))
    return out


def flow_record(setup: ScatteringSetup, series: PerturbationSeries) -> FlowRecord:
    ts = setup.slices()
    grid, rho = setup.measure.grid, setup.measure.weights
    z = np.array([[setup.z_of(setup.band(w, t)) for t in ts] for w in series.orders])
    D = series.g.shape[0] - 1
    half = _degree_products(z, D)
    s_rel = np.zeros((D + 1, len(ts)))
    gam = np.zeros((D + 1, len(ts)))
    for k in range(1, D + 1):
        jet = series.inners[k - 1].jet
        f = np.array([flux(grid, rho, jet, int(t)) for t in ts])
        s_rel[k] = setup.s * (f - f[0])
        gam[k] = [float(np.sum((rho * series.g[k])[grid.past(int(t))])) for t in ts]
    h = (gam - half) - (gam[:, :1] - half[:, :1])
    s_mu = s_rel + h if setup.compensate else np.zeros_like(s_rel)
    return FlowRecord(ts, z, s_mu, s_rel, h, half)


@dataclass
class NormBalance:
    degrees: list
    incoming: np.ndarray
    outgoing: np.ndarray
    s_mu: np.ndarray
    defect: np.ndarray
    correction_out: np.ndarray
    route_difference: float

    @property
    def max_defect(self) -> float:
        return float(np.max(np.abs(self.defect)))

    def rows(self) -> list[dict]:
        return [{"degree": int(k), "incoming": float(a), "outgoing": float(b), "s_mu": float(c),
                 "defect": float(d), "correction_out": float(e)}
                for k, a, b, c, d, e in zip(self.degrees, self.incoming, self.outgoing, self.s_mu,
                                            self.defect, self.correction_out)]


def norm_balance(setup: ScatteringSetup, z_in: np.ndarray) -> NormBalance:
    """|z_in|^2/2 = s mu(t_out) + |z_out|^2/2 per degree, with mu from inner-solution fluxes.

    Degrees 2..P+1 are unaffected by truncating the series.  The outgoing
    quadratic form is also evaluated with the surface layer inner product of
    restricted jets as an independent route.
    """
    series = perturb(setup, setup.incoming(z_in))
    rec = flow_record(setup, series)
    degs = list(range(2, series.order + 2))
    inc = rec.half_sq[degs, 0]
    out = rec.half_sq[degs, -1]
    smu = rec.s_mu_rel[degs, -1] if setup.compensate else np.zeros(len(degs))
    defect = inc - smu - out
    t = setup.t_out
    calc = setup.op.calc
    restricted = restricted_flow(setup, series, t)
    route = 0.0
    for k in degs:
        acc = 0.0
        for p in range(1, series.order + 1):
            q = k - p
            if 1 <= q <= series.order:
                acc += 0.5 * inner_product_t(calc, restricted[p - 1], restricted[q - 1], t)
        route = max(route, abs(acc - rec.half_sq[k, -1]))
    return NormBalance(degs, inc, out, smu, defect, rec.h[degs, -1], route)


# ---------------------------------------------------------------------------
# polynomial maps


@dataclass
class FlowFit:
    slices: np.ndarray
    P: dict
    mu: dict
    s: float
    fit_residual: float

    def kappa(self) -> float:
        return 2.0 * self.s

    def to_dict(self) -> dict:
        return {"slices": self.slices.tolist(), "s": self.s, "fit_residual": self.fit_residual,
                "P": {str(t): p.to_list() for t, p in self.P.items()},
                "mu": {str(t): p.to_list() for t, p in self.mu.items()}}


def _n_keys(n: int, k: int) -> int:
    return math.comb(2 * n + k - 1, k)


def fit_flow(setup: ScatteringSetup, n_samples: Optional[int] = None, seed: int = 0,
             mu_degree: Optional[int] = None) -> FlowFit:
    """Fit P^t (degrees 1..P) and mu^t (degrees 2..P+1) per degree from random incoming data."""
    P = setup.order
    Dm = P + 1 if mu_degree is None else mu_degree
    n = setup.n
    need = max(_n_keys(n, k) for k in range(1, max(P, Dm) + 1))
    S = n_samples or int(1.3 * need) + 4
    rng = np.random.default_rng(seed)
    zs = (rng.normal(size=(S, n)) + 1j * rng.normal(size=(S, n))) / np.sqrt(2)
    recs = [flow_record(setup, perturb(setup, setup.incoming(z))) for z in zs]
    ts = setup.slices()
    Pfit: dict = {}
    mufit: dict = {}
    worst = 0.0
    for i, t in enumerate(ts):
        poly = CPoly.zero(n, n)
        for p in range(1, P + 1):
            vals = np.array([r.z[p - 1, i] for r in recs])
            part = fit_homogeneous(zs, vals, p)
            worst = max(worst, float(np.max(np.abs(_eval_many(part, zs) - vals))))
            poly = poly + part
        Pfit[int(t)] = poly.prune(1e-11)
        mpoly = CPoly.zero(n, 1)
        for k in range(2, Dm + 1):
            vals = np.array([r.s_mu[k, i] for r in recs]) / setup.s
            part = fit_homogeneous(zs, vals, k)
            worst = max(worst, float(np.max(np.abs(_eval_many(part, zs)[:, 0] - vals))))
            mpoly = mpoly + part
        mufit[int(t)] = mpoly.prune(1e-11)
    return FlowFit(ts, Pfit, mufit, setup.s, worst)


def _eval_many(poly: CPoly, zs: np.ndarray) -> np.ndarray:
    return np.array([poly(z) for z in zs])


# ---------------------------------------------------------------------------
# Fock lifts


def _modes(idx: Sequence[int]) -> tuple:
    return tuple(i for i, e in enumerate(idx) for _ in range(e))


def hol_components(P: CPoly) -> dict:
    """Coefficients of P grouped by (degree in conj z, degree in z)."""
    return bidegree_parts(P)


def lift_holomorphic(P: CPoly, basis: FockBasis) -> NormalExp:
    """Ket operator :exp(a+ (P(a) - a)): for a holomorphic map P."""
    if not P.is_holomorphic(tol=1e-14):
        raise ValueError("map has antiholomorphic terms; use lift_mixed")
    return NormalExp(lift_mixed(P, None, 0.0, basis).A)


def lift_mixed(P: CPoly, mu: Optional[CPoly], kappa: float, basis: FockBasis) -> NormalExp:
    """:exp(a+ (P(abar, a) - a) + abar+ (conj P - abar) + kappa mu(abar, a)):.

    conj z in P becomes a bra annihilator and z a ket annihilator; the bra
    part uses the conjugate polynomial with the roles swapped.
    """
    n = P.n
    if n != basis.d:
        raise ValueError("map dimension differs from the number of modes")
    D = (P - CPoly.identity(n)).prune(1e-14)
    A, Abar = [], []
    for i in range(n):
        ti, tb = [], []
        for (a, b), c in D.terms.items():
            if c[i] == 0:
                continue
            if sum(a) + sum(b) == 0:
                raise ValueError("map must fix the origin")
            ti.append(WickMonomial(c[i], ann=_modes(b), bra_ann=_modes(a)))
            tb.append(WickMonomial(np.conj(c[i]), ann=_modes(a), bra_ann=_modes(b)))
        A.append(WickPolynomial(ti).simplify())
        Abar.append(WickPolynomial(tb).simplify())
    M = None
    if mu is not None and kappa != 0:
        M = WickPolynomial([WickMonomial(kappa * c[0], ann=_modes(b), bra_ann=_modes(a))
                            for (a, b), c in mu.terms.items() if c[0] != 0]).simplify()
    return NormalExp(A, Abar, M)


def norm_exponent(P: CPoly, mu: Optional[CPoly], kappa: float) -> CPoly:
    """|P(z)|^2 + kappa mu(z) - |z|^2 as a polynomial; zero when the Fock norm is conserved."""
    n = P.n
    out = CPoly.zero(n, 1)
    for i in range(n):
        Pi = P.component(i)
        zi = CPoly.coordinate(n, i)
        out = out + Pi.conj().product(Pi) - zi.conj().product(zi)
    if mu is not None:
        out = out + mu * kappa
    return out.prune()


def lift_tail(P: CPoly, mu: Optional[CPoly], kappa: float, n_max: int, z: np.ndarray) -> float:
    """Truncation estimate for 1(L (Upsilon(z) x Upsilon(z))) on sectors up to n_max.

    Output sectors up to n_max // deg only see input sectors up to n_max; the
    rest is bounded with the majorant series of P and mu at |z|.
    """
    deg = max(P.degree, 1)
    p2 = float(np.sum(P.majorant(np.abs(z)) ** 2))
    kmu = abs(kappa) * float(mu.majorant(np.abs(z))[0]) if mu is not None and mu.terms else 0.0
    return 2.0 * math.exp(kmu) * exp_tail(p2, n_max // deg)


def ket_lift_tail(P: CPoly, n_max: int, z: np.ndarray) -> float:
    """Amplitude bound for the holomorphic lift on a truncated coherent ket.

    Sectors up to n_max // deg are exact; beyond, both the lifted and the
    exact vector are dominated by the majorant coherent state at |P|(|z|).
    """
    deg = max(P.degree, 1)
    p2 = float(np.sum(P.majorant(np.abs(z)) ** 2))
    return 2.0 * math.sqrt(exp_tail(p2, n_max // deg))


@dataclass
class LiftNormCheck:
    lifted_one: complex
    functor_one: float
    conserved_one: float
    functor_difference: float
    tail_bound: float
    exponent_defect: float
    validated_degree: int

    @property
    def ok(self) -> bool:
        return self.functor_difference <= self.tail_bound + 1e-10

    def to_dict(self) -> dict:
        return {"lifted_one": [self.lifted_one.real, self.lifted_one.imag], "functor_one": self.functor_one,
                "conserved_one": self.conserved_one, "functor_difference": self.functor_difference,
                "tail_bound": self.tail_bound, "exponent_defect": self.exponent_defect,
                "validated_degree": self.validated_degree}


def lift_norm_check(P: CPoly, mu: Optional[CPoly], kappa: float, basis: FockBasis, z: np.ndarray,
                    validated_degree: Optional[int] = None) -> LiftNormCheck:
    """1(L (Upsilon(z) x Upsilon(z))) on a coherent probe.

    The lift must give exp(|P(z)|^2 + kappa mu(z)) up to the truncation tail;
    norm conservation is the vanishing of that exponent minus |z|^2, checked
    on the degrees up to validated_degree where the series is exact.
    """
    z = np.asarray(z, dtype=complex)
    L = lift_mixed(P, mu, kappa, basis)
    st = BraKetState.from_pair(coherent(basis, z), coherent(basis, z))
    one = complex(L.apply(st).one())
    r2 = float(np.sum(np.abs(z) ** 2))
    Pz = P(z)
    kmu = kappa * float(np.real(mu(z)[0])) if mu is not None else 0.0
    p2 = float(np.sum(np.abs(Pz) ** 2))
    functor = math.exp(p2 + kmu)
    tail = lift_tail(P, mu, kappa, basis.n_max, z)
    vd = validated_degree if validated_degree is not None else max(P.degree, 1) + 1
    ex = norm_exponent(P, mu, kappa).truncate(vd)
    return LiftNormCheck(one, functor, math.exp(r2), abs(one - functor), tail,
                         float(abs(ex(z)[0])), vd)


# ---------------------------------------------------------------------------
# infinitesimal generators


@dataclass
class GeneratorPack:
    """Flow generator phi (degrees 1-2) and scalar sigma = kappa psi / 2 (degrees 1-3).

    psi is the rate of the norm-compensating function mu; both are
    polynomials in (conj z, z).
    """
    phi: CPoly
    sigma: CPoly
    kappa: float
    t: float = 0.0
    step_estimate: float = 0.0

    @property
    def n(self) -> int:
        return self.phi.n

    # named coefficient blocks: (flow or scalar, |conj z| degree, |z| degree)
    BLOCKS = {"A": ("phi", 0, 1), "A_mix": ("phi", 1, 0),
              "B_hol": ("phi", 0, 2), "B_mixed": ("phi", 1, 1), "B_antihol": ("phi", 2, 0),
              "E_hol": ("sigma", 0, 1), "E_antihol": ("sigma", 1, 0),
              "F_hol": ("sigma", 0, 2), "F_mixed": ("sigma", 1, 1), "F_antihol": ("sigma", 2, 0),
              "G_hol": ("sigma", 0, 3), "G_mixed1": ("sigma", 1, 2), "G_mixed2": ("sigma", 2, 1),
              "G_antihol": ("sigma", 3, 0)}

    def block(self, name: str) -> CPoly:
        src, na, nb = self.BLOCKS[name]
        p = self.phi if src == "phi" else self.sigma
        return CPoly(p.n, p.m, {k: v.copy() for k, v in p.terms.items() if sum(k[0]) == na and sum(k[1]) == nb})

    def block_norms(self) -> dict:
        return {name: self.block(name).max_coeff() for name in self.BLOCKS}

    def q_ket(self) -> WickPolynomial:
        """Ket-side generator: a+_l phi_l(abar, a) + sigma(abar, a)."""
        terms = []
        for (a, b), c in self.phi.terms.items():
            for l in range(self.n):
                if c[l] != 0:
                    terms.append(WickMonomial(c[l], dag=(l,), ann=_modes(b), bra_ann=_modes(a)))
        for (a, b), c in self.sigma.terms.items():
            if c[0] != 0:
                terms.append(WickMonomial(c[0], ann=_modes(b), bra_ann=_modes(a)))
        return WickPolynomial(terms).simplify()

    def q_bra(self) -> WickPolynomial:
        return WickPolynomial([WickMonomial(np.conj(m.coeff), dag=m.bra_dag, ann=m.bra_ann,
                                            bra_dag=m.dag, bra_ann=m.ann) for m in self.q_ket().terms])

    def generator(self) -> WickPolynomial:
        return (self.q_ket() + self.q_bra()).simplify()

    def q_holomorphic(self) -> WickPolynomial:
        """-iH: bra annihilators of the ket generator replaced by ket creators."""
        return WickPolynomial([WickMonomial(m.coeff, dag=tuple(sorted(m.dag + m.bra_ann)), ann=m.ann)
                               for m in self.q_ket().terms]).simplify()

    def mixing_terms(self) -> list:
        return [m for m in self.q_ket().terms if m.bra_ann]

    def hamiltonian(self, basis: FockBasis) -> np.ndarray:
        return 1j * wick_matrix(basis, self.q_holomorphic())

    def hermiticity_defect(self, basis: FockBasis) -> float:
        H = self.hamiltonian(basis)
        return float(np.max(np.abs(H - H.conj().T), initial=0.0))

    def to_dict(self) -> dict:
        return {"t": self.t, "kappa": self.kappa, "step_estimate": self.step_estimate,
                "phi": self.phi.to_list(), "sigma": self.sigma.to_list(), "block_norms": self.block_norms()}


def _split(phi: CPoly, psi: CPoly, kappa: float, t: float, est: float = 0.0) -> GeneratorPack:
    phi = CPoly(phi.n, phi.m, {k: v for k, v in phi.terms.items() if 1 <= key_degree(k) <= 2})
    sig = CPoly(psi.n, 1, {k: 0.5 * kappa * v for k, v in psi.terms.items() if 1 <= key_degree(k) <= 3})
    return GeneratorPack(phi.prune(), sig.prune(), kappa, t, est)


def midpoint_generator(P0: CPoly, P1: CPoly, mu0: CPoly, mu1: CPoly, dt: float, kappa: float,
                       t: float = 0.0) -> GeneratorPack:
    """Generator of the step z_t -> z_{t+dt} evaluated at the midpoint (z_t + z_{t+dt}) / 2.

    With Phi = P1 o P0^{-1}, phi = (Phi - id) o M^{-1} / dt and
    psi = (mu1 - mu0) o P0^{-1} o M^{-1} / dt where M = (id + Phi) / 2.  The
    norm identity |z'|^2 - |z|^2 = 2 dt Re<m, phi(m)> then holds exactly at
    every degree.
    """
    n = P0.n
    ident = CPoly.identity(n)
    Q = P0.inverse(3)
    Phi = P1.compose(Q, 3)
    dmu = (mu1 - mu0).compose(Q, 3)
    Minv = ((ident + Phi) * 0.5).inverse(3)
    phi = (Phi - ident).compose(Minv, 2) * (1.0 / dt)
    psi = dmu.compose(Minv, 3) * (1.0 / dt)
    return _split(phi, psi, kappa, t)


def central_generator(flow: Callable[[float], tuple], t: float, h: float, kappa: float,
                      tol: Optional[float] = None) -> GeneratorPack:
    """Generator d/dt P^t o (P^t)^{-1} by central differences with one Richardson step.

    flow(t) returns (P^t, mu^t).  The step estimate is the Richardson correction
    size; above tol the step is rejected.
    """
    P, _ = flow(t)
    Q = P.inverse(3)

    def diff(step):
        Pp, mp = flow(t + step)
        Pm, mm = flow(t - step)
        return ((Pp - Pm).compose(Q, 3) * (0.5 / step), (mp - mm).compose(Q, 3) * (0.5 / step))

    f1, g1 = diff(h)
    f2, g2 = diff(h / 2)
    phi = f2 * (4.0 / 3.0) - f1 * (1.0 / 3.0)
    psi = g2 * (4.0 / 3.0) - g1 * (1.0 / 3.0)
    est = max((f2 - f1).max_coeff(), (g2 - g1).max_coeff()) / 3.0
    if tol is not None and est > tol:
        raise ValueError(f"step too large: Richardson correction {est:.3e} exceeds {tol:.1e}")
    return _split(phi, psi, kappa, t, est)


def extract_generators(setup: ScatteringSetup, fit: FlowFit, compensate: Optional[bool] = None) -> list:
    """Midpoint generators for every slice step t -> t+1 in the scattering window."""
    comp = setup.compensate if compensate is None else compensate
    ht = setup.measure.grid.ht
    out = []
    for t in fit.slices[:-1]:
        t = int(t)
        mu0 = fit.mu[t] if comp else CPoly.zero(setup.n, 1)
        mu1 = fit.mu[t + 1] if comp else CPoly.zero(setup.n, 1)
        out.append(midpoint_generator(fit.P[t], fit.P[t + 1], mu0, mu1, ht, setup.kappa, t + 0.5))
    return out


def hermiticity_scan(packs: Sequence[GeneratorPack], basis: FockBasis) -> list[dict]:
    return [{"t": p.t, "defect": p.hermiticity_defect(basis), "mixing": max(
        (abs(m.coeff) for m in p.mixing_terms()), default=0.0)} for p in packs]


# ---------------------------------------------------------------------------
# holomorphic evolution and the mixing error


def holo_evolve(pack: GeneratorPack, basis: FockBasis, t: float, t0: float = 0.0,
                tol: float = 1e-8) -> np.ndarray:
    """Unitary S(t, t0) = exp(-i (t - t0) H); refuses a non-Hermitian H."""
    defect = pack.hermiticity_defect(basis)
    if defect > tol:
        raise NonHermitianError(f"Hamiltonian is not Hermitian (defect {defect:.3e} > {tol:.1e}); "
                                "norm compensation is missing or inconsistent")
    return sla.expm(-1j * (t - t0) * pack.hamiltonian(basis))


def generator_superoperator(pack: GeneratorPack, basis: FockBasis) -> sp.csr_matrix:
    return superoperator(basis, pack.generator())


def holomorphic_superoperator(pack: GeneratorPack, basis: FockBasis) -> sp.csr_matrix:
    """W -> conj(-iH) W + W (-iH)^T on row-major W."""
    Q = sp.csr_matrix(wick_matrix(basis, pack.q_holomorphic()))
    I = sp.identity(basis.dim, dtype=complex, format="csr")
    return (sp.kron(Q.conj(), I) + sp.kron(I, Q)).tocsr()


def error_operator(pack: GeneratorPack, basis: FockBasis) -> sp.csr_matrix:
    """E = G - V on bra-ket states; vanishes iff all mixing terms vanish."""
    return (generator_superoperator(pack, basis) - holomorphic_superoperator(pack, basis)).tocsr()


def commutator_operator(pack: GeneratorPack, basis: FockBasis, O: np.ndarray) -> np.ndarray:
    """Observable C(O) with tr-expectation O(E W) = C(O)(W) for all W.

    Each mixing monomial c a+_K a_K' abar_beta contributes
    c [a+_beta, O] K - conj(c) K^dag [a_beta, O].
    """
    O = np.asarray(O, dtype=complex)
    out = np.zeros_like(O)
    for m in pack.mixing_terms():
        K, _ = monomial_factors(basis, WickMonomial(1.0, dag=m.dag, ann=m.ann))
        bd, _ = monomial_factors(basis, WickMonomial(1.0, dag=m.bra_ann))
        ba, _ = monomial_factors(basis, WickMonomial(1.0, ann=m.bra_ann))
        K = K.toarray()
        bd = bd.toarray()
        ba = ba.toarray()
        out += m.coeff * (bd @ O - O @ bd) @ K - np.conj(m.coeff) * K.conj().T @ (ba @ O - O @ ba)
    return out


def _vconj(S: np.ndarray, W: np.ndarray) -> np.ndarray:
    return S.conj() @ W @ S.T


@dataclass
class DysonResult:
    orders: list
    total: np.ndarray
    quad_error: float
    exact: Optional[np.ndarray] = None

    def truncation_error(self, K: Optional[int] = None) -> float:
        if self.exact is None:
            raise ValueError("no exact reference")
        K = len(self.orders) - 1 if K is None else K
        return float(np.linalg.norm(self.exact - sum(self.orders[: K + 1])))


def _dyson_trapezoid(S1: np.ndarray, E: sp.csr_matrix, W: np.ndarray, n: int, h: float, K: int) -> list:
    D = W.shape[0]
    Spow = [np.eye(D, dtype=complex)]
    for _ in range(n):
        Spow.append(S1 @ Spow[-1])
    prev = [_vconj(Spow[i], W) for i in range(n + 1)]
    finals = [prev[-1]]
    for _ in range(K):
        EX = [(E @ X.ravel()).reshape(D, D) for X in prev]
        cur = []
        for i in range(n + 1):
            acc = np.zeros((D, D), dtype=complex)
            for j in range(i + 1):
                wgt = h * (0.5 if j in (0, i) else 1.0) if i > 0 else 0.0
                if wgt:
                    acc += wgt * _vconj(Spow[i - j], EX[j])
            cur.append(acc)
        prev = cur
        finals.append(prev[-1])
    return finals


def dyson(pack: GeneratorPack, basis: FockBasis, W: np.ndarray, t: float, K: int, n_steps: int = 32,
          exact: bool = True) -> DysonResult:
    """Dyson orders D_0..D_K of exp(t G) W around the holomorphic evolution.

    D_k(t) = int_0^t V(t - tau) E D_{k-1}(tau) dtau by nested trapezoid, refined
    once by Richardson extrapolation; the quadrature error is estimated from
    the two grids.
    """
    W = np.asarray(W, dtype=complex)
    H = pack.hamiltonian(basis)
    E = error_operator(pack, basis)
    res = []
    for n in (n_steps, 2 * n_steps):
        h = t / n
        S1 = sla.expm(-1j * h * H)
        res.append(_dyson_trapezoid(S1, E, W, n, h, K))
    orders = [res[1][0]] + [(4 * b - a) / 3 for a, b in zip(res[0][1:], res[1][1:])]
    err = max((float(np.linalg.norm(b - a)) / 3 for a, b in zip(res[0][1:], res[1][1:])), default=0.0)
    ref = None
    if exact:
        G = generator_superoperator(pack, basis)
        ref = expm_multiply(t * G, W.ravel()).reshape(W.shape)
    return DysonResult(orders, sum(orders), err, ref)


def observable_transform(pack: GeneratorPack, basis: FockBasis, O: np.ndarray, t: float, K: int,
                         n_steps: int = 32) -> tuple[np.ndarray, float]:
    """O' with O(exp(tG) W) = O'(V(t) W) + O(E^{K+1}).

    O' = O + sum_k int S(t,tau) R_k(tau) S(tau,t) dtau with R_1(tau) = C(S(tau,t) O S(t,tau))
    and R_{k+1}(tau) = C(int_tau^t S(tau,s) R_k(s) S(s,tau) ds).  Trapezoid on two
    grids with Richardson; returns (O', quadrature estimate).
    """
    H = pack.hamiltonian(basis)
    O = np.asarray(O, dtype=complex)
    outs = []
    for n in (n_steps, 2 * n_steps):
        h = t / n
        S1 = sla.expm(-1j * h * H)
        Sp = [np.eye(basis.dim, dtype=complex)]
        for _ in range(n):
            Sp.append(S1 @ Sp[-1])
        w = np.full(n + 1, h)
        w[0] = w[-1] = h / 2
        # grid tau_i = i h; S(t, tau_i) = Sp[n - i]
        R = [commutator_operator(pack, basis, Sp[n - i].conj().T @ O @ Sp[n - i]) for i in range(n + 1)]
        total = O.copy()
        for k in range(K):
            total = total + sum(w[i] * Sp[n - i] @ R[i] @ Sp[n - i].conj().T for i in range(n + 1))
            if k == K - 1:
                break
            newR = []
            for i in range(n + 1):
                acc = np.zeros_like(O)
                if i < n:
                    for j in range(i, n + 1):
                        wj = h * (0.5 if j in (i, n) else 1.0)
                        acc += wj * Sp[j - i].conj().T @ R[j] @ Sp[j - i]
                newR.append(commutator_operator(pack, basis, acc))
            R = newR
        outs.append(total)
    Op = (4 * outs[1] - outs[0]) / 3
    return Op, float(np.max(np.abs(outs[1] - outs[0]))) / 3


# ---------------------------------------------------------------------------
# structures at intermediate times


@dataclass
class IntermediateStructure:
    t: int
    pack: StructurePack
    norm_correction: float


def _directional(P: CPoly, z0: np.ndarray, dz: np.ndarray) -> np.ndarray:
    deg = max(P.degree, 1)
    c = taylor_coefficients(lambda e: P(z0 + e * dz), deg, 1.0)
    return c[1]


def intermediate_structures(setup: ScatteringSetup, fit: FlowFit, z0: Optional[np.ndarray] = None,
                            slices: Optional[Sequence[int]] = None) -> list[IntermediateStructure]:
    """G, sigma and J at t on the tangent images of P^t at z0, pulled back to incoming coordinates.

    The tangent vectors are restricted to free solutions at t before the
    surface layer forms are evaluated.  norm_correction is |d(s mu^t)| at z0,
    the part of the norm carried by the inner solutions.
    """
    n = setup.n
    z0 = np.zeros(n, dtype=complex) if z0 is None else np.asarray(z0, dtype=complex)
    Rz = np.vstack([setup.Z.real, setup.Z.imag])
    dirs = [setup.Z @ e for e in np.eye(2 * n)]
    out = []
    for t in (fit.slices if slices is None else slices):
        t = int(t)
        jets = []
        for dz in dirs:
            img = _directional(fit.P[t], z0, dz)
            band = np.linalg.solve(Rz, np.concatenate([img.real, img.imag]))
            jets.append(restrict(setup.op, setup.band_jet(band, t), t))
        G, Sg = grams(setup.op.calc, SolutionBasis(tuple(jets)), t)
        corr = max(abs(_directional(fit.mu[t], z0, dz)[0]) for dz in dirs) * setup.s if fit.mu[t].terms else 0.0
        out.append(IntermediateStructure(t, structure_pack(G, Sg), float(corr)))
    return out


# ---------------------------------------------------------------------------
# synthetic generators


def conserving_pack(A: np.ndarray, mixing: CPoly, eta: float, kappa: float) -> GeneratorPack:
    """Generator z' = A z + eta * mixing(z) with sigma fixed by 2 Re<z, phi(z)> + kappa psi = 0.

    A anti-Hermitian keeps the holomorphic part unitary, so every mixing
    term of the lifted generator is proportional to eta.
    """
    n = A.shape[0]
    phi = CPoly.linear(A) + mixing * eta
    zb = [CPoly.coordinate(n, i, conj=True) for i in range(n)]
    inner = CPoly.zero(n, 1)
    for i in range(n):
        inner = inner + zb[i].product(phi.component(i))
    psi = (inner + inner.conj()) * (-1.0 / kappa)
    return _split(phi, psi.truncate(3), kappa, 0.0)
