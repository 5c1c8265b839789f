"""Linearized field operator, causal Green's operators, restriction map,
discrete divergence and inner solutions.

Jets are flattened component-major: the scalar block followed by one block
per embedding coordinate (see `Jet.flat`).  On lattice measures the two
tangential coordinates (time and space) act through finite differences, the
remaining transverse coordinates through analytic derivatives of the kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .cvp_core import DiscreteMeasure, Jet, Kernel, SpacetimeGrid


class HyperbolicityError(RuntimeError):
    """Leading slice block of the transverse operator is singular."""

    def __init__(self, slice_index: int, direction: str):
        super().__init__(f"singular leading block at slice {slice_index} ({direction} marching)")
        self.slice_index = slice_index


class GlobalConstraintError(ValueError):
    pass


# ---------------------------------------------------------------------------
# finite differences and divergence


def difference_operators(grid: SpacetimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences in time and (periodic) space on a slice-major lattice.

    Both annihilate constants and commute. Without periodic time the last
    slice row of D_t is zero.
    """
    if not grid.lattice:
        raise ValueError("difference operators need a lattice grid")
    T, X = grid.T, grid.X
    It = np.eye(T)
    St = np.eye(T, k=1)
    if grid.periodic_time:
        St[T - 1, 0] = 1.0
    else:
        It[T - 1, T - 1] = 0.0
    Dt1 = (St - It) / grid.ht
    Sx = np.roll(np.eye(X), 1, axis=1)
    Dx1 = (Sx - np.eye(X)) / grid.hx
    return np.kron(Dt1, np.eye(X)), np.kron(np.eye(T), Dx1)


def divergence(grid: SpacetimeGrid, rho: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Negative rho-weighted adjoint of the tangential differences.

    sum rho (div v) eta = -sum_k sum rho v^k (D_k eta) holds exactly.
    Only the time and space components of `vec` enter.
    """
    Dt, Dx = difference_operators(grid)
    rho = np.asarray(rho, dtype=float)
    return -(Dt.T @ (rho * vec[:, 0]) + Dx.T @ (rho * vec[:, 1])) / rho


def flux(grid: SpacetimeGrid, rho: np.ndarray, inner: Jet, t: int) -> float:
    """sum over slices < t of rho * div v."""
    mask = grid.past(t)
    return float(np.sum(rho[mask] * divergence(grid, rho, inner.vector)[mask]))


@dataclass(frozen=True)
class InnerSolution:
    jet: Jet
    residual: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return self.jet.vector

    @property
    def scalar(self) -> np.ndarray:
        return self.jet.scalar


def _as_inner(grid: SpacetimeGrid, rho: np.ndarray, vec: np.ndarray) -> InnerSolution:
    return InnerSolution(Jet(divergence(grid, rho, vec), vec))


def inner_from_scalar(grid: SpacetimeGrid, rho: np.ndarray, a: np.ndarray, m: int,
                      retarded: bool = True) -> InnerSolution:
    """Inner solution (a, v) with div v = a.

    Retarded: a forward sweep of a time-directed field, zero before the support
    of a; div v = a holds on every slice but the last (the outgoing flux leaves
    through the end of the window).  Otherwise: minimum rho-weighted norm
    solution using both tangential components; requires sum rho a = 0 when the
    system has no boundary.
    """
    rho = np.asarray(rho, dtype=float)
    a = np.asarray(a, dtype=float)
    N = grid.n_sites
    vec = np.zeros((N, m))
    if not np.any(a):
        return InnerSolution(Jet(np.zeros(N), vec))
    if retarded and not grid.periodic_time:
        T, X = grid.T, grid.X
        g = np.zeros((T, X))
        ra = (rho * a).reshape(T, X)
        acc = np.zeros(X)
        for t in range(T - 1):
            acc = acc + grid.ht * ra[t]
            g[t] = acc
        vec[:, 0] = g.ravel() / rho
        inner = _as_inner(grid, rho, vec)
        last = grid.slice_of < T - 1
        res = float(np.max(np.abs(inner.scalar[last] - a[last]), initial=0.0))
        return InnerSolution(inner.jet, res)
    if grid.periodic_time and abs(np.sum(rho * a)) > 1e-12 * max(1.0, np.sum(np.abs(rho * a))):
        raise GlobalConstraintError("sum rho*a must vanish on a closed lattice")
    Dt, Dx = difference_operators(grid)
    # div v = a  <=>  A [w_t; w_x] = -rho a with w = rho v
    A = np.hstack([Dt.T, Dx.T])
    W = np.concatenate([rho, rho])
    # least rho-weighted norm in v: minimize sum w^2/rho
    As = A * np.sqrt(W)[None, :]
    y, *_ = np.linalg.lstsq(As, -rho * a, rcond=None)
    w = np.sqrt(W) * y
    vec[:, 0] = w[:N] / rho
    vec[:, 1] = w[N:] / rho
    inner = _as_inner(grid, rho, vec)
    res = float(np.max(np.abs(inner.scalar - a)))
    if not grid.periodic_time and res > 1e-9 * max(1.0, np.max(np.abs(a))):
        raise GlobalConstraintError(f"divergence equation not solvable, residual {res:.3e}")
    return InnerSolution(inner.jet, res)


def inner_with_flux(grid: SpacetimeGrid, rho: np.ndarray, c: float, m: int) -> InnerSolution:
    """Time-directed field with flux c through every slice of the window.

    Its divergence vanishes away from the first and last slice.
    """
    rho = np.asarray(rho, dtype=float)
    N = grid.n_sites
    vec = np.zeros((N, m))
    for t in range(grid.T):
        idx = grid.sites_in(t)
        vec[idx, 0] = c * grid.ht / np.sum(rho[idx])
    return _as_inner(grid, rho, vec)


# ---------------------------------------------------------------------------
# jet calculus on a measure


class JetCalculus:
    """Kernel derivative tables on all site pairs plus the jet component operators.

    Component c = 0 is the scalar, c = k + 1 the k-th coordinate.  Each
    component has a linear operator acting on the first argument (None for the
    identity) and an analytic derivative index (None for none).
    """

    def __init__(self, k: Kernel, rho: DiscreteMeasure, lattice_mode: Optional[bool] = None):
        self.kernel = k
        self.measure = rho
        self.rho = rho.weights
        self.N = rho.n
        self.m = rho.dim
        if k.dim != self.m:
            raise ValueError("kernel and measure dimensions differ")
        self.lattice_mode = rho.grid.lattice if lattice_mode is None else lattice_mode
        self.ops: list[Optional[np.ndarray]] = [None]
        self.derivs: list[Optional[int]] = [None]
        if self.lattice_mode:
            Dt, Dx = difference_operators(rho.grid)
            self.D = (Dt, Dx)
            for kk in range(self.m):
                if kk < 2:
                    self.ops.append((Dt, Dx)[kk])
                    self.derivs.append(None)
                else:
                    self.ops.append(None)
                    self.derivs.append(kk)
        else:
            self.D = None
            for kk in range(self.m):
                self.ops.append(None)
                self.derivs.append(kk)
        self._tables()

    def _tables(self, chunk: int = 32):
        N, m = self.N, self.m
        P = self.measure.points
        self.K = np.empty((N, N))
        self.d1 = np.empty((m, N, N))
        self.d2 = np.empty((m, N, N))
        self.h11 = np.empty((m, m, N, N))
        self.h12 = np.empty((m, m, N, N))
        self.h22 = np.empty((m, m, N, N))
        for i0 in range(0, N, chunk):
            i1 = min(N, i0 + chunk)
            x = np.repeat(P[i0:i1], N, axis=0)
            y = np.tile(P, (i1 - i0, 1))
            d = self.kernel.derivatives(x, y)
            n = i1 - i0
            self.K[i0:i1] = d.val.reshape(n, N)
            self.d1[:, i0:i1] = d.d1.reshape(n, N, m).transpose(2, 0, 1)
            self.d2[:, i0:i1] = d.d2.reshape(n, N, m).transpose(2, 0, 1)
            self.h11[:, :, i0:i1] = d.h11.reshape(n, N, m, m).transpose(2, 3, 0, 1)
            self.h12[:, :, i0:i1] = d.h12.reshape(n, N, m, m).transpose(2, 3, 0, 1)
            self.h22[:, :, i0:i1] = d.h22.reshape(n, N, m, m).transpose(2, 3, 0, 1)

    # kernel derivative matrices indexed by analytic derivative indices
    def M(self, d: Optional[int], e: Optional[int]) -> np.ndarray:
        """d_{1,d} d_{2,e} L(x, y)."""
        if d is None and e is None:
            return self.K
        if e is None:
            return self.d1[d]
        if d is None:
            return self.d2[e]
        return self.h12[d, e]

    def H11(self, d: Optional[int], e: Optional[int]) -> np.ndarray:
        if d is None and e is None:
            return self.K
        if e is None:
            return self.d1[d]
        if d is None:
            return self.d1[e]
        return self.h11[d, e]

    def H22(self, d: Optional[int], e: Optional[int]) -> np.ndarray:
        if d is None and e is None:
            return self.K
        if e is None:
            return self.d2[d]
        if d is None:
            return self.d2[e]
        return self.h22[d, e]

    @property
    def ncomp(self) -> int:
        return self.m + 1

    @staticmethod
    def _left(op, A):
        return A if op is None else op @ A

    @staticmethod
    def _right(A, op):
        return A if op is None else A @ op.T

    def comps(self, u: Jet) -> list[np.ndarray]:
        return [u.scalar] + [u.vector[:, k] for k in range(self.m)]

    def first1(self, u: Jet) -> np.ndarray:
        """Matrix of nabla_{1,u} L(x, y)."""
        out = np.zeros((self.N, self.N))
        for c, uc in enumerate(self.comps(u)):
            if np.any(uc):
                out += uc[:, None] * self._left(self.ops[c], self.M(self.derivs[c], None))
        return out

    def first2(self, u: Jet) -> np.ndarray:
        """Matrix of nabla_{2,u} L(x, y)."""
        out = np.zeros((self.N, self.N))
        for c, uc in enumerate(self.comps(u)):
            if np.any(uc):
                out += self._right(self.M(None, self.derivs[c]), self.ops[c]) * uc[None, :]
        return out

    def second11(self, u: Jet, v: Jet) -> np.ndarray:
        out = np.zeros((self.N, self.N))
        cu, cv = self.comps(u), self.comps(v)
        for c in range(self.ncomp):
            if not np.any(cu[c]):
                continue
            for e in range(self.ncomp):
                if not np.any(cv[e]):
                    continue
                A = self._left(self.ops[c], self._left(self.ops[e], self.H11(self.derivs[c], self.derivs[e])))
                out += (cu[c] * cv[e])[:, None] * A
        return out

    def second22(self, u: Jet, v: Jet) -> np.ndarray:
        out = np.zeros((self.N, self.N))
        cu, cv = self.comps(u), self.comps(v)
        for c in range(self.ncomp):
            if not np.any(cu[c]):
                continue
            for e in range(self.ncomp):
                if not np.any(cv[e]):
                    continue
                A = self._right(self._right(self.H22(self.derivs[c], self.derivs[e]), self.ops[c]), self.ops[e])
                out += A * (cu[c] * cv[e])[None, :]
        return out

    def second12(self, u: Jet, v: Jet) -> np.ndarray:
        """Matrix of nabla_{1,u} nabla_{2,v} L(x, y)."""
        out = np.zeros((self.N, self.N))
        cu, cv = self.comps(u), self.comps(v)
        for c in range(self.ncomp):
            if not np.any(cu[c]):
                continue
            for e in range(self.ncomp):
                if not np.any(cv[e]):
                    continue
                A = self._right(self._left(self.ops[c], self.M(self.derivs[c], self.derivs[e])), self.ops[e])
                out += cu[c][:, None] * A * cv[e][None, :]
        return out

    def grad_ell(self, u: Jet, s: float) -> np.ndarray:
        """Per-site jet derivative of ell: sum_y rho_y nabla_{1,u} L(x,y) - a(x) s."""
        return self.first1(u) @ self.rho - u.scalar * s


# ---------------------------------------------------------------------------
# linearized operator


@dataclass
class LinearizedOperator:
    kernel: Kernel
    measure: DiscreteMeasure
    s: float
    calc: JetCalculus
    matrix: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.calc.N

    @property
    def m(self) -> int:
        return self.calc.m

    @property
    def grid(self) -> SpacetimeGrid:
        return self.measure.grid

    def apply(self, v: Jet) -> np.ndarray:
        """Dual jet D v (component-major)."""
        return self.matrix @ v.flat()

    def pairing(self, u: Jet, v: Jet) -> np.ndarray:
        """Per-site <u, Delta v>(x)."""
        dv = self.apply(v).reshape(self.m + 1, self.N) / self.calc.rho[None, :]
        return np.sum(np.vstack([u.scalar, u.vector.T]) * dv, axis=0)

    # transverse / scalar index sets
    @cached_property
    def transverse_components(self) -> list[int]:
        return [c for c in range(1, self.m + 1) if self.calc.ops[c] is None]

    def _block_index(self, comps: list[int]) -> np.ndarray:
        return np.concatenate([c * self.N + np.arange(self.N) for c in comps]) if comps else np.zeros(0, int)

    @cached_property
    def bandwidth(self) -> int:
        """Largest slice distance coupled by the transverse block."""
        idx = self._block_index(self.transverse_components)
        sub = self.matrix[np.ix_(idx, idx)]
        sl = np.tile(self.grid.slice_of, len(self.transverse_components))
        rows, cols = np.nonzero(np.abs(sub) > 1e-14 * max(1.0, np.abs(sub).max()))
        return int(np.max(np.abs(sl[rows] - sl[cols]), initial=0))

    def _slice_blocks(self):
        """Transverse block split into slice blocks, unknowns ordered (slice, comp, site)."""
        if "blocks" in self._cache:
            return self._cache["blocks"]
        comps = self.transverse_components
        T, X = self.grid.T, self.grid.X
        order = np.array([c * self.N + t * X + x for t in range(T) for c in comps for x in range(X)])
        A = self.matrix[np.ix_(order, order)]
        b = len(comps) * X
        self._cache["blocks"] = (order, A, b)
        return self._cache["blocks"]

    def _scalar_lu(self):
        if "lu" not in self._cache:
            aa = self.matrix[: self.N, : self.N]
            self._cache["lu"] = sla.lu_factor(aa)
        return self._cache["lu"]


def assemble_delta(k: Kernel, rho: DiscreteMeasure, s: float,
                   calc: Optional[JetCalculus] = None) -> LinearizedOperator:
    """Symmetric matrix of the bilinear form sum_x rho <u, Delta v>(x)."""
    calc = calc or JetCalculus(k, rho)
    N, nc = calc.N, calc.ncomp
    r = calc.rho
    D = np.zeros((nc * N, nc * N))
    for c in range(nc):
        for e in range(c, nc):
            dc, de = calc.derivs[c], calc.derivs[e]
            g = calc.H11(dc, de) @ r
            local = calc._left(calc.ops[c], calc._left(calc.ops[e], g[:, None]))[:, 0]
            blk = np.diag(r * local) + r[:, None] * calc._right(calc._left(calc.ops[c], calc.M(dc, de)), calc.ops[e]) * r[None, :]
            if c == 0 and e == 0:
                blk -= s * np.diag(r)
            D[c * N:(c + 1) * N, e * N:(e + 1) * N] = blk
            if e != c:
                D[e * N:(e + 1) * N, c * N:(c + 1) * N] = blk.T
    return LinearizedOperator(k, rho, s, calc, D)


# ---------------------------------------------------------------------------
# Green's operators


@dataclass(frozen=True)
class GreensResult:
    jet: Jet
    residual: float
    rows: tuple


def _march(op: LinearizedOperator, rhs_t: np.ndarray, retarded: bool, start: Optional[int] = None,
           init: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve the banded transverse system slice by slice.

    rhs_t and the result are in (slice, comp, site) order.  Rows are used in the
    marching direction; `init` fixes the first 2R slices (band data) instead of zeros.
    """
    order, A, b = op._slice_blocks()
    T, R = op.grid.T, op.bandwidth
    w = np.zeros(T * b)
    f = rhs_t.reshape(T, b)
    if R == 0:
        raise HyperbolicityError(0, "forward" if retarded else "backward")
    nz = np.flatnonzero(np.any(f != 0, axis=1))
    if retarded:
        first = (nz[0] if len(nz) else T) if start is None else start
        if init is not None:
            w[(first - R) * b:(first + R) * b] = init
        for t in range(first, T - R):
            lead = A[t * b:(t + 1) * b, (t + R) * b:(t + R + 1) * b]
            lo = max(0, t - R) * b
            acc = f[t] - A[t * b:(t + 1) * b, lo:(t + R) * b] @ w[lo:(t + R) * b]
            try:
                w[(t + R) * b:(t + R + 1) * b] = np.linalg.solve(lead, acc)
            except np.linalg.LinAlgError:
                raise HyperbolicityError(t + R, "forward") from None
            if not np.all(np.isfinite(w)):
                raise HyperbolicityError(t + R, "forward")
    else:
        last = (nz[-1] if len(nz) else -1) if start is None else start
        if init is not None:
            w[(last - R + 1) * b:(last + R + 1) * b] = init
        for t in range(last, R - 1, -1):
            lead = A[t * b:(t + 1) * b, (t - R) * b:(t - R + 1) * b]
            hi = min(T, t + R + 1) * b
            acc = f[t] - A[t * b:(t + 1) * b, (t - R + 1) * b:hi] @ w[(t - R + 1) * b:hi]
            try:
                w[(t - R) * b:(t - R + 1) * b] = np.linalg.solve(lead, acc)
            except np.linalg.LinAlgError:
                raise HyperbolicityError(t - R, "backward") from None
    return w


def _check_lead(op: LinearizedOperator):
    order, A, b = op._slice_blocks()
    R = op.bandwidth
    t = op.grid.T // 2
    lead = A[t * b:(t + 1) * b, (t + R) * b:(t + R + 1) * b]
    if R == 0 or np.linalg.matrix_rank(lead) < b:
        raise HyperbolicityError(t + R, "forward")


def greens_apply(op: LinearizedOperator, kind: str, rhs: np.ndarray) -> GreensResult:
    """Solve Delta v = -rhs with retarded or advanced support.

    The transverse sector is marched slice by slice; the scalar sector is not
    hyperbolic and is solved globally.  Tangential components of the result
    vanish.  The residual is measured on the rows the solution is meant to
    satisfy (all rows except the last/first R slices).
    """
    if kind not in ("retarded", "advanced"):
        raise ValueError("kind must be 'retarded' or 'advanced'")
    if not op.grid.lattice:
        raise ValueError("Green's operators need a lattice measure")
    N, m = op.N, op.m
    rhs = np.asarray(rhs, dtype=float)
    out = np.zeros((m + 1) * N)
    if np.any(rhs):
        _check_lead(op)
        order, A, b = op._slice_blocks()
        w = _march(op, -rhs[order], kind == "retarded")
        out[order] = w
        if np.any(rhs[:N]):
            out[:N] = sla.lu_solve(op._scalar_lu(), -rhs[:N])
    R = op.bandwidth
    T = op.grid.T
    rows = (0, T - 1 - R) if kind == "retarded" else (R, T - 1)
    res = _residual(op, out, rhs, rows)
    return GreensResult(Jet.from_flat(out, m), res, rows)


def _residual(op: LinearizedOperator, v: np.ndarray, rhs: np.ndarray, rows: tuple) -> float:
    N, m = op.N, op.m
    sl = np.tile(op.grid.slice_of, m + 1)
    mask = (sl >= rows[0]) & (sl <= rows[1])
    r = op.matrix @ v + rhs
    scale = max(1.0, float(np.max(np.abs(rhs))))
    return float(np.max(np.abs(r[mask]), initial=0.0)) / scale


def fundamental_solution(op: LinearizedOperator, rhs: np.ndarray) -> GreensResult:
    """S_ret - S_adv applied to rhs; a solution of the homogeneous equation."""
    a = greens_apply(op, "retarded", rhs)
    b = greens_apply(op, "advanced", rhs)
    v = a.jet - b.jet
    R = op.bandwidth
    rows = (R, op.grid.T - 1 - R)
    return GreensResult(v, _residual(op, v.flat(), np.zeros_like(rhs), rows), rows)


def band_slices(op: LinearizedOperator, t0: int) -> np.ndarray:
    """Slices carrying the Cauchy data at t0."""
    R = op.bandwidth
    return np.arange(t0 - R, t0 + R)


def restrict(op: LinearizedOperator, v: Jet, t0: int) -> Jet:
    """Solution of the homogeneous equation matching the transverse data of v on
    the band of slices at t0 and keeping the tangential field of v.

    The scalar is the divergence of the tangential field, so the tangential
    part is an inner solution.
    """
    R, T = op.bandwidth, op.grid.T
    if t0 - R < 0 or t0 + R > T:
        raise ValueError("band does not fit into the window")
    order, A, b = op._slice_blocks()
    flat = v.flat()
    data = flat[order][(t0 - R) * b:(t0 + R) * b]
    zero = np.zeros(T * b)
    fw = _march(op, zero, True, start=t0, init=data)
    bw = _march(op, zero, False, start=t0 - 1, init=data)
    w = np.zeros(T * b)
    w[: t0 * b] = bw[: t0 * b]
    w[t0 * b:] = fw[t0 * b:]
    out = np.zeros_like(flat)
    out[order] = w
    res = Jet.from_flat(out, op.m)
    vec = res.vector.copy()
    vec[:, :2] = v.vector[:, :2]
    return Jet(divergence(op.grid, op.calc.rho, vec), vec)


def strip_scalar(op: LinearizedOperator, v: Jet) -> tuple[Jet, InnerSolution]:
    """Split v = w + n with n an inner solution carrying the scalar of v."""
    n = inner_from_scalar(op.grid, op.calc.rho, v.scalar, op.m, retarded=True)
    return v - n.jet, n
