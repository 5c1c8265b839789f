"""Discrete causal variational principle: kernels, measures, action, EL function.

Kernels are evaluated in a vectorized way over arrays of point pairs.  Exact
first and second derivatives come from a small forward-mode Taylor arithmetic
so every kernel family is written once as an expression.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np


# ---------------------------------------------------------------------------
# second-order forward-mode arithmetic


class Taylor2:
    """Value, gradient and Hessian of a batch of scalars w.r.t. k variables."""

    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, v, g, h=None):
        self.v = v
        self.g = g
        self.h = h

    @staticmethod
    def variables(values: np.ndarray, second: bool = True) -> list["Taylor2"]:
        n, k = values.shape
        out = []
        for i in range(k):
            g = np.zeros((n, k))
            g[:, i] = 1.0
            h = np.zeros((n, k, k)) if second else None
            out.append(Taylor2(values[:, i].copy(), g, h))
        return out

    def _coerce(self, other):
        if isinstance(other, Taylor2):
            return other
        c = np.asarray(other, dtype=float)
        n, k = self.g.shape
        return Taylor2(np.broadcast_to(c, (n,)).astype(float), np.zeros((n, k)),
                       None if self.h is None else np.zeros((n, k, k)))

    def __add__(self, other):
        o = self._coerce(other)
        h = None if self.h is None else self.h + o.h
        return Taylor2(self.v + o.v, self.g + o.g, h)

    __radd__ = __add__

    def __neg__(self):
        return Taylor2(-self.v, -self.g, None if self.h is None else -self.h)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, Taylor2):
            c = np.asarray(other, dtype=float)
            if c.ndim == 0 or c.shape == self.v.shape:
                h = None if self.h is None else self.h * c[..., None, None] if c.ndim else self.h * c
                return Taylor2(self.v * c, self.g * (c[..., None] if c.ndim else c), h)
            other = self._coerce(other)
        o = other
        v = self.v * o.v
        g = self.g * o.v[:, None] + o.g * self.v[:, None]
        h = None
        if self.h is not None:
            outer = np.einsum("ni,nj->nij", self.g, o.g)
            h = (self.h * o.v[:, None, None] + o.h * self.v[:, None, None]
                 + outer + outer.transpose(0, 2, 1))
        return Taylor2(v, g, h)

    __rmul__ = __mul__

    def compose(self, f0, f1, f2) -> "Taylor2":
        """Chain rule for a univariate function with values f0, f1, f2 at self.v."""
        g = self.g * f1[:, None]
        h = None
        if self.h is not None:
            h = self.h * f1[:, None, None] + np.einsum("ni,nj->nij", self.g, self.g) * f2[:, None, None]
        return Taylor2(f0, g, h)


def _apply(x, fn: Callable[[np.ndarray], tuple]):
    """Apply a univariate function returning (f, f', f'') to an array or Taylor2."""
    if isinstance(x, Taylor2):
        f0, f1, f2 = fn(x.v)
        return x.compose(f0, f1, f2)
    return fn(np.asarray(x, dtype=float))[0]


def _value(x):
    return x.v if isinstance(x, Taylor2) else x


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class PairDerivatives:
    """Kernel value and coordinate derivatives on a batch of pairs (x, y)."""

    val: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    h11: Optional[np.ndarray] = None
    h12: Optional[np.ndarray] = None
    h22: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Kernel:
    """Base class. Subclasses implement `_expr` on coordinate lists."""

    dim: int
    periods: tuple = ()

    family = "abstract"

    def __post_init__(self):
        if not self.periods:
            object.__setattr__(self, "periods", (None,) * self.dim)
        if len(self.periods) != self.dim:
            raise ValueError("periods must have one entry per coordinate")

    @property
    def range(self) -> float:
        raise NotImplementedError

    @property
    def poly_radius(self) -> Optional[float]:
        """Transverse displacement below which the kernel is polynomial, if any."""
        return None

    def _expr(self, xs, ys):
        raise NotImplementedError

    def _delta(self, xs, ys):
        out = []
        for k, (a, b) in enumerate(zip(xs, ys)):
            d = a - b
            p = self.periods[k]
            if p is not None:
                d = d - p * np.round(_value(d) / p)
            out.append(d)
        return out

    def _check(self, x: np.ndarray, y: np.ndarray):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1] != self.dim or y.shape[-1] != self.dim:
            raise ValueError(f"points must have {self.dim} coordinates, got {x.shape[-1]} and {y.shape[-1]}")
        return np.broadcast_arrays(x, y)

    def value(self, x, y) -> np.ndarray:
        x, y = self._check(x, y)
        shape = x.shape[:-1]
        xf = x.reshape(-1, self.dim)
        yf = y.reshape(-1, self.dim)
        v = self._expr([xf[:, k] for k in range(self.dim)], [yf[:, k] for k in range(self.dim)])
        return np.asarray(v, dtype=float).reshape(shape)

    def derivatives(self, x, y, second: bool = True) -> PairDerivatives:
        """Value and derivatives for pairs; arrays are flattened over the batch."""
        x, y = self._check(x, y)
        m = self.dim
        xy = np.concatenate([x.reshape(-1, m), y.reshape(-1, m)], axis=1)
        var = Taylor2.variables(xy, second)
        t = self._expr(var[:m], var[m:])
        t = t if isinstance(t, Taylor2) else var[0]._coerce(t)
        if not second:
            return PairDerivatives(t.v, t.g[:, :m], t.g[:, m:])
        return PairDerivatives(t.v, t.g[:, :m], t.g[:, m:],
                               t.h[:, :m, :m], t.h[:, :m, m:], t.h[:, m:, m:])

    def with_periods(self, periods) -> "Kernel":
        return replace(self, periods=tuple(periods))

    def to_dict(self) -> dict:
        raise NotImplementedError


def _sqnorm(ds):
    u = ds[0] * ds[0]
    for d in ds[1:]:
        u = u + d * d
    return u


@dataclass(frozen=True)
class BumpKernel(Kernel):
    """L = amplitude * (1 - |x-y|^2/r^2)^2 inside the range, zero outside."""

    r: float = 1.0
    amplitude: float = 1.0

    family = "bump"

    @property
    def range(self) -> float:
        return self.r

    def _expr(self, xs, ys):
        r2 = self.r ** 2
        amp = self.amplitude

        def phi(u):
            inside = u < r2
            w = np.where(inside, 1.0 - u / r2, 0.0)
            return (amp * w * w, amp * np.where(inside, -2.0 * w / r2, 0.0),
                    amp * np.where(inside, 2.0 / r2 ** 2, 0.0))

        return _apply(_sqnorm(self._delta(xs, ys)), phi)

    def to_dict(self) -> dict:
        return {"family": "bump", "range": self.r, "amplitude": self.amplitude,
                "dim": self.dim, "periods": list(self.periods)}


@dataclass(frozen=True)
class GaussKernel(Kernel):
    """Gaussian in |x-y|^2 minus its tangent line at the cutoff, normalized to peak 1.

    g(u) - g(R) - g'(R)(u - R) is nonnegative for a convex g, and C^1 at u = R.
    """

    r: float = 1.0
    width: float = 0.5

    family = "gauss"

    @property
    def range(self) -> float:
        return self.r

    def _expr(self, xs, ys):
        R = self.r ** 2
        c = 1.0 / (2.0 * self.width ** 2)
        gR = np.exp(-c * R)
        dgR = -c * gR
        norm = 1.0 - gR + dgR * R

        def phi(u):
            inside = u < R
            g = np.exp(-c * np.minimum(u, R))
            f0 = np.where(inside, g - gR - dgR * (u - R), 0.0) / norm
            f1 = np.where(inside, -c * g - dgR, 0.0) / norm
            f2 = np.where(inside, c * c * g, 0.0) / norm
            return f0, f1, f2

        return _apply(_sqnorm(self._delta(xs, ys)), phi)

    def to_dict(self) -> dict:
        return {"family": "gauss", "range": self.r, "width": self.width,
                "dim": self.dim, "periods": list(self.periods)}


def _smoothstep_cut(zc: float):
    """psi(z) = 1 on |z| <= zc/2, cubic C^1 decay to 0 at |z| = zc."""
    half = zc / 2.0

    def psi(z):
        a = np.abs(z)
        sgn = np.sign(z)
        u = np.clip((a - half) / half, 0.0, 1.0)
        mid = (a > half) & (a < zc)
        f0 = np.where(a <= half, 1.0, np.where(mid, 1.0 - 3 * u ** 2 + 2 * u ** 3, 0.0))
        f1 = np.where(mid, (-6 * u + 6 * u ** 2) / half * sgn, 0.0)
        f2 = np.where(mid, (-6 + 12 * u) / half ** 2, 0.0)
        return f0, f1, f2

    return psi


def _window(t_a: float, t_b: float):
    """sin^2 bump on [t_a, t_b], zero elsewhere (C^1)."""
    span = t_b - t_a

    def w(t):
        inside = (t > t_a) & (t < t_b)
        k = np.pi / span
        arg = k * (t - t_a)
        f0 = np.where(inside, np.sin(arg) ** 2, 0.0)
        f1 = np.where(inside, k * np.sin(2 * arg), 0.0)
        f2 = np.where(inside, 2 * k * k * np.cos(2 * arg), 0.0)
        return f0, f1, f2

    return w


@dataclass(frozen=True)
class LayeredKernel(Kernel):
    """Kernel on (t, x, z) built for lattice dynamics in the transverse coordinate z.

    L = B(q) psi(z_x) psi(z_y) P with q = tau^2 + xi^2, tau = (t_y - t_x)/s_t,
    xi = (x_y - x_x)/s_x, B = (1 - q/rhat^2)^2 and

        P = 1 + a tau (z_x^2 - z_y^2)/2 + kappa(tau, xi) z_x z_y
              + lam chi(t_x, t_y) z_x z_y (z_x + z_y),
        kappa = k_t tau^2 + k_x xi^2 + k_0 (1 - tau^2 - xi^2).

    chi is a product of sin^2 windows on [t_a, t_b].
    """

    s_t: float = 1.0
    s_x: float = 1.0
    rhat: float = 1.2
    z_c: float = 0.5
    a: float = 0.0
    k_t: float = 0.0
    k_x: float = 0.0
    k_0: float = 0.0
    lam: float = 0.0
    window: tuple = (0.0, 1.0)

    family = "layered"

    def __post_init__(self):
        if self.dim != 3:
            raise ValueError("layered kernel requires dim = 3")
        super().__post_init__()
        if self.window[1] <= self.window[0]:
            raise ValueError("interaction window must have positive length")
        if self.positivity_margin() < 0:
            raise ValueError("layered kernel parameters violate nonnegativity; reduce z_c")

    def kappa_max(self) -> float:
        r2 = self.rhat ** 2
        vals = [self.k_0, self.k_0 + (self.k_t - self.k_0) * r2, self.k_0 + (self.k_x - self.k_0) * r2]
        return float(max(abs(v) for v in vals))

    def positivity_margin(self) -> float:
        zc = self.z_c
        return 1.0 - abs(self.a) * self.rhat * zc ** 2 - self.kappa_max() * zc ** 2 - 2 * abs(self.lam) * zc ** 3

    @property
    def B1(self) -> float:
        return (1.0 - 1.0 / self.rhat ** 2) ** 2

    @property
    def range(self) -> float:
        return float(np.hypot(self.rhat * max(self.s_t, self.s_x), 2 * self.z_c))

    @property
    def poly_radius(self) -> Optional[float]:
        return self.z_c / 2.0

    def _expr(self, xs, ys):
        tx, xx, zx = xs
        ty, xy, zy = ys
        dt = ty - tx
        dx = xy - xx
        p = self.periods[1]
        if p is not None:
            dx = dx - p * np.round(_value(dx) / p)
        tau = dt * (1.0 / self.s_t)
        xi = dx * (1.0 / self.s_x)
        t2 = tau * tau
        x2 = xi * xi
        r2 = self.rhat ** 2

        def bump(q):
            inside = q < r2
            w = np.where(inside, 1.0 - q / r2, 0.0)
            return w * w, np.where(inside, -2.0 * w / r2, 0.0), np.where(inside, 2.0 / r2 ** 2, 0.0)

        B = _apply(t2 + x2, bump)
        psi = _smoothstep_cut(self.z_c)
        Psi = _apply(zx, psi) * _apply(zy, psi)
        kap = t2 * self.k_t + x2 * self.k_x + (1.0 - t2 - x2) * self.k_0
        P = 1.0 + tau * (zx * zx - zy * zy) * (0.5 * self.a) + kap * zx * zy
        if self.lam != 0.0:
            w = _window(*self.window)
            chi = _apply(tx, w) * _apply(ty, w)
            P = P + chi * zx * zy * (zx + zy) * self.lam
        return B * Psi * P

    def to_dict(self) -> dict:
        return {"family": "layered", "range": self.range, "dim": 3, "periods": list(self.periods),
                "s_t": self.s_t, "s_x": self.s_x, "rhat": self.rhat, "z_c": self.z_c, "a": self.a,
                "k_t": self.k_t, "k_x": self.k_x, "k_0": self.k_0, "lam": self.lam,
                "window": list(self.window)}


def klein_gordon_kernel(c: float = 0.7, mu: float = 0.5, kappa0: float = 1.0, *, s_t: float = 1.0,
                        s_x: float = 1.0, rhat: float = 1.2, lam: float = 0.0, window=(0.0, 1.0),
                        z_c: Optional[float] = None, space_period: Optional[float] = None) -> LayeredKernel:
    """Layered kernel whose transverse linearization on the unit lattice is the leapfrog
    Klein-Gordon scheme 2cos(w) - 2 = c^2 (2cos(k) - 2) - mu^2.

    Requires 2c^2 + mu^2/2 <= 2 for a real spectrum.
    """
    if 2 * c * c + 0.5 * mu * mu > 2.0:
        raise ValueError("unstable lattice dispersion: need 2c^2 + mu^2/2 <= 2")
    B1 = (1.0 - 1.0 / rhat ** 2) ** 2
    k_t = kappa0 / B1
    k_x = -c * c * kappa0 / B1
    k_0 = kappa0 * (-2.0 + 2.0 * c * c + mu * mu)
    base = dict(dim=3, periods=(None, space_period, None), s_t=s_t, s_x=s_x, rhat=rhat,
                a=k_t, k_t=k_t, k_x=k_x, k_0=k_0, lam=lam, window=tuple(window))
    if z_c is None:
        probe = LayeredKernel(z_c=1e-3, **base)
        coef = abs(probe.a) * rhat + probe.kappa_max() + 2 * abs(lam)
        z_c = min(1.0, float(np.sqrt(0.5 / coef)))
    return LayeredKernel(z_c=z_c, **base)


def kernel_from_dict(d: dict) -> Kernel:
    fam = d.get("family")
    periods = tuple(d.get("periods") or ())
    dim = int(d.get("dim", 2))
    if fam == "bump":
        return BumpKernel(dim=dim, periods=periods, r=float(d["range"]), amplitude=float(d.get("amplitude", 1.0)))
    if fam == "gauss":
        return GaussKernel(dim=dim, periods=periods, r=float(d["range"]), width=float(d.get("width", 0.5)))
    if fam == "layered":
        keys = ("s_t", "s_x", "rhat", "z_c", "a", "k_t", "k_x", "k_0", "lam")
        kw = {k: float(d[k]) for k in keys if k in d}
        return LayeredKernel(dim=3, periods=periods or (None, None, None),
                             window=tuple(d.get("window", (0.0, 1.0))), **kw)
    if fam == "klein_gordon":
        return klein_gordon_kernel(float(d.get("c", 0.7)), float(d.get("mu", 0.5)), float(d.get("kappa0", 1.0)),
                                   lam=float(d.get("lam", 0.0)), window=tuple(d.get("window", (0.0, 1.0))),
                                   space_period=d.get("space_period"))
    raise ValueError(f"unknown kernel family {fam!r}")


def eval_kernel(k: Kernel, x, y) -> float:
    """L(x, y) for single points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (k.dim,) or y.shape != (k.dim,):
        raise ValueError(f"points must be vectors of length {k.dim}")
    return float(k.value(x, y))


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class SpacetimeGrid:
    """Slice structure of the support.

    For lattice measures sites are ordered slice-major (index = t*X + x), time
    spacing ht, spatial spacing hx, with periodic space.
    """

    T: int
    X: int
    slice_of: np.ndarray
    h: np.ndarray
    ht: float = 1.0
    hx: float = 1.0
    lattice: bool = False
    periodic_time: bool = False

    def __post_init__(self):
        if np.any(np.diff(self.slice_of) < 0):
            raise ValueError("sites must be ordered by slice")
        if np.any(self.h <= 0):
            raise ValueError("site weights h must be positive")

    @property
    def n_sites(self) -> int:
        return len(self.slice_of)

    def sites_in(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.slice_of == t)

    def past(self, t: int) -> np.ndarray:
        """Boolean mask of the region before slice t (slices 0..t-1)."""
        return self.slice_of < t

    def to_dict(self) -> dict:
        return {"T": self.T, "X": self.X, "slice_of": self.slice_of.tolist(), "h": self.h.tolist(),
                "ht": self.ht, "hx": self.hx, "lattice": self.lattice, "periodic_time": self.periodic_time}

    @staticmethod
    def from_dict(d: dict) -> "SpacetimeGrid":
        return SpacetimeGrid(int(d["T"]), int(d["X"]), np.asarray(d["slice_of"], dtype=int),
                             np.asarray(d["h"], dtype=float), float(d.get("ht", 1.0)), float(d.get("hx", 1.0)),
                             bool(d.get("lattice", False)), bool(d.get("periodic_time", False)))


@dataclass(frozen=True)
class DiscreteMeasure:
    grid: SpacetimeGrid
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[0] != len(self.weights):
            raise ValueError("points and weights must match")
        if len(self.weights) != self.grid.n_sites:
            raise ValueError("grid size does not match the support")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def volume(self) -> float:
        return float(self.weights.sum())


def simple_grid(slices: Sequence[int]) -> SpacetimeGrid:
    """Grid for an unstructured measure given the slice index of each site."""
    s = np.asarray(slices, dtype=int)
    return SpacetimeGrid(int(s.max()) + 1 if len(s) else 0, 0, s, np.ones(len(s)))


def make_measure(points, weights, slices=None) -> DiscreteMeasure:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.asarray(weights, dtype=float)
    slices = np.zeros(len(weights), dtype=int) if slices is None else slices
    return DiscreteMeasure(simple_grid(slices), points, weights)


def lattice_measure(T: int, X: int, m: int = 3, ht: float = 1.0, hx: float = 1.0, rho: float = 1.0,
                    periodic_time: bool = False, t0: float = 0.0) -> DiscreteMeasure:
    """Homogeneous lattice at zero transverse coordinates, slice-major ordering."""
    if m < 2:
        raise ValueError("lattice needs at least one time and one space coordinate")
    tt, xx = np.meshgrid(t0 + ht * np.arange(T), hx * np.arange(X), indexing="ij")
    pts = np.zeros((T * X, m))
    pts[:, 0] = tt.ravel()
    pts[:, 1] = xx.ravel()
    grid = SpacetimeGrid(T, X, np.repeat(np.arange(T), X), np.full(T * X, ht * hx), ht, hx, True, periodic_time)
    return DiscreteMeasure(grid, pts, np.full(T * X, float(rho)))


def lattice_vacuum(k: Kernel, T: int, X: int, ht: float = 1.0, hx: float = 1.0, rho: float = 1.0,
                   periodic_time: bool = False) -> tuple[Kernel, DiscreteMeasure, float]:
    """Lattice vacuum with the kernel made periodic in space (and time if requested).

    Returns (kernel, measure, s) with s = sum_j L(x_0, x_j) rho_j at a site whose
    neighbourhood is complete, so ell vanishes on all interior sites.
    """
    periods = list(k.periods)
    periods[1] = X * hx
    if periodic_time:
        periods[0] = T * ht
    k = k.with_periods(periods)
    mu = lattice_measure(T, X, k.dim, ht, hx, rho, periodic_time)
    site = (T // 2) * X
    s = float(k.value(mu.points[site], mu.points) @ mu.weights)
    return k, mu, s


# ---------------------------------------------------------------------------
# jets and deformations


@dataclass(frozen=True)
class Jet:
    scalar: np.ndarray
    vector: np.ndarray

    def __post_init__(self):
        if self.vector.ndim != 2 or self.vector.shape[0] != len(self.scalar):
            raise ValueError("scalar and vector parts must have matching length")

    @staticmethod
    def zeros(n: int, m: int) -> "Jet":
        return Jet(np.zeros(n), np.zeros((n, m)))

    def __add__(self, other: "Jet") -> "Jet":
        return Jet(self.scalar + other.scalar, self.vector + other.vector)

    def __sub__(self, other: "Jet") -> "Jet":
        return Jet(self.scalar - other.scalar, self.vector - other.vector)

    def __mul__(self, c: float) -> "Jet":
        return Jet(self.scalar * c, self.vector * c)

    __rmul__ = __mul__

    def __neg__(self) -> "Jet":
        return Jet(-self.scalar, -self.vector)

    def flat(self) -> np.ndarray:
        """Component-major vector: scalar block followed by one block per coordinate."""
        return np.concatenate([self.scalar, self.vector.T.ravel()])

    @staticmethod
    def from_flat(v: np.ndarray, m: int) -> "Jet":
        n = len(v) // (m + 1)
        return Jet(v[:n].copy(), v[n:].reshape(m, n).T.copy())

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.scalar ** 2) + np.sum(self.vector ** 2)))


@dataclass(frozen=True)
class MeasureDeformation:
    f: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        if np.any(self.f <= 0):
            raise ValueError("deformation weight f must be positive")

    @staticmethod
    def identity(rho: DiscreteMeasure) -> "MeasureDeformation":
        return MeasureDeformation(np.ones(rho.n), rho.points.copy())


def push_forward(rho: DiscreteMeasure, d: MeasureDeformation) -> DiscreteMeasure:
    if np.any(d.f <= 0):
        raise ValueError("deformation weight f must be positive")
    return DiscreteMeasure(rho.grid, np.asarray(d.F, dtype=float).copy(), rho.weights * d.f)


# ---------------------------------------------------------------------------
# action and EL function


def kernel_matrix(k: Kernel, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    return k.value(xa[:, None, :], xb[None, :, :])


def action(k: Kernel, rho: DiscreteMeasure) -> float:
    K = kernel_matrix(k, rho.points, rho.points)
    return float(rho.weights @ K @ rho.weights)


def ell(k: Kernel, rho: DiscreteMeasure, s: float, x) -> np.ndarray | float:
    """ell(x) = sum_j L(x, x_j) rho_j - s; accepts a point or an array of points."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    out = kernel_matrix(k, xs, rho.points) @ rho.weights - s
    return float(out[0]) if single else out


def ell_gradient(k: Kernel, rho: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
    """Coordinate gradient of ell at the points x, shape (n, m)."""
    n, m = x.shape
    d = k.derivatives(np.repeat(x, rho.n, axis=0), np.tile(rho.points, (n, 1)), second=False)
    return np.einsum("nyk,y->nk", d.d1.reshape(n, rho.n, m), rho.weights)


def weak_el_residual(k: Kernel, rho: DiscreteMeasure, s: float, u: Jet) -> np.ndarray:
    """a(x) ell(x) + u(x) . grad ell(x) on the support."""
    if u.vector.shape != rho.points.shape:
        raise ValueError("jet does not match the measure")
    l = ell(k, rho, s, rho.points)
    g = ell_gradient(k, rho, rho.points)
    return u.scalar * l + np.einsum("nk,nk->n", u.vector, g)


@dataclass
class MinimizeReport:
    converged: bool
    iterations: int
    s: float
    residual: float
    history: list = field(default_factory=list)
    actions: list = field(default_factory=list)


def _el_residual_max(k: Kernel, rho: DiscreteMeasure, s: float, move_points: bool) -> float:
    r = np.max(np.abs(ell(k, rho, s, rho.points)))
    if move_points:
        r = max(r, np.max(np.abs(ell_gradient(k, rho, rho.points))))
    return float(r)


def minimize_action(k: Kernel, init: DiscreteMeasure, tol: float = 1e-10, max_iter: int = 2000,
                    move_points: bool = True, step0: float = 1.0) -> tuple[DiscreteMeasure, MinimizeReport]:
    """Projected gradient descent at fixed total volume with Armijo backtracking.

    The multiplier s is the volume average of sum_j L(x_i, x_j) rho_j, so that
    the projected weight gradient is 2 rho (ell), zero at a critical point.
    """
    rho = init
    V = init.volume

    def s_of(mu):
        K = kernel_matrix(k, mu.points, mu.points)
        return float(mu.weights @ K @ mu.weights) / mu.volume

    s = s_of(rho)
    S = action(k, rho)
    res = _el_residual_max(k, rho, s, move_points)
    rep = MinimizeReport(res <= tol, 0, s, res, [res], [S])
    step = step0
    it = 0
    while not rep.converged and it < max_iter:
        it += 1
        K = kernel_matrix(k, rho.points, rho.points)
        gw = 2.0 * (K @ rho.weights - s)
        gx = 2.0 * rho.weights[:, None] * ell_gradient(k, rho, rho.points) if move_points else 0.0 * rho.points
        gnorm2 = float(gw @ gw + np.sum(gx * gx))
        accepted = False
        while step > 1e-16:
            w = np.maximum(rho.weights - step * gw, 1e-12 * V)
            w *= V / w.sum()
            cand = DiscreteMeasure(rho.grid, rho.points - step * gx, w)
            S_new = action(k, cand)
            if S_new <= S - 1e-4 * step * gnorm2 or S_new < S and gnorm2 < 1e-28:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rho, S = cand, S_new
        s = s_of(rho)
        res = _el_residual_max(k, rho, s, move_points)
        rep.history.append(res)
        rep.actions.append(S)
        rep.converged = res <= tol
        step = min(step * 2.0, step0)
    rep.iterations = it
    rep.s = s
    rep.residual = res
    return rho, rep
