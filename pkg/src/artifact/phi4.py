"""Classical phi^4 theory on a periodic 1+1 dimensional lattice.

Leapfrog (velocity Verlet) evolution of phi_tt = phi_xx - lam/6 phi^3, its
linearization, the conserved energy, one-form gamma_psi, symplectic form
sigma_psi and the energy inner product with its retarded correction.
Gradients are forward differences, i.e. centred on the links, so the
energy is the exact Hamiltonian of the spatially discrete equations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class FieldState:
    phi: np.ndarray
    pi: np.ndarray
    dx: float
    dt: float
    lam: float = 0.0

    def __post_init__(self):
        if np.shape(self.phi) != np.shape(self.pi):
            raise ValueError("phi and pi must have equal length")
        if self.lam < 0:
            raise ValueError("coupling must be non-negative")


@dataclass(frozen=True)
class Trajectory:
    phi: np.ndarray   # (steps + 1, X)
    pi: np.ndarray
    dx: float
    dt: float
    lam: float
    t0: float = 0.0

    @property
    def steps(self) -> int:
        return self.phi.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def state(self, n: int) -> FieldState:
        return FieldState(self.phi[n], self.pi[n], self.dx, self.dt, self.lam)


def laplacian(phi: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(phi, -1) - 2 * phi + np.roll(phi, 1)) / dx ** 2


def gradient(phi: np.ndarray, dx: float) -> np.ndarray:
    """Forward difference, located on the link between sites i and i+1."""
    return (np.roll(phi, -1) - phi) / dx


def _check_cfl(dt: float, dx: float) -> None:
    if not dt < dx:
        raise CFLError(f"CFL condition violated: dt = {dt} must be smaller than dx = {dx}")


def _verlet(x0: np.ndarray, p0: np.ndarray, accel: Callable[[int, np.ndarray], np.ndarray], steps: int,
            dt: float) -> tuple[np.ndarray, np.ndarray]:
    X = np.zeros((steps + 1, len(x0)))
    P = np.zeros_like(X)
    X[0], P[0] = x0, p0
    a = accel(0, X[0])
    for n in range(steps):
        half = P[n] + 0.5 * dt * a
        X[n + 1] = X[n] + dt * half
        a = accel(n + 1, X[n + 1])
        P[n + 1] = half + 0.5 * dt * a
    return X, P


def evolve(state: FieldState, steps: int, t0: float = 0.0) -> Trajectory:
    """Leapfrog trajectory of phi_tt = phi_xx - lam/6 phi^3."""
    _check_cfl(state.dt, state.dx)
    lam, dx = state.lam, state.dx
    X, P = _verlet(np.asarray(state.phi, float), np.asarray(state.pi, float),
                   lambda n, f: laplacian(f, dx) - lam / 6.0 * f ** 3, steps, state.dt)
    return Trajectory(X, P, dx, state.dt, lam, t0)


def energy(state: FieldState) -> float:
    """sum (pi^2/2 + |grad phi|^2/2 + lam/4! phi^4) dx."""
    g = gradient(state.phi, state.dx)
    return float(np.sum(0.5 * state.pi ** 2 + 0.5 * g ** 2 + state.lam / 24.0 * state.phi ** 4) * state.dx)


def gamma_psi(psi: FieldState, tilde: FieldState) -> float:
    """1/2 sum (psi_t tilde_t + grad psi . grad tilde + lam/3! psi^3 tilde) dx."""
    dx = psi.dx
    return float(0.5 * np.sum(psi.pi * tilde.pi + gradient(psi.phi, dx) * gradient(tilde.phi, dx)
                              + psi.lam / 6.0 * psi.phi ** 3 * tilde.phi) * dx)


def sigma_psi(u: FieldState, v: FieldState) -> float:
    """sum (u_t v - u v_t) dx."""
    return float(np.sum(u.pi * v.phi - u.phi * v.pi) * u.dx)


def linearized_evolve(background: Trajectory, phi0: np.ndarray, pi0: np.ndarray,
                      source: Optional[np.ndarray] = None) -> Trajectory:
    """Leapfrog for tilde_tt = tilde_xx - lam/2 psi^2 tilde + source along the background."""
    _check_cfl(background.dt, background.dx)
    psi2 = background.phi ** 2
    lam, dx = background.lam, background.dx

    def acc(n, f):
        a = laplacian(f, dx) - 0.5 * lam * psi2[n] * f
        return a if source is None else a + source[n]

    X, P = _verlet(np.asarray(phi0, float), np.asarray(pi0, float), acc, background.steps, background.dt)
    return Trajectory(X, P, dx, background.dt, lam, background.t0)


def retarded_green(background: Trajectory, rhs: np.ndarray) -> Trajectory:
    """D with (box + lam/2 psi^2) D = -rhs and vanishing data at the initial time."""
    zero = np.zeros(background.phi.shape[1])
    return linearized_evolve(background, zero, zero, source=-np.asarray(rhs, float))


@dataclass(frozen=True)
class EnergyInnerProduct:
    slice_term: float
    correction: float

    @property
    def total(self) -> float:
        return self.slice_term + self.correction


def energy_inner_product(background: Trajectory, u: Trajectory, v: Trajectory, n: int) -> EnergyInnerProduct:
    """Second variation d_r d_s E of the energy along the two-parameter family with tangents u, v.

    Slice term: sum (u_t v_t + grad u . grad v + lam/2 psi^2 u v) dx at step n.
    Correction: 2 gamma_psi(D) with D = lam S_ret(psi u v) the second variation of
    the flow, which vanishes at the initial time.
    """
    lam, dx = background.lam, background.dx
    slice_term = float(np.sum(u.pi[n] * v.pi[n] + gradient(u.phi[n], dx) * gradient(v.phi[n], dx)
                              + 0.5 * lam * background.phi[n] ** 2 * u.phi[n] * v.phi[n]) * dx)
    if lam == 0:
        return EnergyInnerProduct(slice_term, 0.0)
    D = retarded_green(background, lam * background.phi * u.phi * v.phi)
    corr = 2.0 * gamma_psi(background.state(n), D.state(n))
    return EnergyInnerProduct(slice_term, corr)


def energy_inner_product_series(background: Trajectory, u: Trajectory, v: Trajectory) -> np.ndarray:
    """(slice term, correction) for every step, sharing one Green solve."""
    lam, dx = background.lam, background.dx
    D = retarded_green(background, lam * background.phi * u.phi * v.phi) if lam else None
    out = np.zeros((background.steps + 1, 2))
    for n in range(background.steps + 1):
        out[n, 0] = np.sum(u.pi[n] * v.pi[n] + gradient(u.phi[n], dx) * gradient(v.phi[n], dx)
                           + 0.5 * lam * background.phi[n] ** 2 * u.phi[n] * v.phi[n]) * dx
        if D is not None:
            out[n, 1] = 2.0 * gamma_psi(background.state(n), D.state(n))
    return out


def lattice_frequency(k: float, dx: float, dt: float) -> float:
    """Frequency of the free leapfrog mode with wave number k: sin(w dt/2) = (dt/dx) sin(k dx/2)."""
    return 2.0 / dt * np.arcsin(dt / dx * np.sin(0.5 * k * dx))


# ---------------------------------------------------------------------------
# reports


@dataclass
class Phi4Series:
    times: np.ndarray
    energy: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    inner: np.ndarray
    correction: np.ndarray

    def defects(self) -> dict:
        def d(x):
            return float(np.max(np.abs(x - x[0])))
        return {"energy": d(self.energy), "gamma": d(self.gamma), "sigma": d(self.sigma),
                "inner": d(self.inner),
                "correction_initial": float(abs(self.correction[0]))}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "E", "gamma_psi", "sigma_psi", "inner_psi", "correction"])
            for row in zip(self.times, self.energy, self.gamma, self.sigma, self.inner, self.correction):
                w.writerow([f"{x:.17g}" for x in row])


def smooth_bump(X: int, dx: float, center: float, width: float, amp: float) -> np.ndarray:
    x = dx * np.arange(X)
    L = X * dx
    r = (x - center + 0.5 * L) % L - 0.5 * L
    return amp * np.exp(-(r / width) ** 2)


def phi4_run(X: int = 64, L: float = 16.0, t_end: float = 4.0, dt: float = 0.05, lam: float = 1.0,
             amp: float = 1.0) -> Phi4Series:
    """Background bump, two linearized perturbations; all conserved quantities per step."""
    dx = L / X
    steps = int(round(t_end / dt))
    psi0 = smooth_bump(X, dx, 0.5 * L, 1.5, amp)
    bg = evolve(FieldState(psi0, np.zeros(X), dx, dt, lam), steps)
    u = linearized_evolve(bg, smooth_bump(X, dx, 0.4 * L, 1.0, 1.0), np.zeros(X))
    v = linearized_evolve(bg, np.zeros(X), smooth_bump(X, dx, 0.6 * L, 1.2, 1.0))
    E = np.array([energy(bg.state(n)) for n in range(steps + 1)])
    g = np.array([gamma_psi(bg.state(n), u.state(n)) for n in range(steps + 1)])
    s = np.array([sigma_psi(u.state(n), v.state(n)) for n in range(steps + 1)])
    ip = energy_inner_product_series(bg, u, v)
    return Phi4Series(bg.times, E, g, s, ip.sum(axis=1), ip[:, 1])
