"""Command line runner: each subcommand writes a JSON summary plus CSV series.

Exit codes: 0 when every declared tolerance is met, 1 on a tolerance
failure, 2 on a config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dynamics as dyn
from . import fock, phi4
from .complex_structure import KreinEvolution, SolutionBasis, canonical_J, grams, hol_inner, \
    integrability_check, structure_pack
from .cvp_core import Jet, kernel_from_dict, klein_gordon_kernel, lattice_vacuum
from .linfield import assemble_delta, divergence, flux, fundamental_solution, inner_from_scalar, restrict
from .polymaps import CPoly, monomial_keys
from .serialize import ConfigError, complex_pairs, load_config, parse_complex_vector, write_csv, write_json
from .surface_layers import gamma_report, gamma_t, inner_product_report, sigma_report, sigma_t


@dataclass
class Outcome:
    summary: dict
    tables: dict = field(default_factory=dict)   # name -> (header, rows)
    ok: bool = True


@dataclass
class RunContext:
    cfg: dict
    seed: int
    tol: Optional[float]
    order: Optional[int]

    def option(self, key, default):
        return self.cfg["options"].get(key, default)

    def tolerance(self, default: float) -> float:
        return default if self.tol is None else self.tol


def _kernel(cfg: dict, lam: Optional[float] = None):
    d = dict(cfg["kernel"])
    d["lam"] = cfg["lambda"] if lam is None else lam
    if d.get("family") == "klein_gordon" and "window" not in d:
        d["window"] = [4.0, 9.0]
    return kernel_from_dict(d)


def _report_rows(rep) -> list:
    return [[r["t"], r["value"], r["difference"], r["predicted_difference"], r["residual"]] for r in rep.rows()]


SLICE_HEADER = ["t", "value", "difference", "predicted_difference", "residual"]


# ---------------------------------------------------------------------------
# conserve


def run_conserve(ctx: RunContext) -> Outcome:
    """Slice reports of gamma, sigma and the inner product on an exact lattice vacuum."""
    tol = ctx.tolerance(1e-10)
    T = int(ctx.option("T", 16))
    X = int(ctx.option("X", 16))
    k, mu, s = lattice_vacuum(_kernel(ctx.cfg, lam=ctx.option("lambda", 0.0)), T, X)
    op = assemble_delta(k, mu, s)
    rng = np.random.default_rng(ctx.seed)
    N = mu.n
    zc = op.transverse_components[0]
    mid = np.flatnonzero((mu.grid.slice_of >= T // 2 - 2) & (mu.grid.slice_of <= T // 2 + 1))

    def solution():
        f = np.zeros((mu.dim + 1) * N)
        f[zc * N + mid] = rng.normal(size=len(mid))
        return fundamental_solution(op, f).jet

    u, v = solution(), solution()
    reps = [gamma_report(op, u), sigma_report(op, u, v), inner_product_report(op, u, v)]
    # inner solutions
    a = np.zeros(N)
    a[mu.grid.sites_in(T // 2)] = rng.normal(size=X)
    inner = inner_from_scalar(mu.grid, mu.weights, a, mu.dim)
    eta = rng.normal(size=N)
    Dt, Dx = op.calc.D
    vec = inner.vector
    adj = abs(float(np.sum(mu.weights * divergence(mu.grid, mu.weights, vec) * eta)
                    + np.sum(mu.weights * (vec[:, 0] * (Dt @ eta) + vec[:, 1] * (Dx @ eta)))))
    ts = range(1, T - 1)
    gflux = max(abs(gamma_t(op.calc, inner.jet, t) - s * flux(mu.grid, mu.weights, inner.jet, t)) for t in ts)
    sig = max(abs(sigma_t(op.calc, u, inner.jet, t)) for t in ts)
    res = {r.name: r.max_residual() for r in reps}
    summary = {"lattice": [T, X], "s": s, "tolerance": tol, "max_residual": res,
               "inner_solution": {"divergence_adjoint": adj, "gamma_minus_s_flux": gflux,
                                  "sigma_linear_inner": sig}}
    ok = all(v <= tol for v in res.values()) and adj <= 1e-12 and gflux <= 1e-12 and sig <= 1e-11
    tables = {r.name: (SLICE_HEADER, _report_rows(r)) for r in reps}
    return Outcome(summary, tables, ok)


# ---------------------------------------------------------------------------
# complex


def free_flow_matrix(setup: dyn.ScatteringSetup) -> np.ndarray:
    """Real band coordinates at t_in -> band at t_out under the linear evolution."""
    cols = []
    for e in np.eye(2 * setup.X):
        jet = restrict(setup.op, setup.band_jet(e, setup.t_in), setup.t_in)
        cols.append(setup.band(jet, setup.t_out))
    return np.array(cols).T


def second_derivative(setup: dyn.ScatteringSetup) -> np.ndarray:
    """D2P[:, i, j] of the quadratic part of the band map t_in -> t_out."""
    d = 2 * setup.X
    E = np.eye(d)

    def quad(x):
        jet = restrict(setup.op, setup.band_jet(x, setup.t_in), setup.t_in)
        ser = dyn.perturb(setup, jet, order=2)
        return setup.band(ser.orders[1], setup.t_out) if ser.order > 1 else np.zeros(d)

    Q = [quad(E[i]) for i in range(d)]
    out = np.zeros((d, d, d))
    for i in range(d):
        out[:, i, i] = 2 * Q[i]
        for j in range(i + 1, d):
            out[:, i, j] = out[:, j, i] = quad(E[i] + E[j]) - Q[i] - Q[j]
    return out


def _setup(ctx: RunContext, order: Optional[int] = None, compensate: bool = True) -> dyn.ScatteringSetup:
    cfg = ctx.cfg
    o = order or ctx.order or cfg["order"]
    return dyn.scattering_setup(_kernel(cfg), cfg["grid"]["T"], cfg["grid"]["X"], cfg["t_in"], cfg["t_out"],
                                order=o, compensate=compensate, small_inner=cfg["small_inner"])


def run_complex(ctx: RunContext) -> Outcome:
    tol = ctx.tolerance(1e-10)
    st = _setup(ctx)
    jets = tuple(restrict(st.op, st.band_jet(e, st.t_in), st.t_in) for e in np.eye(2 * st.X))
    G, Sg = grams(st.op.calc, SolutionBasis(jets), st.t_in)
    pack = structure_pack(G, Sg)
    rng = np.random.default_rng(ctx.seed)
    im_sigma = 0.0
    for _ in range(10):
        u, v = rng.normal(size=(2, 2 * st.X))
        im_sigma = max(im_sigma, abs(hol_inner(pack.H1, pack.P_hol, u, v).imag - u @ Sg @ v))
    U = free_flow_matrix(st)
    ev = KreinEvolution(U, Sg)
    cj = canonical_J(ev)
    commute = float(np.max(np.abs(cj.J @ U - U @ cj.J))) if cj.ok else float("inf")
    table = integrability_check(ev, second_derivative(st), tol=tol) if cj.ok else []
    res = pack.residuals()
    summary = {"structure_pack": pack.to_dict(), "residuals": res, "im_inner_minus_sigma": im_sigma,
               "symplectic_defect": ev.unitarity_defect(), "canonical_J": {"ok": cj.ok,
               "diagnostic": cj.diagnostic, "commutator": commute}, "integrability_violations": len(table),
               "tolerance": tol}
    rows = [[r["l"], r["l2"], r["lambda_l"].real, r["lambda_l"].imag, r["lambda_l2"].real, r["lambda_l2"].imag,
             r["violation"]] for r in table]
    tables = {"integrability": (["l", "l2", "re_lambda_l", "im_lambda_l", "re_lambda_l2", "im_lambda_l2",
                                 "violation"], rows)}
    ok = res["J2"] <= tol and res["JtG"] <= tol and im_sigma <= tol and commute <= tol
    return Outcome(summary, tables, ok)


# ---------------------------------------------------------------------------
# fock-check


def _rand_c(rng, d):
    return rng.normal(size=d) + 1j * rng.normal(size=d)


def run_fock_check(ctx: RunContext) -> Outcome:
    tol = ctx.tolerance(1e-12)
    rng = np.random.default_rng(ctx.seed)
    d, N = int(ctx.option("d", 4)), int(ctx.option("n_max", 8))
    b = fock.FockBasis(d, N)
    ccr = []
    for i in range(int(ctx.option("pairs", 50))):
        ccr.append([i, fock.ccr_residual(b, _rand_c(rng, d), _rand_c(rng, d))])
    bc = fock.FockBasis(min(d, 3), 10)
    coh = []
    for i in range(20):
        z, f = _rand_c(rng, bc.d), _rand_c(rng, bc.d)
        z *= rng.uniform(0.1, 1.0) / np.linalg.norm(z)
        f *= rng.uniform(0.1, 1.0) / np.linalg.norm(f)
        diff = abs(fock.overlap(fock.coherent(bc, f), fock.coherent(bc, z)) - np.exp(np.vdot(f, z)))
        coh.append([i, diff, fock.coherent_overlap_tail(f, z, bc.n_max)])
    bp = fock.FockBasis(2, 6)
    O = rng.normal(size=(bp.dim, bp.dim)) + 1j * rng.normal(size=(bp.dim, bp.dim))
    pol = fock.polarization_reconstruct(bp, fock.coherent_expectation_fn(bp, O))
    pol_err = float(np.max(np.abs(pol.matrix - O)))
    ccr_max = max(r[1] for r in ccr)
    coh_ok = all(r[1] <= r[2] + 1e-12 for r in coh)
    summary = {"ccr": {"d": d, "n_max": N, "max_residual": ccr_max, "tolerance": tol},
               "coherent": {"n_max": bc.n_max, "max_difference": max(r[1] for r in coh), "within_tail": coh_ok},
               "polarization": {"d": 2, "n_max": 6, "max_error": pol_err, "condition": pol.condition,
                                "tolerance": 1e-8}}
    tables = {"ccr": (["pair", "residual"], ccr), "coherent": (["pair", "difference", "tail_bound"], coh)}
    return Outcome(summary, tables, ccr_max <= tol and coh_ok and pol_err <= 1e-8)


# ---------------------------------------------------------------------------
# scatter


def run_scatter(ctx: RunContext) -> Outcome:
    tol = ctx.tolerance(1e-8)
    st = _setup(ctx)
    z = parse_complex_vector(ctx.cfg["w_in"])
    if len(z) != st.n:
        raise ConfigError(f"w_in needs {st.n} entries for X = {st.X}")
    nb = dyn.norm_balance(st, z)
    ser = dyn.perturb(st, st.incoming(z))
    rec = dyn.flow_record(st, ser)
    scaling = dyn.el_residual_scaling(st, st.incoming(z), [0.08, 0.04, 0.02, 0.01])
    fit = dyn.fit_flow(st, seed=ctx.seed)
    basis = fock.FockBasis(st.n, ctx.cfg["n_max"])
    probe = z * float(ctx.option("probe_scale", 0.15))
    lift = dyn.lift_norm_check(fit.P[st.t_out], fit.mu[st.t_out], st.kappa, basis, probe)
    D = rec.half_sq.shape[0] - 1
    flow_rows = []
    for i, t in enumerate(rec.slices):
        flow_rows.append([int(t), float(np.sum(np.abs(sum(rec.z[:, i])) ** 2))]
                         + [float(rec.s_mu[k, i]) for k in range(2, D + 1)])
    summary = {"z_in": complex_pairs(z), "order": st.order, "s": st.s, "kappa": st.kappa,
               "norm_balance": {"max_defect": nb.max_defect, "route_difference": nb.route_difference,
                                "rows": nb.rows(), "tolerance": tol},
               "el_residual_scaling": scaling, "fit_residual": fit.fit_residual,
               "lift_norm_check": lift.to_dict(), "lift_ok": lift.ok, "n_max": basis.n_max}
    tables = {"norm_balance": (["degree", "incoming", "outgoing", "s_mu", "defect", "correction_out"],
                               [list(r.values()) for r in nb.rows()]),
              "flow": (["t", "abs_z_sq"] + [f"s_mu_deg{k}" for k in range(2, D + 1)], flow_rows)}
    ok = nb.max_defect <= tol and nb.route_difference <= tol and lift.ok and lift.exponent_defect <= tol
    return Outcome(summary, tables, ok)


# ---------------------------------------------------------------------------
# holo


def synthetic_mixing(d: int, rng: np.random.Generator) -> tuple[np.ndarray, CPoly]:
    """Anti-Hermitian linear part and a random mixing map with conj z in every term."""
    M = _rand_c(rng, d * d).reshape(d, d)
    A = 0.5 * (M - M.conj().T)
    mix = CPoly(d, d, {})
    for k in (1, 2):
        for key in monomial_keys(d, k):
            if sum(key[0]) >= 1:
                mix._add_term(key, _rand_c(rng, d))
    return A, mix


def dyson_study(etas, K_max: int = 2, d: int = 2, n_max: int = 6, t: float = 1.0, n_steps: int = 32,
                seed: int = 3, kappa: float = 2.0, observable: bool = True) -> dict:
    """Truncation errors of the Dyson series versus mixing strength and their log-log slopes."""
    rng = np.random.default_rng(seed)
    A, mix = synthetic_mixing(d, rng)
    b = fock.FockBasis(d, n_max)
    z = np.array([0.3 + 0.1j, -0.2j, 0.1, 0.05j][:d])
    W = fock.BraKetState.from_pair(fock.coherent(b, z), fock.coherent(b, z)).W
    Nop = np.diag(b.number.astype(complex))
    errs = {K: [] for K in range(K_max + 1)}
    obs = {K: [] for K in range(1, K_max + 1)}
    quad = []
    for eta in etas:
        p = dyn.conserving_pack(A, mix, eta, kappa)
        r = dyn.dyson(p, b, W, t, K_max, n_steps=n_steps)
        quad.append(r.quad_error)
        for K in errs:
            errs[K].append(r.truncation_error(K))
        if observable:
            S = dyn.holo_evolve(p, b, t)
            VW = S.conj() @ W @ S.T
            exact = np.sum(r.exact * Nop)
            for K in obs:
                Op, _ = dyn.observable_transform(p, b, Nop, t, K, n_steps=n_steps)
                obs[K].append(float(abs(exact - np.sum(VW * Op))))
    le = np.log(np.asarray(etas, dtype=float))
    slopes = {K: float(np.polyfit(le, np.log(errs[K]), 1)[0]) for K in errs}
    oslopes = {K: float(np.polyfit(le, np.log(obs[K]), 1)[0]) for K in obs} if observable else {}
    return {"etas": list(map(float, etas)), "errors": errs, "slopes": slopes, "observable_errors": obs,
            "observable_slopes": oslopes, "quad_error": quad}


def run_holo(ctx: RunContext) -> Outcome:
    tol = ctx.tolerance(1e-8)
    st = _setup(ctx)
    fit = dyn.fit_flow(st, seed=ctx.seed)
    basis = fock.FockBasis(st.n, min(ctx.cfg["n_max"], 5))
    on = dyn.hermiticity_scan(dyn.extract_generators(st, fit), basis)
    off = dyn.hermiticity_scan(dyn.extract_generators(st, fit, compensate=False), basis)
    herm_rows = [[a["t"], a["defect"], b["defect"], a["mixing"]] for a, b in zip(on, off)]
    etas = ctx.option("etas", [0.01, 0.02, 0.04, 0.08])
    study = dyson_study(etas, n_steps=int(ctx.option("n_steps", 32)), seed=ctx.seed + 3)
    dy_rows = [[eta, K, study["errors"][K][i]] for i, eta in enumerate(study["etas"]) for K in study["errors"]]
    max_on = max(r[1] for r in herm_rows)
    min_off = min(r[2] for r in herm_rows)
    slope_ok = all(abs(study["slopes"][K] - (K + 1)) <= 0.15 for K in study["slopes"])
    summary = {"hermiticity": {"max_compensated": max_on, "min_uncompensated": min_off, "tolerance": tol},
               "dyson": study, "dyson_slopes_ok": slope_ok}
    tables = {"hermiticity": (["t", "defect", "defect_uncompensated", "mixing"], herm_rows),
              "dyson": (["eta", "K", "truncation_error"], dy_rows)}
    return Outcome(summary, tables, max_on <= tol and min_off > 0 and slope_ok)


# ---------------------------------------------------------------------------
# phi4


def phi4_refinement(dt: float = 0.05, levels: int = 3, **kw) -> dict:
    """Conservation defects at dt, dt/2, ... and their successive ratios."""
    runs = [phi4.phi4_run(dt=dt / 2 ** i, **kw) for i in range(levels)]
    defects = [r.defects() for r in runs]
    keys = ["energy", "gamma", "sigma", "inner"]
    ratios = {k: [defects[i][k] / defects[i + 1][k] if defects[i + 1][k] > 0 else float("inf")
                  for i in range(levels - 1)] for k in keys}
    return {"dt": [dt / 2 ** i for i in range(levels)], "defects": defects, "ratios": ratios, "runs": runs}


def refinement_ok(defects: list, ratios: list, exact_tol: float = 1e-12, lo: float = 3.2,
                  hi: float = 4.8) -> bool:
    """Second order: every ratio in [lo, hi]; an exactly conserved quantity passes at round-off."""
    if all(d <= exact_tol for d in defects):
        return True
    return all(lo <= r <= hi for r in ratios)


def run_phi4(ctx: RunContext) -> Outcome:
    kw = {k: ctx.option(k, v) for k, v in (("X", 64), ("L", 16.0), ("t_end", 4.0), ("lam", 1.0), ("amp", 1.0))}
    ref = phi4_refinement(dt=float(ctx.option("dt", 0.05)), **kw)
    scale = max(1.0, max(abs(ref["runs"][0].sigma)))
    checks = {k: refinement_ok([d[k] for d in ref["defects"]], ref["ratios"][k],
                               exact_tol=1e-12 * scale) for k in ("energy", "gamma", "sigma", "inner")}
    corr0 = max(d["correction_initial"] for d in ref["defects"])
    run = ref["runs"][0]
    rows = [[t, e, g, s, i, c] for t, e, g, s, i, c in zip(run.times, run.energy, run.gamma, run.sigma,
                                                            run.inner, run.correction)]
    summary = {"parameters": kw, "dt": ref["dt"], "defects": ref["defects"], "ratios": ref["ratios"],
               "checks": checks, "correction_at_t_in": corr0}
    tables = {"series": (["t", "E", "gamma_psi", "sigma_psi", "inner_psi", "correction"], rows)}
    return Outcome(summary, tables, all(checks.values()) and corr0 <= 1e-12)


# ---------------------------------------------------------------------------

COMMANDS: dict[str, Callable[[RunContext], Outcome]] = {
    "conserve": run_conserve, "complex": run_complex, "fock-check": run_fock_check,
    "scatter": run_scatter, "holo": run_holo, "phi4": run_phi4,
}


def run(subcommand: str, config: Optional[str], out: str | Path, seed: int = 0, tol: Optional[float] = None,
        order: Optional[int] = None) -> int:
    try:
        cfg = load_config(config)
        if order is not None and order < 1:
            raise ConfigError("order must be at least 1")
        ctx = RunContext(cfg, seed, tol, order)
        res = COMMANDS[subcommand](ctx)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {"subcommand": subcommand, "seed": seed, "ok": res.ok, **res.summary}
    write_json(outdir / f"{subcommand}.json", summary)
    for name, (header, rows) in res.tables.items():
        write_csv(outdir / f"{subcommand}_{name}.csv", header, rows)
    print(f"{subcommand}: {'ok' if res.ok else 'tolerance failure'} -> {outdir}")
    return 0 if res.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artifact", description="Run a scenario and write JSON/CSV reports.")
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--config", help="scenario JSON file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None, help="override the main tolerance")
    p.add_argument("--order", type=int, default=None, help="perturbation order")
    return p


def main(argv: Optional[list] = None) -> int:
    a = build_parser().parse_args(argv)
    if a.seed < 0:
        print("config error: seed must be non-negative", file=sys.stderr)
        return 2
    return run(a.subcommand, a.config, a.out, a.seed, a.tol, a.order)


if __name__ == "__main__":
    sys.exit(main())
