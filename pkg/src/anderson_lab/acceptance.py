"""The acceptance suite: one function per criterion, shared by `verify` and the tests.

Each criterion returns a Criterion with a verdict and a JSON-ready detail
dict.  Details hold only computed numbers (no timings) so that reruns emit
byte-identical artifacts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import constants
from .control import (ControlProblem, _piece_response, cylinder_extension, hum_control, hum_minimality_excess,
                      lebeau_rousseau_drive, observation_gram, omega_mask, project, spectral_inequality_probe, synthesize)
from .field import GridField, Mollifier, TorusGrid, enhance, zero_noise
from .nodal import (DELTA_SWEEP, aronszajn_verify, annular_bump, caccioppoli_verify, courant_check,
                    doubling_index, grid_minimum)
from .quasiconformal import (DiscPatch, affine_fit_error, quotient, radial_stretch, run_pipeline,
                             solve_beltrami, three_circles_check)
from .spectrum import (AndersonOperator, conjugation_residual, dense_eigenvalues, eigensolve, ground_gauge,
                       resolvent_probe)

LOG2_OVER_2PI = np.log(2.0) / (2.0 * np.pi)


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    details: dict
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}"


@dataclass
class Context:
    """Eigensystem cache shared by the criteria of one run."""

    cache: dict = field(default_factory=dict)

    def system(self, d: int, N: int, seed: int, m: int, eps: float | None = None):
        eps = constants.DEFAULT_MOLLIFIER_CELLS / N if eps is None else eps
        key = (d, N, seed, eps)
        hit = self.cache.get(key)
        if hit is not None and hit[0].m >= m:
            es = hit[0]
            return es, hit[1]
        grid = TorusGrid(d, N)
        op = AndersonOperator(enhance(grid, seed, Mollifier(eps)))
        es = eigensolve(op, m)
        gauge = ground_gauge(es)
        self.cache[key] = (es, gauge)
        return es, gauge


def _exact_laplacian(d: int, N: int, m: int) -> np.ndarray:
    g = TorusGrid(d, N)
    return np.sort(4 * np.pi**2 * g.k2.ravel())[:m]


def laplacian_baseline(ctx: Context) -> Criterion:
    out, ok = {}, True
    for d, N in ((1, 64), (2, 32)):
        es = eigensolve(AndersonOperator(zero_noise(TorusGrid(d, N))), 10)
        exact = _exact_laplacian(d, N, 10)
        err = np.abs(es.eigenvalues - exact) / np.maximum(1.0, np.abs(exact))
        ok &= bool(err.max() <= 1e-8)
        out[f"d{d}"] = {"N": N, "eigenvalues": es.eigenvalues, "exact": exact, "max_rel_error": err.max()}
    return Criterion(1, "Laplacian baseline", ok, out)


def dense_oracle(ctx: Context) -> Criterion:
    grid = TorusGrid(2, 16)
    op = AndersonOperator(enhance(grid, 1, Mollifier(4 / 16)))
    es = eigensolve(op, 10)
    dense = dense_eigenvalues(op, 10)
    err = np.abs(es.eigenvalues - dense) / np.maximum(1.0, np.abs(dense))
    return Criterion(2, "Dense oracle", bool(err.max() <= 1e-8),
                     {"iterative": es.eigenvalues, "dense": dense, "max_rel_error": err.max()})


def renormalization_necessity(ctx: Context) -> Criterion:
    grid = TorusGrid(2, 256)
    eps = [2.0**-j for j in range(2, 7)]
    seed = constants.RENORM_SEED
    ren = resolvent_probe(grid, seed, eps, 1)
    raw = resolvent_probe(grid, seed, eps, 1, renormalize=False)
    dr = np.abs(ren.differences[:, 0])
    du = np.abs(raw.differences[:, 0])
    monotone = bool(np.all(np.diff(dr) < 0))
    rel = abs(du[-1] - LOG2_OVER_2PI) / LOG2_OVER_2PI
    ok = monotone and rel <= 0.2
    return Criterion(3, "Renormalization necessity", ok, {
        "seed": seed, "eps": eps, "lambda0_renormalized": ren.eigenvalues[:, 0], "lambda0_bare": raw.eigenvalues[:, 0],
        "drift_renormalized": dr, "drift_bare": du, "target": LOG2_OVER_2PI, "last_step_rel_error": rel,
        "monotone": monotone})


SEEDS_20 = tuple(range(1, 21))


def ground_state_positivity(ctx: Context) -> Criterion:
    mins = []
    for s in SEEDS_20:
        es, gauge = ctx.system(2, 128, s, 10)
        mins.append(float(es.eigenfunctions[0].min()))
    return Criterion(4, "Ground-state positivity", bool(min(mins) > 0), {"seeds": SEEDS_20, "min_u0": mins})


def conjugation_identity(ctx: Context) -> Criterion:
    es1, g1 = ctx.system(1, 256, 1, 10)
    es2, g2 = ctx.system(2, 128, 1, 10)
    r1 = [conjugation_residual(g1, es1, k) for k in range(10)]
    r2 = [conjugation_residual(g2, es2, k) for k in range(10)]
    ok = max(r1) <= 1e-5 and max(r2) <= 1e-4
    return Criterion(5, "Conjugation identity", bool(ok), {"d1_N256": r1, "d2_N128": r2})


def courant_bound(ctx: Context) -> Criterion:
    rows, violations, flips = [], 0, 0
    for s in SEEDS_20:
        es, _ = ctx.system(2, 128, s, 10)
        base = courant_check(es, 1e-3)
        violations += sum(not e.passed for e in base)
        for dl in DELTA_SWEEP:
            other = courant_check(es, dl)
            flips += sum(a.passed != b.passed for a, b in zip(base, other))
        rows.append({"seed": s, "counts": [e.domain_count for e in base], "ranks": [e.rank for e in base]})
    return Criterion(6, "Courant bound", violations == 0 and flips == 0,
                     {"runs": rows, "violations": violations, "sweep_verdict_changes": flips, "deltas": DELTA_SWEEP})


DOUBLING_RADII = (1 / 64, 1 / 32, 1 / 16, 1 / 8)


def _isolated(es, k, rel=1e-3):
    lam = es.eigenvalues
    scale = max(1.0, abs(lam[k]))
    lo = k == 0 or lam[k] - lam[k - 1] > rel * scale
    hi = k == es.m - 1 or lam[k + 1] - lam[k] > rel * scale
    return lo and hi


def strong_ucp(ctx: Context) -> Criterion:
    eps = 1 / 32
    coarse, _ = ctx.system(2, 128, 1, 10, eps)
    fine, _ = ctx.system(2, 256, 1, 10, eps)
    picks = [k for k in range(1, 9) if _isolated(coarse, k) and _isolated(fine, k)][:4]
    rows, ok = [], bool(picks)
    for k in picks:
        uc = coarse.function(k)
        x0 = grid_minimum(uc)
        bc = doubling_index(uc, x0, DOUBLING_RADII)
        bf = doubling_index(fine.function(k), x0, DOUBLING_RADII)
        finite = bool(np.all(np.isfinite(bc.beta)) and np.all(np.isfinite(bf.beta)))
        change = np.abs(bf.beta - bc.beta) / np.abs(bc.beta)
        ok &= finite and bool(change.max() <= 0.2)
        rows.append({"k": k, "x0": x0, "beta_128": bc.beta, "beta_256": bf.beta, "rel_change": change})
    return Criterion(7, "Strong-UCP diagnostic", ok, {"radii": DOUBLING_RADII, "eigenfunctions": rows})


def beltrami_oracle(ctx: Context) -> Criterion:
    patch = DiscPatch((0.5, 0.5), 1 / 16, 256)
    bf, exact = radial_stretch(patch, 1.5, patch.R / 2)
    sol = solve_beltrami(bf)
    err = affine_fit_error(sol.chi, exact)
    ok = err <= 1e-3 and sol.contraction <= bf.k_sup + 0.02
    return Criterion(8, "Beltrami solver oracle", bool(ok), {
        "K": 1.5, "M": 256, "sup_error": err, "contraction": sol.contraction, "k_sup": bf.k_sup,
        "iterations": sol.iterations})


PIPELINE_SEEDS = (1, 2, 3, 4, 5)


def _pipelines(ctx: Context):
    key = "pipelines"
    if key not in ctx.cache:
        ctx.cache[key] = [run_pipeline(*ctx.system(2, 128, s, 10), 1) for s in PIPELINE_SEEDS]
    return ctx.cache[key]


def factorization_quality(ctx: Context) -> Criterion:
    rows, ok = [], True
    for s, p in zip(PIPELINE_SEEDS, _pipelines(ctx)):
        f = p.factorization
        good = (f.residual_beltrami <= 1e-6 and f.jacobian_min > 0 and f.residual_cr <= 1e-2
                and f.harmonicity <= 1e-2 and p.correspondence.agreement >= 0.99)
        ok &= bool(good)
        rows.append({"seed": s, "x0": p.patch.x0, "R": p.patch.R, "kappa": p.kappa, "k_sup": p.mu.k_sup,
                     "residual_beltrami": f.residual_beltrami, "jacobian_min": f.jacobian_min,
                     "residual_cr": f.residual_cr, "harmonicity": f.harmonicity,
                     "roundtrip": f.roundtrip_error, "stream_residual": p.stream_residual,
                     "w_beltrami_residual": p.w_beltrami_residual,
                     "agreement": p.correspondence.agreement, "compared": p.correspondence.compared})
    return Criterion(9, "Factorization quality", ok, {"runs": rows})


def mori_consistency(ctx: Context) -> Criterion:
    rows, ok = [], True
    for s, p in zip(PIPELINE_SEEDS, _pipelines(ctx)):
        a, b = p.mori_chi, p.mori_inverse
        good = 0 < a.alpha <= 1 and 0 < b.alpha <= 1 and a.violations == 0 and b.violations == 0
        good &= a.n_pairs >= 9_000 and b.n_pairs >= 9_000
        ok &= bool(good)
        rows.append({"seed": s, "alpha_chi": a.alpha, "C_chi": a.C, "alpha_inverse": b.alpha, "C_inverse": b.C,
                     "violations": a.violations + b.violations, "pairs": [a.n_pairs, b.n_pairs]})
    return Criterion(10, "Mori consistency", ok, {"runs": rows})


CACCIOPPOLI_RADII = (1 / 32, 1 / 16, 1 / 8)
CACCIOPPOLI_SEEDS = tuple(range(1, 11))
ARONSZAJN_CASES = ((1, 1024), (2, 256))
ARONSZAJN_RADII = (1 / 8, 1 / 5, 1 / 4)
BETAS = tuple(range(11))


def caccioppoli_corpus(ctx: Context) -> np.ndarray:
    ratios = []
    for s in CACCIOPPOLI_SEEDS:
        es, gauge = ctx.system(2, 128, s, 10)
        for k in range(1, 6):
            w = quotient(es, gauge, k)
            rows = caccioppoli_verify(gauge, w, grid_minimum(w), CACCIOPPOLI_RADII)
            ratios.append([r.ratio for r in rows])
    return np.array(ratios)


def aronszajn_corpus() -> tuple[np.ndarray, list[float]]:
    """Ratios (case, radius, beta) and the least-squares slope in beta per bump."""
    table, slopes = [], []
    for d, N in ARONSZAJN_CASES:
        g = TorusGrid(d, N)
        for r in ARONSZAJN_RADII:
            w = annular_bump(g, r)
            vals = [aronszajn_verify(w, r, b) for b in BETAS]
            table.append(vals)
            slopes.append(float(np.polyfit(BETAS, vals, 1)[0]))
    return np.array(table), slopes


def three_circles_corpus(ctx: Context) -> list[float]:
    out = []
    for p in _pipelines(ctx):
        rho = 0.5 * float(np.min(np.abs(p.solution.chi[np.abs(p.patch.z()) >= 0.55 * p.patch.R])))
        out.append(three_circles_check(p.v, 0.0, 0.1 * rho, rho, 0.5, chi=p.solution.chi))
    return out


def inequality_verifiers(ctx: Context) -> Criterion:
    cac = caccioppoli_corpus(ctx)
    aro, slopes = aronszajn_corpus()
    tc = three_circles_corpus(ctx)
    ok = (cac.max() <= constants.CACCIOPPOLI_C and aro.max() <= constants.ARONSZAJN_C
          and max(abs(s) for s in slopes) <= 0.01 and max(tc) <= constants.THREE_CIRCLES_C)
    return Criterion(11, "Inequality verifiers", bool(ok), {
        "caccioppoli_max": cac.max(), "caccioppoli_C": constants.CACCIOPPOLI_C, "caccioppoli_ratios": cac,
        "aronszajn_max": aro.max(), "aronszajn_C": constants.ARONSZAJN_C, "aronszajn_ratios": aro,
        "aronszajn_beta_slopes": slopes, "three_circles": tc, "three_circles_C": constants.THREE_CIRCLES_C})


def cylinder_criterion(ctx: Context) -> Criterion:
    es, gauge = ctx.system(1, 256, 1, 24)
    rng = np.random.default_rng(0)
    u = project(es, es.eigenvalues[9], GridField(es.grid, rng.standard_normal(256)))
    ext = cylinder_extension(es, gauge, u, es.eigenvalues[9], 2.0)
    ok = ext.residual <= 1e-4 and ext.indices.size == 10
    return Criterion(12, "Cylinder extension", bool(ok), {"residual": ext.residual, "modes": ext.indices.size, "Y": 2.0})


def spectral_inequality(ctx: Context) -> Criterion:
    es, gauge = ctx.system(1, 256, 1, 24)
    om = omega_mask(es.grid, 0.0, 0.2)
    rep = spectral_inequality_probe(es, om, es.eigenvalues[:20], 100, seed=1, gauge=gauge)
    ok = rep.violations == 0 and rep.fit_residual <= 0.1
    return Criterion(13, "Spectral inequality", bool(ok), {
        "C_fit": rep.C_fit, "c0": rep.c0, "fit_residual": rep.fit_residual, "violations": rep.violations,
        "log_ratio": np.log(rep.ratio), "sqrt_gap": rep.sqrt_gap, "heldout_excess": rep.heldout_excess,
        "log_quotient_ratio": np.log(rep.quotient_ratio)})


def null_control(ctx: Context) -> Criterion:
    rows, ok = [], True
    for s in PIPELINE_SEEDS:
        es, _ = ctx.system(1, 256, s, 24)
        om = omega_mask(es.grid, 0.0, 0.2)
        rng = np.random.default_rng([s, 7])
        a0 = np.zeros(es.m)
        a0[:20] = rng.standard_normal(20)
        g0 = synthesize(es, a0)
        res = lebeau_rousseau_drive(es, ControlProblem(om, 1.0, g0, 20))
        rel = res.terminal_norm / res.initial_norm
        # minimality and cost linearity on a sub-band
        band = np.arange(5)
        excess = hum_minimality_excess(es, om, band, 0.1, a0[band])
        c1 = hum_control(es, om, band, 0.1, a0[band]).cost
        c2 = hum_control(es, om, band, 0.1, -2.5 * a0[band]).cost
        linear = abs(c2 - 2.5 * c1) <= 1e-10 * max(c2, 1.0)
        # single band: drive with one stage equals HUM plus free decay
        small = ControlProblem(om, 1.0, synthesize(es, np.r_[a0[:3], np.zeros(es.m - 3)]), 3)
        one = lebeau_rousseau_drive(es, small, band_base=1e3)
        hum = hum_control(es, om, np.arange(3), 0.5, a0[:3])
        lam3 = es.eigenvalues[:3]
        W = observation_gram(es, om)[:3, :3]
        a_half = np.exp(-lam3 * 0.5) * a0[:3] + _piece_response(lam3, W, hum.piece, 0.5)
        a_end = np.exp(-lam3 * 0.5) * a_half
        single = len(one.stages) == 1 and np.allclose(one.trajectory.terminal, a_end, rtol=1e-10, atol=1e-14) \
            and np.allclose(one.pieces[0].c, hum.piece.c, rtol=1e-10, atol=0)
        good = rel <= 1e-6 and bool(np.all(excess > 0)) and linear and single
        ok &= bool(good)
        rows.append({"seed": s, "terminal_rel": rel, "cost_ratio": res.cost_ratio, "stages": len(res.stages),
                     "bands": [int(st.band.size) for st in res.stages],
                     "conditions": [st.condition for st in res.stages],
                     "tail_bound": res.tail_bound, "minimality_excess_min": excess.min(),
                     "cost_linear": linear, "single_band_equal": bool(single)})
    return Criterion(14, "Null control", ok, {"runs": rows})


CRITERIA = (
    laplacian_baseline, dense_oracle, renormalization_necessity, ground_state_positivity, conjugation_identity,
    courant_bound, strong_ucp, beltrami_oracle, factorization_quality, mori_consistency, inequality_verifiers,
    cylinder_criterion, spectral_inequality, null_control,
)


def run_all(ctx: Context | None = None, only=None, log=None) -> list[Criterion]:
    ctx = ctx or Context()
    out = []
    for num, fn in enumerate(CRITERIA, start=1):
        if only is not None and num not in only:
            continue
        t = time.perf_counter()
        try:
            c = fn(ctx)
        except Exception as exc:  # a crash is a failed criterion, not a failed run
            c = Criterion(num, fn.__name__, False, {"error": f"{type(exc).__name__}: {exc}"})
        c.seconds = time.perf_counter() - t
        out.append(c)
        if log is not None:
            log(c)
    return out
