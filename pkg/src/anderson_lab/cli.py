"""Command line runner.

    python -m anderson_lab SUBCOMMAND [--config PATH] [--out DIR] [--seed K] [--jobs J]

Exit codes: 0 success, 1 numeric failure or failed check, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, constants
from . import io as aio

SUBCOMMANDS = ("noise", "spectrum", "nodal", "qc", "control", "verify", "report")
OUT_ENV = "ANDERSON_LAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str = "spectrum"
    d: int = 2
    N: int = 128
    eps: float | None = None  # None means 4 / N
    seed: int = 1
    m: int = 10
    tol: float = 1e-8
    delta: float = 1e-3
    qc_index: int = 1
    patch_center: tuple | None = None
    patch_radius: float = 1.0 / 16
    patch_M: int = 256
    omega: tuple = (0.0, 0.2)
    T: float = 1.0
    control_modes: int = 20
    lambda_count: int = 20
    trials: int = 100
    criteria: tuple | None = None
    out: str = "anderson_out"
    jobs: int = 1

    @property
    def mollifier(self) -> float:
        return constants.DEFAULT_MOLLIFIER_CELLS / self.N if self.eps is None else self.eps

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.subcommand in SUBCOMMANDS, f"unknown subcommand {self.subcommand!r}")
        need(self.d in (1, 2), "d must be 1 or 2")
        need(self.N >= 8 and self.N & (self.N - 1) == 0, "N must be a power of two >= 8")
        need(self.mollifier >= 0, "eps must be non-negative")
        need(1 <= self.m <= self.N**self.d // 4, "m must lie in [1, N^d / 4]")
        need(self.tol > 0, "tol must be positive")
        need(0 <= self.delta <= 0.1, "delta must lie in [0, 0.1]")
        need(0 < self.patch_radius <= 0.125, "patch radius must lie in (0, 1/8]")
        need(self.patch_M >= 64 and self.patch_M & (self.patch_M - 1) == 0, "patch M must be a power of two >= 64")
        need(0 <= self.qc_index < self.m, "qc index must be below m")
        a, b = self.omega
        need(0 <= a < b <= 1, "omega must be an interval inside [0, 1]")
        need(self.T > 0, "T must be positive")
        need(self.trials >= 100, "trials must be at least 100")
        need(self.jobs >= 1, "jobs must be positive")
        if self.subcommand == "qc":
            need(self.d == 2, "qc needs d = 2")
        if self.subcommand == "control":
            need(self.d == 1, "control needs d = 1")
            need(1 <= self.control_modes <= self.m, "control modes must not exceed m")
            need(2 <= self.lambda_count <= self.m, "lambda count must lie in [2, m]")
            need(round((b - a) * self.N) >= 4, "omega must contain at least 4 grid cells")

    def echo(self) -> dict:
        out = asdict(self)
        out["eps_effective"] = self.mollifier
        return out


_KEYS = {
    # section, key: (field, parser)
    ("grid", "d"): ("d", int), ("grid", "N"): ("N", int), ("grid", "eps"): ("eps", float),
    ("run", "seed"): ("seed", int), ("run", "m"): ("m", int), ("run", "tol"): ("tol", float),
    ("nodal", "delta"): ("delta", float),
    ("qc", "index"): ("qc_index", int), ("qc", "radius"): ("patch_radius", float), ("qc", "M"): ("patch_M", int),
    ("qc", "center"): ("patch_center", lambda s: tuple(float(v) for v in s.split(","))),
    ("control", "omega"): ("omega", lambda s: tuple(float(v) for v in s.split(","))),
    ("control", "T"): ("T", float), ("control", "modes"): ("control_modes", int),
    ("control", "lambdas"): ("lambda_count", int), ("control", "trials"): ("trials", int),
    ("verify", "criteria"): ("criteria", lambda s: tuple(int(v) for v in s.split(","))),
    ("output", "dir"): ("out", str),
}


def load_config(path: str | None, subcommand: str) -> RunConfig:
    cfg = RunConfig(subcommand=subcommand)
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            entry = _KEYS.get((section, key))
            if entry is None:
                raise ConfigError(f"unknown config key [{section}] {key}")
            name, conv = entry
            if name == "eps" and raw.strip().lower() == "auto":
                setattr(cfg, name, None)
                continue
            try:
                setattr(cfg, name, conv(raw.strip()))
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    return cfg


# -- runner ------------------------------------------------------------------------

@dataclass
class Run:
    cfg: RunConfig
    out: Path
    artifacts: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    def add(self, *paths):
        self.artifacts.extend(Path(p) for p in paths)

    def stage(self, name, fn, *args, **kw):
        t = time.perf_counter()
        self._current = name
        result = fn(*args, **kw)
        self.stages.append({"name": name, "seconds": round(time.perf_counter() - t, 3)})
        return result

    def manifest(self, status: str, failure: dict | None = None) -> Path:
        hashes = {str(p.relative_to(self.out)): aio.sha256(p) for p in sorted(set(self.artifacts))}
        body = {
            "library_version": __version__,
            "config": self.cfg.echo(),
            "constants": constants.ALL,
            "stages": self.stages,
            "checks": self.checks,
            "artifacts": hashes,
            "status": status,
            "failure": failure,
        }
        return aio.write_json(self.out / "manifest.json", body)


def _system(cfg: RunConfig, m: int | None = None):
    from .field import Mollifier, TorusGrid, enhance
    from .spectrum import AndersonOperator, eigensolve, ground_gauge

    grid = TorusGrid(cfg.d, cfg.N)
    op = AndersonOperator(enhance(grid, cfg.seed, Mollifier(cfg.mollifier)))
    es = eigensolve(op, m or cfg.m, tol=cfg.tol)
    return es, ground_gauge(es)


def cmd_noise(run: Run) -> None:
    from .field import Mollifier, TorusGrid, besov_regularity, enhance

    cfg = run.cfg
    grid = TorusGrid(cfg.d, cfg.N)
    nz = run.stage("noise", enhance, grid, cfg.seed, Mollifier(cfg.mollifier))
    for kind, f in (("xi", nz.xi_eps), ("second_order", nz.second_order)):
        run.add(*aio.write_raw(run.out / f"{kind}.f64", f.values, dimension=cfg.d, N=cfg.N, kind=kind,
                               seed=cfg.seed, epsilon=nz.eps))
    gamma = -cfg.d / 2 - 0.1
    summary = {"seed": cfg.seed, "eps": nz.eps, "c_eps": nz.c_eps, "mean": nz.xi_eps.mean(),
               "gamma": gamma, "besov_estimate": besov_regularity(nz.xi_eps.to_spectral(), gamma)}
    run.add(aio.write_json(run.out / "noise.json", summary))


def cmd_spectrum(run: Run) -> None:
    from .spectrum import conjugation_residual

    cfg = run.cfg
    es, gauge = run.stage("eigensolve", _system, cfg)
    rows = [(k, lam, res) for k, (lam, res) in enumerate(zip(es.eigenvalues, es.residuals))]
    run.add(aio.write_csv(run.out / "eigenvalues.csv", ["index", "lambda", "residual"], rows))
    run.add(*aio.write_raw(run.out / "u0.f64", gauge.u0.values, dimension=cfg.d, N=cfg.N, kind="u0",
                           seed=cfg.seed, epsilon=cfg.mollifier, lambda0=gauge.lambda0))
    conj = [conjugation_residual(gauge, es, k) for k in range(es.m)]
    run.add(aio.write_json(run.out / "spectrum.json", {
        "lambda0": gauge.lambda0, "orthonormality_defect": es.orthonormality_defect,
        "max_residual": float(np.max(es.residuals)), "conjugation_residuals": conj}))
    run.checks["residuals"] = bool(np.max(es.residuals) <= cfg.tol * 10)


def cmd_nodal(run: Run) -> None:
    from .nodal import DELTA_SWEEP, courant_check, doubling_index, grid_minimum, nodal_domains

    cfg = run.cfg
    es, _ = run.stage("eigensolve", _system, cfg)
    base = run.stage("courant", courant_check, es, cfg.delta)
    rows = [(e.index, e.rank, e.domain_count, int(e.passed)) for e in base]
    run.add(aio.write_csv(run.out / "courant.csv", ["k", "rank", "domains", "pass"], rows))
    sweep = {str(dl): [e.domain_count for e in courant_check(es, dl)] for dl in DELTA_SWEEP}
    for k in range(es.m):
        labels = nodal_domains(es.function(k), cfg.delta).labels
        run.add(aio.write_pgm(run.out / f"labels_{k:02d}.pgm", labels))
    radii = [1 / 64, 1 / 32, 1 / 16, 1 / 8]
    drows = []
    for k in range(1, es.m):
        u = es.function(k)
        rep = doubling_index(u, grid_minimum(u), radii)
        drows.extend((k, r, q, b) for r, q, b in zip(rep.radii, rep.Q, rep.beta))
    run.add(aio.write_csv(run.out / "doubling.csv", ["k", "r", "Q", "beta"], drows))
    run.add(aio.write_json(run.out / "nodal.json", {"delta": cfg.delta, "sweep_counts": sweep,
                                                     "violations": sum(not e.passed for e in base)}))
    run.checks["courant"] = all(e.passed for e in base)


def cmd_qc(run: Run) -> None:
    from .quasiconformal import run_pipeline

    cfg = run.cfg
    es, gauge = run.stage("eigensolve", _system, cfg)
    p = run.stage("pipeline", run_pipeline, es, gauge, cfg.qc_index, cfg.patch_center, cfg.patch_radius, cfg.patch_M)
    meta = {"x0": list(p.patch.x0), "R": p.patch.R, "M": p.patch.M}
    run.add(*aio.write_complex(run.out / "chi", p.solution.chi, **meta))
    run.add(*aio.write_complex(run.out / "mu", p.mu.mu, **meta))
    run.add(*aio.write_complex(run.out / "h", p.factorization.h, zeta_half_width=float(p.factorization.zeta_axis[-1])))
    band = np.abs(p.v) <= cfg.delta * np.max(np.abs(p.v))
    overlay = np.where(band, 0, np.where(p.v > 0, 1, 2))
    run.add(aio.write_pgm(run.out / "nodal_overlay.pgm", overlay))
    f = p.factorization
    report = {
        "x0": p.patch.x0, "R": p.patch.R, "kappa": p.kappa, "k_sup": p.mu.k_sup,
        "stream_residual": p.stream_residual, "w_beltrami_residual": p.w_beltrami_residual,
        "residual_beltrami": f.residual_beltrami, "jacobian_min": f.jacobian_min, "residual_cr": f.residual_cr,
        "harmonicity": f.harmonicity, "roundtrip": f.roundtrip_error,
        "agreement": p.correspondence.agreement, "compared": p.correspondence.compared,
        "mori_chi": {"alpha": p.mori_chi.alpha, "C": p.mori_chi.C, "violations": p.mori_chi.violations},
        "mori_inverse": {"alpha": p.mori_inverse.alpha, "C": p.mori_inverse.C, "violations": p.mori_inverse.violations},
    }
    run.add(aio.write_json(run.out / "qc.json", report))
    run.checks["factorization"] = bool(f.residual_beltrami <= 1e-6 and f.jacobian_min > 0 and f.residual_cr <= 1e-2
                                       and f.harmonicity <= 1e-2 and p.correspondence.agreement >= 0.99)


def cmd_control(run: Run) -> None:
    from .control import ControlProblem, lebeau_rousseau_drive, omega_mask, spectral_inequality_probe, synthesize

    cfg = run.cfg
    m = max(cfg.m, cfg.control_modes, cfg.lambda_count)
    es, gauge = run.stage("eigensolve", _system, cfg, m)
    om = omega_mask(es.grid, *cfg.omega)
    rng = np.random.default_rng([cfg.seed, 7])
    a0 = np.zeros(es.m)
    a0[: cfg.control_modes] = rng.standard_normal(cfg.control_modes)
    problem = ControlProblem(om, cfg.T, synthesize(es, a0), cfg.control_modes)
    res = run.stage("drive", lebeau_rousseau_drive, es, problem)
    probe = run.stage("probe", spectral_inequality_probe, es, om, es.eigenvalues[: cfg.lambda_count], cfg.trials,
                      cfg.seed, gauge)
    times = res.trajectory.times
    f = res.sample(es, om, times)
    modes = f @ es.eigenfunctions[: cfg.control_modes].reshape(cfg.control_modes, -1).T * es.grid.cell_volume
    hdr = ["t"] + [f"f{k}" for k in range(cfg.control_modes)]
    run.add(aio.write_csv(run.out / "control.csv", hdr, [(t, *row) for t, row in zip(times, modes)]))
    hdr = ["t"] + [f"a{k}" for k in range(cfg.control_modes)]
    run.add(aio.write_csv(run.out / "trajectory.csv", hdr,
                          [(t, *row) for t, row in zip(times, res.trajectory.coefficients)]))
    stages = [{"index": s.index, "t0": s.t0, "t_mid": s.t_mid, "t1": s.t1, "band": s.band.size,
               "condition": s.condition, "regularized": s.regularized, "defect": s.defect, "cost": s.cost}
              for s in res.stages]
    run.add(aio.write_json(run.out / "control.json", {
        "terminal_norm": res.terminal_norm, "initial_norm": res.initial_norm, "cost": res.cost,
        "cost_ratio": res.cost_ratio, "tail_bound": res.tail_bound, "C_fit": probe.C_fit, "c0": probe.c0,
        "fit_residual": probe.fit_residual, "envelope_violations": probe.violations, "stages": stages,
        "band_base": 4.0}))
    run.checks["null_control"] = bool(res.terminal_norm <= 1e-6 * res.initial_norm)
    run.checks["envelope"] = probe.violations == 0


def _criterion_worker(number: int):
    from .acceptance import run_all

    return run_all(only={number})[0]


def cmd_verify(run: Run) -> None:
    from .acceptance import CRITERIA, run_all

    cfg = run.cfg
    wanted = sorted(cfg.criteria) if cfg.criteria else list(range(1, len(CRITERIA) + 1))

    def show(c):
        print(c.line(), flush=True)

    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_criterion_worker, wanted))
        for c in results:
            show(c)
    else:
        results = run_all(only=set(wanted), log=show)
    for c in results:
        run.stages.append({"name": f"criterion_{c.number:02d}", "seconds": round(c.seconds, 3)})
        run.checks[f"criterion_{c.number:02d}"] = c.passed
    body = {"criteria": [{"number": c.number, "name": c.name, "passed": c.passed, "details": c.details}
                         for c in results]}
    run.add(aio.write_json(run.out / "verify.json", body))
    run.add(aio.write_csv(run.out / "verify.csv", ["criterion", "passed"], [(c.number, int(c.passed)) for c in results]))


def cmd_report(out: Path) -> int:
    path = out / "manifest.json"
    if not path.exists():
        print(f"no manifest in {out}", file=sys.stderr)
        return 2
    man = aio.read_json(path)
    cfg = man["config"]
    print(f"{cfg['subcommand']}  status={man['status']}  version={man['library_version']}")
    for st in man["stages"]:
        print(f"  stage {st['name']:<14} {st['seconds']:9.3f} s")
    for name, ok in sorted(man["checks"].items()):
        print(f"  check {name:<14} {'PASS' if ok else 'FAIL'}")
    for name, digest in sorted(man["artifacts"].items()):
        ok = (out / name).exists() and aio.sha256(out / name) == digest
        print(f"  {digest[:12]}  {'ok ' if ok else 'BAD'} {name}")
    if man.get("failure"):
        print(f"  failure in {man['failure']['stage']}: {man['failure']['error']}")
    return 0 if man["status"] == "ok" else 1


COMMANDS = {"noise": cmd_noise, "spectrum": cmd_spectrum, "nodal": cmd_nodal, "qc": cmd_qc,
            "control": cmd_control, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anderson-lab", description="Anderson operator experiments")
    sub = ap.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [grid], [run], [nodal], [qc], [control], [verify], [output]")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--jobs", type=int, help="worker processes (verify)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.subcommand)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.out is not None:
            cfg.out = args.out
        elif os.environ.get(OUT_ENV):
            cfg.out = os.environ[OUT_ENV]
        cfg.validate()
    except ConfigError as exc:
        print(f"anderson-lab: error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    if args.subcommand == "report":
        return cmd_report(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"anderson-lab: error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, out)
    try:
        COMMANDS[args.subcommand](run)
    except Exception as exc:
        stage = getattr(run, "_current", args.subcommand)
        run.manifest("failed", {"stage": stage, "error": f"{type(exc).__name__}: {exc}"})
        print(f"anderson-lab: {args.subcommand} failed in {stage}: {exc}", file=sys.stderr)
        if os.environ.get("ANDERSON_LAB_DEBUG"):
            traceback.print_exc()
        return 1
    ok = all(run.checks.values())
    run.manifest("ok" if ok else "checks_failed")
    return 0 if ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
