"""``rfmkit`` command line: verify | sample | rates | bounds.

Exit codes: 0 success, 1 a check or run failed, 2 bad usage or config.
"""
import argparse
import hashlib
import math
import os
from pathlib import Path
import sys

import numpy as np

from . import __version__, kernels
from . import rng as rngmod
from .bridge.perturb import perturb_field
from .bridge.sphere import (AtomicTarget, SpherePopulationField, UniformSpherePrior, make_sphere_bridge,
                            make_sphere_target)
from .checks import SUITES, run_all
from .config import ConfigError, ExperimentConfig, load_config
from .errors import NumericFailure, RFMError
from .experiments import (n_to_reach, spd_field, spd_gradient_scaling, stratified_tv)
from .metrics import RateRow, rate_regress, write_rate_table
from .oracle import QUANTITIES, bound_sweep, write_bound_csv
from .sampler import (batch_sample, dump_points, empirical_guard, make_schedule,
                      write_manifest)

STAMP = "verify.stamp"


def build_id():
    """Hash of the package sources plus the active kernel backend."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".pyx") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    h.update(kernels.BACKEND.encode())
    return h.hexdigest()[:16]


# --- building blocks from a config --------------------------------------------------------------

def build_sphere(cfg):
    if cfg.target == "atoms":
        target = AtomicTarget.cluster(cfg.dim, cfg.n_atoms, cfg.kappa, seed=cfg.seed)
    else:
        target = make_sphere_target(cfg.target, cfg.dim, strength=cfg.strength, kappa=cfg.kappa)
    bridge = make_sphere_bridge(target)
    return bridge, SpherePopulationField(bridge)


def build_field(cfg):
    """``(field, prior, bridge)``; ``bridge`` is ``None`` on SPD."""
    if cfg.manifold == "spd":
        beta = None if math.isnan(cfg.beta) else cfg.beta
        field = spd_field(cfg.dim, cfg.dof, cfg.n_bank, cfg.seed, beta)
        base, bridge = field, None
    else:
        bridge, base = build_sphere(cfg)
    field = perturb_field(base, cfg.eps, cfg.perturbation, seed=cfg.seed) if cfg.eps > 0 else base
    prior = base.prior if cfg.manifold == "spd" else UniformSpherePrior(cfg.dim)
    return field, prior, bridge


def build_schedule(cfg, T=None):
    T = cfg.T if T is None else T
    if cfg.schedule == "polynomial":
        return make_schedule("polynomial", T, eta=0.05 if math.isnan(cfg.eta) else cfg.eta)
    if not math.isnan(cfg.h):
        return make_schedule("constant", T, h=cfg.h)
    return make_schedule("constant", T, n_steps=cfg.n_steps or 100)


def schedule_guard(field, prior, schedule, seed, n_points=64, n_probe=16):
    """Empirical guard report per step, probed at up to ``n_probe`` step times."""
    points = prior.sample(rngmod.stream(seed, rngmod.ORACLE, 30), n_points)
    idx = np.unique(np.linspace(0, schedule.N - 1, min(n_probe, schedule.N)).round().astype(int))
    probed = {int(i): empirical_guard(field, float(schedule.times[i]), points) for i in idx}
    keys = np.array(sorted(probed))
    return [probed[int(keys[np.abs(keys - i).argmin()])] for i in range(schedule.N)]


def _manifest(cfg, **extra):
    out = {"rfmkit_version": __version__, "build": build_id(), "backend": kernels.BACKEND}
    out.update({f"config.{k}": v for k, v in cfg.as_dict().items()})
    out.update(extra)
    return out


def _write_with_manifest(path, cfg, **extra):
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    write_manifest(str(path) + ".manifest", _manifest(cfg, sha256=digest, **extra))


# --- subcommands --------------------------------------------------------------------------------

def cmd_verify(cfg, out, log=print):
    field, prior, _ = build_field(cfg)
    schedule = build_schedule(cfg)
    reports = [r.with_step(h) for r, h in zip(schedule_guard(field, prior, schedule, cfg.seed),
                                               schedule.steps)]
    bad = [r for r in reports if r.violated]
    if bad:
        worst = min(bad, key=lambda r: r.h_max_allowed - r.h)
        log(worst.describe())
        if cfg.guard_policy == "fail":
            log(f"FAIL guard: {len(bad)} of {schedule.N} steps exceed the invertibility threshold")
            return 1
        log(f"WARN guard: {len(bad)} of {schedule.N} steps exceed the invertibility threshold")
    else:
        log(f"PASS guard: all {schedule.N} steps below h_max (min {min(r.h_max_allowed for r in reports):.4g})")
    names = list(SUITES) if cfg.suites == "all" else [s.strip() for s in cfg.suites.split(",") if s.strip()]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}")
    ok, results = run_all(names, log=log)
    if not ok:
        first = next(r for r in results if not r.passed)
        log(f"first failing check: {first.line()}")
        return 1
    out.mkdir(parents=True, exist_ok=True)
    (out / STAMP).write_text(f"build={build_id()}\nsuites={','.join(names)}\nchecks={len(results)}\n")
    log(f"verify passed: {len(results)} checks")
    return 0


def cmd_sample(cfg, out, log=print):
    field, prior, _ = build_field(cfg)
    schedule = build_schedule(cfg)
    guard = schedule_guard(field, prior, schedule, cfg.seed) if cfg.guard_policy == "fail" else None
    res = batch_sample(field, schedule, prior, cfg.n_samples, cfg.seed, workers=cfg.workers,
                       chunk_size=cfg.chunk_size, guard=guard, guard_policy=cfg.guard_policy)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "samples.bin"
    digest = dump_points(path, field.manifold, res.points)
    extra = dict(res.manifest)
    if cfg.manifold == "spd":
        base = getattr(field, "base", field)
        extra["ess_min"] = base.last_min_ess
        extra["ess_floor"] = base.ess_floor
        log(f"importance sampling: min ESS {base.last_min_ess:.1f} (floor {base.ess_floor:g})")
    write_manifest(str(path) + ".manifest", _manifest(cfg, sha256=digest, **extra))
    log(f"wrote {cfg.n_samples} samples to {path} ({int(res.failed.sum())} failed), sha256 {digest}")
    return 0


def _require_stamp(out):
    stamp = out / STAMP
    if not stamp.exists():
        return f"no {STAMP} in {out}: run `rfmkit verify` first"
    fields = dict(line.split("=", 1) for line in stamp.read_text().splitlines() if "=" in line)
    if fields.get("build") != build_id():
        return f"{STAMP} belongs to build {fields.get('build')}, current build is {build_id()}"
    return None


def _rate_rows(cfg, log):
    _, prior, bridge = build_field(cfg)
    if bridge is None:
        raise ConfigError("rate runs need a sphere manifold")
    base = SpherePopulationField(bridge)
    if cfg.experiment == "h_rate":
        values = cfg.sweep or (50, 100, 200, 400, 800)
    else:
        values = cfg.sweep or (0.02, 0.05, 0.1, 0.2)
    if len(values) < 4:
        raise ConfigError("a rate sweep needs at least 4 points")
    rows, dropped = [], []
    for v in values:
        try:
            if cfg.experiment == "h_rate":
                sched = make_schedule("constant", cfg.T, n_steps=int(v))
                field, eps = perturb_field(base, cfg.eps, cfg.perturbation, seed=cfg.seed), cfg.eps
            else:
                sched = make_schedule("constant", cfg.T, n_steps=cfg.n_steps or 1600)
                field, eps = perturb_field(base, float(v), cfg.perturbation, seed=cfg.seed), float(v)
            tv, se, nf = stratified_tv(field, bridge, sched, cfg.n_samples, cfg.seed, workers=cfg.workers)
            rows.append(RateRow(sched.N, sched.param, 0.0, eps, cfg.T, cfg.dim, tv, se,
                                cfg.n_samples, cfg.seed))
            log(f"  N={sched.N} eps={eps:g}: TV={tv:.4g} +- {se:.2g} ({nf} failed)")
        except (NumericFailure, ValueError) as exc:
            dropped.append((v, str(exc)))
            log(f"  dropped sweep point {v:g}: {exc}")
    return rows, dropped


def _schedule_rows(cfg, log):
    bridge, field = build_sphere(cfg)
    consts = cfg.sweep or (16, 64, 256, 1024)
    etas = cfg.eta_sweep or (0.04, 0.01, 0.0025)
    if len(consts) < 4:
        raise ConfigError("the constant-step ladder needs at least 4 points")
    Ts = cfg.t_grid or (0.75, 0.875, 0.9375)
    mean = bridge.target.atoms.mean(axis=0) if hasattr(bridge.target, "atoms") else None
    cap = (-mean / np.linalg.norm(mean), cfg.cap_radius) if mean is not None else None
    ladder_rows, pairs, dropped = [], [], []
    for T in Ts:
        reach = {}
        for kind, ladder in (("constant", consts), ("polynomial", etas)):
            ns, tvs = [], []
            for p in ladder:
                try:
                    sched = (make_schedule("constant", T, n_steps=int(p)) if kind == "constant"
                             else make_schedule("polynomial", T, eta=float(p)))
                    tv, se, _ = stratified_tv(field, bridge, sched, cfg.n_samples, cfg.seed, cap=cap,
                                              workers=cfg.workers)
                except NumericFailure as exc:
                    dropped.append((T, kind, p, str(exc)))
                    continue
                ladder_rows.append((T, kind, sched.N, float(p), tv, se))
                log(f"  T={T:g} {kind} param={p:g} N={sched.N}: TV={tv:.4g} +- {se:.2g}")
                ns.append(sched.N)
                tvs.append(tv)
            reach[kind] = n_to_reach(ns, tvs, cfg.tv_star)
        pairs.append((T, reach["constant"][0], reach["polynomial"][0],
                      reach["constant"][1] or reach["polynomial"][1]))
    return ladder_rows, pairs, dropped


def cmd_rates(cfg, out, log=print):
    problem = _require_stamp(out)
    if problem:
        log(problem)
        return 1
    if cfg.experiment == "schedule":
        ladder, pairs, dropped = _schedule_rows(cfg, log)
        path = out / "schedule_ladder.csv"
        with open(path, "w") as fh:
            fh.write("T,kind,N,param,tv_hat,std_err\n")
            for T, kind, N, p, tv, se in ladder:
                fh.write(f"{T!r},{kind},{N},{p!r},{tv!r},{se!r}\n")
        _write_with_manifest(path, cfg, dropped=len(dropped))
        path = out / "schedule_pairs.csv"
        with open(path, "w") as fh:
            fh.write("T,N_constant,N_polynomial,ratio,extrapolated\n")
            for T, nc, npoly, ext in pairs:
                fh.write(f"{T!r},{nc!r},{npoly!r},{nc / npoly!r},{int(ext)}\n")
        x = np.log([1.0 / (1.0 - p[0]) for p in pairs])
        y = np.log([p[1] / p[2] for p in pairs])
        slope = float(np.polyfit(x, y, 1)[0]) if len(pairs) >= 2 else math.nan
        _write_with_manifest(path, cfg, tv_star=cfg.tv_star, exponent=slope)
        for T, nc, npoly, _ in pairs:
            log(f"T={T:g}: N_constant={nc:.1f} N_polynomial={npoly:.1f} ratio={nc / npoly:.3g}")
        log(f"ratio exponent in 1/(1-T): {slope:.3f}")
        return 0
    rows, dropped = _rate_rows(cfg, log)
    path = out / "rates.csv"
    write_rate_table(path, rows)
    axis = "h" if cfg.experiment == "h_rate" else "eps"
    try:
        fit = rate_regress(rows, axis, seed=cfg.seed)
    except RFMError as exc:
        _write_with_manifest(path, cfg, dropped=len(dropped))
        log(f"no slope: {exc}")
        return 1
    _write_with_manifest(path, cfg, dropped=len(dropped), slope=fit.slope, r2=fit.r2)
    log(f"slope vs {axis}: {fit.slope:.3f} (95% CI {fit.slope_ci[0]:.3f}..{fit.slope_ci[1]:.3f}), "
        f"r2={fit.r2:.4f}, rows used {fit.n_used} of {len(rows)}")
    return 0


def cmd_bounds(cfg, out, log=print):
    out.mkdir(parents=True, exist_ok=True)
    if cfg.manifold == "spd":
        if cfg.dim != 2:
            raise ConfigError("SPD bound sweeps are implemented for SPD(2)")
        field, _, _ = build_field(cfg)
        ts = cfg.t_grid or (0.5, 0.6, 0.7, 0.8, 0.9)
        g = spd_gradient_scaling(field, ts, n_points=cfg.n_points, seed=cfg.seed)
        path = out / "spd_gradient.csv"
        with open(path, "w") as fh:
            fh.write("t,mean_grad_norm,std_err\n")
            for t, m, se in zip(g.t, g.mean_norm, g.std_err):
                fh.write(f"{t!r},{m!r},{se!r}\n")
        _write_with_manifest(path, cfg, slope=g.slope, r2=g.r2)
        ok = abs(g.slope - 1.0) <= 0.4
        log(f"{'PASS' if ok else 'FAIL'} log E|grad v| vs log 1/(1-t): slope {g.slope:.3f}, r2 {g.r2:.3f}")
        return 0 if ok else 1
    _, field = build_sphere(cfg)
    ts = cfg.t_grid or tuple(np.linspace(0.05, 0.95, 10))
    points = field.manifold.random_point(rngmod.stream(cfg.seed, rngmod.PRIOR, 11), cfg.n_points)
    reports = [bound_sweep(field, q, ts, points) for q in QUANTITIES]
    path = out / "bounds.csv"
    write_bound_csv(path, reports)
    _write_with_manifest(path, cfg)
    ok = True
    for r in reports:
        good = r.max_ratio <= 1.0 and not r.flagged
        ok &= good
        log(f"{'PASS' if good else 'FAIL'} {r.quantity}: max ratio {r.max_ratio:.4g}, "
            f"{len(r.rows)} nodes, {len(r.flagged)} flagged")
    return 0 if ok else 1


COMMANDS = {"verify": cmd_verify, "sample": cmd_sample, "rates": cmd_rates, "bounds": cmd_bounds}


def _parser():
    p = argparse.ArgumentParser(prog="rfmkit", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="master seed, 0 <= seed < 2**64")
    p.add_argument("--workers", type=int, help="worker threads (fallback: RFM_BENCH_WORKERS)")
    return p


def resolve_config(args, environ=os.environ):
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    elif environ.get("RFM_BENCH_WORKERS"):
        try:
            cfg.workers = int(environ["RFM_BENCH_WORKERS"])
        except ValueError as exc:
            raise ConfigError("RFM_BENCH_WORKERS must be an integer") from exc
    if args.out:
        cfg.out = args.out
    return cfg.validate()


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    try:
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RFMError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
