"""Invariant suites run by ``rfmkit verify`` and, at full size, by the acceptance tests."""
from dataclasses import dataclass
import math
import time

import numpy as np

from . import rng as rngmod
from .bridge.perturb import perturb_field
from .bridge.sphere import (HarmonicSphereBridge, HarmonicTarget, SphereBridge, SpherePopulationField,
                            UniformSpherePrior, VMFTarget)
from .bridge.spd import spd_log_jacobian
from .geometry import SPD, Euclidean, Sphere, divergence_fd, jacobi_closed_form
from .metrics import RateRow, SphereCellPartition, binned_noise_floor, rate_regress, tv_binned
from .oracle import (ball_conditional_cells, bridge_rejection_histogram, numeric_dexp_det,
                     numeric_jacobi, numeric_transport, geodesic_path)
from .quadrature import sphere_rule
from .sampler import (InterpolatedField, batch_sample, euler_sample, make_schedule, polynomial_step,
                      step_guard)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured:.3g} tol={self.tolerance:.3g} {self.detail}".rstrip()


def _check(name, measured, tol, detail="", lower=False):
    ok = bool(measured >= tol) if lower else bool(measured <= tol)
    return CheckResult(name, ok and math.isfinite(measured), float(measured), float(tol), detail)


GEOMETRY_CASES = (("S2", Sphere(2)), ("S3", Sphere(3)), ("S4", Sphere(4)), ("SPD2", SPD(2)),
                  ("SPD3", SPD(3)), ("R3", Euclidean(3)))


def _random_pairs(m, rng, n):
    x = m.random_point(rng, n)
    if isinstance(m, Sphere):
        # keep geodesic lengths below the cut locus with a margin
        v = m.random_tangent(rng, x)
        v *= (rng.uniform(0.0, 2.5, n) / np.maximum(m.norm(x, v), 1e-300))[:, None]
    else:
        v = m.random_tangent(rng, x, scale=0.7)
    return x, v


def geometry_suite(n_cases=1000, seed=0):
    """Exp/Log roundtrip, transport isometry, bridge-velocity formulas, Jacobi oracle."""
    out = []
    for label, m in GEOMETRY_CASES:
        rng = rngmod.stream(seed, rngmod.ORACLE, 10, m.dim)
        x, v = _random_pairs(m, rng, n_cases)
        y = m.exp(x, v)
        err = np.max(np.abs(m.log(x, y) - v))
        out.append(_check(f"{label} exp/log roundtrip", err, 1e-9))
        u = m.random_tangent(rng, x)
        w = m.random_tangent(rng, x)
        pu, pw = m.transport(x, y, u), m.transport(x, y, w)
        err = np.max(np.abs(m.inner(y, pu, pw) - m.inner(x, u, w)) / (1.0 + np.abs(m.inner(x, u, w))))
        out.append(_check(f"{label} transport isometry", err, 1e-10))
        t = rng.uniform(0.0, 0.95, n_cases)
        shape = (n_cases,) + (1,) * (x.ndim - 1)
        a = m.bridge_velocity(x, y, t.reshape(shape), formula="transport")
        b = m.bridge_velocity(x, y, t.reshape(shape), formula="log")
        err = np.max(np.abs(a - b) / (1.0 + np.abs(b)))
        out.append(_check(f"{label} bridge-velocity dual formula", err, 1e-8))
        desc = m.descriptor
        c = rng.uniform(desc.k_min, desc.k_max, n_cases)
        tt = rng.uniform(0.0, 3.0, n_cases)
        j0, dj0 = rng.uniform(0.0, 1.0, n_cases), rng.uniform(0.0, 1.0, n_cases)
        closed = np.array([jacobi_closed_form(ci, ti, a_, b_) for ci, ti, a_, b_ in zip(c, tt, j0, dj0)])
        err = np.max(np.abs(numeric_jacobi(c, tt, j0, dj0, steps=4096) - closed))
        out.append(_check(f"{label} Jacobi closed form vs ODE", err, 1e-6))
    return out


def density_suite(seed=0, n_pairs=4_000_000, spd_cases=10):
    """Normalisation, continuity equation, rejection histogram and SPD log-Jacobian checks."""
    out = []
    rng = rngmod.stream(seed, rngmod.ORACLE, 20)
    d = 2
    harm = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    vmf = SphereBridge(VMFTarget(d, [1.0, 0.0, 0.0], 4.0), n_radial=48, n_angular=12, max_doublings=0)
    S = Sphere(d)
    y, w = sphere_rule(d, 200)
    worst_m = worst_c = 0.0
    for t in (0.0, 0.3, 0.6, 0.9):
        for br in (harm, vmf):
            worst_m = max(worst_m, abs(np.sum(w * br.marginal_density(t, y)) - 1.0))
            for x in S.random_point(rng, 2):
                worst_c = max(worst_c, abs(np.sum(w * br.conditional_density(t, x[None], y)) - 1.0))
    out.append(_check("sphere marginal normalisation", worst_m, 1e-3))
    out.append(_check("sphere conditional normalisation", worst_c, 1e-3))

    # continuity equation d_t p + div(p v) = p (d_t log p + score.v + div v)
    field = SpherePopulationField(vmf)
    worst = 0.0
    pmax = 0.0
    for _ in range(20):
        t = float(rng.uniform(0.05, 0.85))
        x = S.random_point(rng, 1)
        dt = 1e-4
        p = vmf.marginal_density(t, x)
        dp = (vmf.marginal_density(t + dt, x) - vmf.marginal_density(t - dt, x)) / (2 * dt)
        div = divergence_fd(S, field, t, x, 1e-4)
        res = dp + p * (np.sum(vmf.score(t, x) * vmf.velocity(t, x), axis=-1) + div)
        worst = max(worst, float(np.max(np.abs(res))))
        pmax = max(pmax, float(np.max(vmf.marginal_density(t, y))))
    out.append(_check("continuity-equation residual / max p_t", worst / pmax, 1e-2))

    # rejection histogram of X1 given X_t in a small ball vs the exact conditional
    t, radius = 0.5, 0.15
    part = SphereCellPartition(d, 10, n_nodes=20_000)
    center = S.random_point(rng)
    emp = bridge_rejection_histogram(harm.target, UniformSpherePrior(d), t, center, radius, part,
                                     n_pairs, rng)
    exact, exact_se = ball_conditional_cells(harm, t, center, radius, part, rng, n_ball=400)
    # binomial error under the null plus the Monte Carlo error of the exact side
    se = np.sqrt(exact * (1.0 - exact) / emp.n_accepted + exact_se ** 2)
    z = np.max(np.abs(emp.probs - exact) / np.maximum(se, 1.0 / emp.n_accepted))
    out.append(_check("rejection histogram vs conditional (max |z|)", z, 3.0,
                      f"accepted={emp.n_accepted}"))

    # SPD log-Jacobian of Exp against the finite-difference determinant
    worst, lowest = 0.0, math.inf
    for n in (2, 3):
        m = SPD(n)
        for _ in range(spd_cases):
            x1 = m.random_point(rng)
            v = m.random_tangent(rng, x1, scale=0.8)
            lj = float(spd_log_jacobian(x1, v))
            worst = max(worst, abs(lj - math.log(numeric_dexp_det(m, x1, v, 1e-4))))
            lowest = min(lowest, lj)
    out.append(_check("SPD log-Jacobian vs FD oracle", worst, 1e-5))
    out.append(_check("SPD log-Jacobian nonnegative", lowest, 0.0, lower=True))
    return out


def oracle_suite():
    """Oracle self-checks against analytic truths."""
    out = [
        _check("jacobi c=1 pi", abs(numeric_jacobi(1.0, math.pi, 1.0, 0.0) - 1.0), 1e-6),
        _check("jacobi c=-1 sinh(2)", abs(numeric_jacobi(-1.0, 2.0, 0.0, 1.0) - math.sinh(2.0)), 1e-6),
        _check("jacobi c=0 linear", abs(numeric_jacobi(0.0, 1.7, 0.3, 2.0) - (0.3 + 3.4)), 1e-12),
    ]
    S = Sphere(2)
    e1, e2, e3 = np.eye(3)
    path = geodesic_path(S, e3, e1, 256)
    out.append(_check("pole-ladder quarter circle", np.max(np.abs(numeric_transport(S, path, e2) - e2)), 1e-6))
    r = 1.1
    v = np.array([r, 0.0, 0.0])
    out.append(_check("sphere dExp determinant", abs(numeric_dexp_det(S, e3, v) - math.sin(r) / r), 1e-7))
    return out


def sampler_suite(seed=0):
    out = []
    sched = make_schedule("polynomial", 0.75, eta=0.1)
    out.append(_check("polynomial N at T=3/4", abs(sched.N - 10), 0))
    times = np.asarray(sched.times[:-1])
    i = np.arange(len(times) - 1)
    err = np.max(np.abs(np.diff(times) - polynomial_step(0.1, i)))
    out.append(_check("polynomial step identity", err, 1e-14))
    g = step_guard(Sphere(2).descriptor, math.pi, 10.0)
    out.append(_check("guard sphere B=pi L=10", abs(g.h_max_allowed - 0.025), 1e-12))
    g = step_guard(SPD(2).descriptor, 1.0, 1.0)
    out.append(_check("guard SPD drops R/B", 0.0 if math.isinf(g.terms[0]) else 1.0, 0.0))
    d = 3
    bridge = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    field = perturb_field(SpherePopulationField(bridge), 0.1, "uniform_additive", seed=seed)
    sched = make_schedule("constant", 0.9, n_steps=40)
    a = batch_sample(field, sched, UniformSpherePrior(d), 2000, seed, track_logdet=True)
    b = batch_sample(field, sched, UniformSpherePrior(d), 2000, seed, track_logdet=True, backend="generic")
    out.append(_check("compiled vs generic Euler points", np.max(np.abs(a.points - b.points)), 1e-12))
    out.append(_check("compiled vs generic log-det", np.max(np.abs(a.logdet - b.logdet)), 1e-10))
    S = Sphere(2)
    x0 = S.random_point(rngmod.stream(seed, rngmod.ORACLE, 30), 200)
    sched = make_schedule("constant", 0.9, n_steps=12)
    base = SpherePopulationField(HarmonicSphereBridge(HarmonicTarget.two_bump(2)))
    tr = euler_sample(base, sched, x0)
    interp = InterpolatedField(base, sched)
    worst = 0.0
    for k in range(sched.N):
        t = sched.times[k]
        worst = max(worst, float(np.max(np.abs(interp(t, tr.points[k]) - base(t, tr.points[k])))))
    out.append(_check("interpolated field matches at grid points", worst, 1e-8))
    return out


def metrics_suite(seed=0):
    out = []
    h = np.array([0.1, 0.05, 0.025, 0.0125, 0.00625])
    for power in (1, 2):
        rows = [RateRow(1, float(hi), 0.0, 0.0, 0.9, 2, 0.3 * hi ** power, 1e-9, 1, 0) for hi in h]
        out.append(_check(f"rate_regress planted slope {power}",
                          abs(rate_regress(rows, "h").slope - power), 0.02))
    d = 2
    bridge = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    part = SphereCellPartition(d, 96)
    smp = bridge.target.sample(rngmod.stream(seed, rngmod.TARGET, 40), 100_000)
    mass = part.cell_mass(bridge.target.density)
    tv, se = tv_binned(smp, None, part, seed=seed, cell_mass=mass)
    floor = binned_noise_floor(mass, len(smp))
    out.append(_check("tv_binned self-sampling within noise floor (|tv - floor| / 3se)",
                      abs(tv - floor) / (3 * se), 1.0, f"tv={tv:.4g} floor={floor:.4g}"))
    return out


SUITES = {
    "oracle": oracle_suite,
    "geometry": lambda: geometry_suite(n_cases=200),
    "density": lambda: density_suite(n_pairs=2_000_000, spd_cases=4),
    "sampler": sampler_suite,
    "metrics": metrics_suite,
}


def run_all(suites=None, log=print):
    """Run the named suites; returns ``(all_passed, results)`` and logs one line per check."""
    results = []
    for name in suites or SUITES:
        t0 = time.time()
        res = SUITES[name]()
        results.extend(res)
        for r in res:
            log(r.line())
        log(f"-- {name}: {sum(r.passed for r in res)}/{len(res)} passed in {time.time() - t0:.1f}s")
    return all(r.passed for r in results), results
