"""Desk-scale experiment recipes behind ``rfmkit rates`` / ``bounds`` and the acceptance suite."""
from dataclasses import dataclass
import math

import numpy as np

from . import rng as rngmod
from .bridge.fields import FunctionField
from .bridge.perturb import perturb_field
from .bridge.spd import RiemannianGaussianPrior, SpdImportanceField, WishartTarget
from .bridge.sphere import (AtomicSphereBridge, AtomicTarget, HarmonicSphereBridge, HarmonicTarget,
                            SpherePopulationField, UniformSpherePrior)
from .errors import InvalidArgument
from .geometry import Sphere, covariant_jacobian_fd
from .metrics import RateRow, lemma1_diagnostic, loglog_fit, rate_regress
from .oracle import QUANTITIES, bound_sweep
from .quadrature import cap_fraction, sphere_volume
from .sampler import batch_sample, make_schedule, step_guard


# --- push-forward TV with optional stratification of the prior -----------------------------

class CapStratum:
    """Uniform law on S^d restricted to (``inside``) or outside a geodesic cap."""

    def __init__(self, d, center, radius, inside):
        self.d = int(d)
        self.prior = UniformSpherePrior(self.d)
        self.manifold = self.prior.manifold
        self.center = np.asarray(center, dtype=float) / np.linalg.norm(center)
        self.radius = float(radius)
        self.inside = bool(inside)
        frac = cap_fraction(self.d, self.radius)
        self.mass = frac if self.inside else 1.0 - frac

    def sample(self, rng, size):
        out, have = [], 0
        while have < size:
            k = max(int(2 * (size - have) / max(self.mass, 1e-3)), 256)
            x = self.manifold.random_point(rng, k)
            keep = (self.manifold.dist(x, self.center) < self.radius) == self.inside
            out.append(x[keep])
            have += int(keep.sum())
        return np.concatenate(out)[:size]


def _log_marginal(bridge, t, x):
    if hasattr(bridge, "log_marginal_density"):
        return bridge.log_marginal_density(t, x)
    with np.errstate(divide="ignore"):
        return np.log(bridge.marginal_density(t, x))


def pushforward_deviations(field, bridge, schedule, prior, n, seed, stream_path=(), workers=1,
                           chunk_size=4096):
    """Per-trajectory ``|1 - p_T(Y) |det dF| / p0(X0)|`` for Euler output ``Y = F(X0)``.

    ``prior`` supplies the starting points; the density ratio always uses
    the uniform density, so a stratum sampler gives deviations conditional
    on its stratum.  Trajectories that fail count as deviation 1.
    """
    res = batch_sample(field, schedule, prior, n, seed, workers=workers, chunk_size=chunk_size,
                       track_logdet=True, fail_fraction=1.0, stream_path=stream_path)
    dev = np.ones(n)
    ok = ~res.failed
    lr = (_log_marginal(bridge, schedule.T, res.points[ok]) + res.logdet[ok]
          + math.log(sphere_volume(bridge.d)))
    dev[ok] = np.abs(1.0 - np.exp(lr))
    return dev, int(res.failed.sum())


def stratified_tv(field, bridge, schedule, n, seed, cap=None, cap_share=0.3, workers=1):
    """Push-forward TV of the Euler output against ``p_T``, with a standard error.

    ``cap = (center, radius)`` splits the uniform prior into a cap and its
    complement, sampled separately (``cap_share`` of the budget in the cap)
    and recombined with their exact masses.  Returns ``(tv, se, n_failed)``.
    """
    d = bridge.d
    if cap is None:
        dev, nf = pushforward_deviations(field, bridge, schedule, UniformSpherePrior(d), n, seed,
                                         workers=workers)
        return 0.5 * dev.mean(), 0.5 * dev.std(ddof=1) / math.sqrt(n), nf
    center, radius = cap
    tv, var, nf = 0.0, 0.0, 0
    for k, (inside, share) in enumerate(((True, cap_share), (False, 1.0 - cap_share))):
        stratum = CapStratum(d, center, radius, inside)
        m = max(int(round(n * share)), 2)
        dev, f = pushforward_deviations(field, bridge, schedule, stratum, m, seed, stream_path=(k,),
                                        workers=workers)
        tv += stratum.mass * 0.5 * dev.mean()
        var += (stratum.mass * 0.5) ** 2 * dev.var(ddof=1) / m
        nf += f
    return float(tv), float(math.sqrt(var)), nf


# --- h- and eps-rate sweeps --------------------------------------------------------------------

def two_bump_field(d):
    bridge = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    return bridge, SpherePopulationField(bridge)


def h_rate_rows(d=3, T=0.9, n_values=(50, 100, 200, 400, 800), n_samples=200_000, seed=0, workers=1):
    """TV of the exact-field Euler sampler against ``p_T`` along a constant-step sweep."""
    bridge, field = two_bump_field(d)
    rows = []
    for N in n_values:
        sched = make_schedule("constant", T, n_steps=N)
        tv, se, _ = stratified_tv(field, bridge, sched, n_samples, seed, workers=workers)
        rows.append(RateRow(N, sched.param, 0.0, 0.0, T, d, tv, se, n_samples, seed))
    return rows


def eps_rate_rows(d=3, T=0.9, N=1600, eps_values=(0.02, 0.05, 0.1, 0.2), mode="uniform_additive",
                  n_samples=200_000, seed=0, workers=1):
    """TV at a fine fixed step for a family of perturbed fields of size ``eps``."""
    bridge, base = two_bump_field(d)
    sched = make_schedule("constant", T, n_steps=N)
    rows = []
    for eps in eps_values:
        field = perturb_field(base, eps, mode, seed=seed)
        tv, se, _ = stratified_tv(field, bridge, sched, n_samples, seed, workers=workers)
        rows.append(RateRow(N, sched.param, 0.0, float(eps), T, d, tv, se, n_samples, seed))
    return rows


# --- schedule comparison -----------------------------------------------------------------------------

def n_to_reach(ns, tvs, tv_star):
    """Steps needed for ``tv_star`` by log-log interpolation of a (N, TV) ladder.

    Returns ``(N, extrapolated)``; outside the ladder the nearest segment
    is extended.
    """
    order = np.argsort(ns)
    ln, lt = np.log(np.asarray(ns, float)[order]), np.log(np.asarray(tvs, float)[order])
    if len(ln) < 2:
        raise InvalidArgument("need at least two ladder points")
    target = math.log(tv_star)
    for i in range(len(ln) - 1):
        lo, hi = sorted((lt[i], lt[i + 1]))
        if lo <= target <= hi and lt[i] != lt[i + 1]:
            f = (target - lt[i]) / (lt[i + 1] - lt[i])
            return float(math.exp(ln[i] + f * (ln[i + 1] - ln[i]))), False
    i = 0 if target > lt[0] else len(ln) - 2
    slope = (lt[i + 1] - lt[i]) / (ln[i + 1] - ln[i])
    if slope >= 0:
        raise InvalidArgument("TV does not decrease along the ladder")
    return float(math.exp(ln[i] + (target - lt[i]) / slope)), True


@dataclass
class ScheduleComparison:
    rows: list              # (T, kind, N, param, tv, se)
    reach: dict             # T -> (N_constant, N_polynomial, extrapolated)
    tv_star: float
    exponent: float
    r2: float

    @property
    def ratios(self):
        return {T: nc / npoly for T, (nc, npoly, _) in self.reach.items()}


def concentrated_field(d=2, n_atoms=4, kappa=1e4, seed=0):
    bridge = AtomicSphereBridge(AtomicTarget.cluster(d, n_atoms, kappa, seed=seed))
    return bridge, SpherePopulationField(bridge)


def schedule_comparison(T_values=(0.75, 0.875, 0.9375), tv_star=1e-4, d=2, n_atoms=4, kappa=1e4,
                        const_ladder=(16, 64, 256, 1024), eta_ladder=(0.04, 0.01, 0.0025),
                        n_samples=100_000, seed=0, cap_radius=0.3, workers=1):
    """Steps each schedule needs to reach ``tv_star``, and the growth of their ratio in ``1/(1-T)``.

    The target is a tight cluster of atoms, the regime where the field's
    regularity degrades like the worst-case ``1/(1-t)`` powers.  Starting
    points near the antipode of the cluster, where the field is stiff at
    early times, are sampled as a separate stratum.
    """
    bridge, field = concentrated_field(d, n_atoms, kappa, seed)
    mean = bridge.target.atoms.mean(axis=0)
    cap = (-mean / np.linalg.norm(mean), cap_radius)
    rows, reach = [], {}
    for T in T_values:
        per_kind = {}
        for kind, ladder in (("constant", const_ladder), ("polynomial", eta_ladder)):
            ns, tvs = [], []
            for p in ladder:
                sched = (make_schedule("constant", T, n_steps=p) if kind == "constant"
                         else make_schedule("polynomial", T, eta=p))
                tv, se, _ = stratified_tv(field, bridge, sched, n_samples, seed, cap=cap, workers=workers)
                rows.append((T, kind, sched.N, float(p), tv, se))
                ns.append(sched.N)
                tvs.append(tv)
            per_kind[kind] = n_to_reach(ns, tvs, tv_star)
        reach[T] = (per_kind["constant"][0], per_kind["polynomial"][0],
                    per_kind["constant"][1] or per_kind["polynomial"][1])
    Ts = sorted(reach)
    x = [1.0 / (1.0 - T) for T in Ts]
    y = [reach[T][0] / reach[T][1] for T in Ts]
    slope, _, r2 = loglog_fit(x, y)
    return ScheduleComparison(rows, reach, tv_star, slope, r2)


# --- SPD(2) pipeline ------------------------------------------------------------------------------

def spd_field(n=2, dof=2000.0, n_bank=4000, seed=0, beta=None):
    target = WishartTarget(n, dof)
    prior = RiemannianGaussianPrior(n, beta=beta)
    return SpdImportanceField(target, prior, n_bank=n_bank, seed=seed)


@dataclass
class GradientScaling:
    t: np.ndarray
    mean_norm: np.ndarray
    std_err: np.ndarray
    slope: float
    r2: float


def spd_gradient_scaling(field, t_values=(0.5, 0.6, 0.7, 0.8, 0.9), n_points=200, seed=0, fd_step=1e-4):
    """Mean Frobenius norm of the covariant jacobian of ``field`` at bridge points ``X_t``.

    ``X_t`` lies on the geodesic between fresh prior and target draws (not
    the importance bank).  The slope is fitted on ``log E|grad v|`` against
    ``log 1/(1-t)``.
    """
    m = field.manifold
    means, ses = [], []
    for k, t in enumerate(t_values):
        x0 = field.prior.sample(rngmod.stream(seed, rngmod.PRIOR, 7, k), n_points)
        x1 = field.target.sample(rngmod.stream(seed, rngmod.TARGET, 7, k), n_points)
        xt = m.geodesic(x0, x1, t)
        jac = covariant_jacobian_fd(m, field, t, xt, fd_step)
        norms = np.sqrt(np.sum(jac * jac, axis=(-2, -1)))
        means.append(norms.mean())
        ses.append(norms.std(ddof=1) / math.sqrt(n_points))
    t_arr = np.asarray(t_values, float)
    slope, _, r2 = loglog_fit(1.0 / (1.0 - t_arr), means)
    return GradientScaling(t_arr, np.asarray(means), np.asarray(ses), slope, r2)


# --- regularity bounds ---------------------------------------------------------------------------

def sphere_bound_reports(d, t_grid=None, n_points=50, seed=0, quantities=QUANTITIES):
    """All bound sweeps for the two-bump field on S^d over a ``t_grid x n_points`` grid."""
    if t_grid is None:
        t_grid = np.linspace(0.05, 0.95, 10)
    bridge, field = two_bump_field(d)
    points = field.manifold.random_point(rngmod.stream(seed, rngmod.PRIOR, 11), n_points)
    return [bound_sweep(field, q, t_grid, points) for q in quantities]


# --- invertibility guard -------------------------------------------------------------------------

def lipschitz_test_field(d=2, scale=2.0, seed=0):
    """``b(x) = P_x(A x)`` on S^d with ``|A|_2 = scale``.

    ``|b| <= |A|`` and ``|nabla b|_op <= |A| + |x^T A x| <= 2|A|``; these
    bounds feed the guard.
    """
    m = Sphere(d)
    A = rngmod.stream(seed, rngmod.TARGET, 13).standard_normal((d + 1, d + 1))
    A *= scale / np.linalg.norm(A, 2)

    def fn(t, x):
        return m.project_tangent(x, x @ A.T)

    return FunctionField(m, fn), scale, 2.0 * scale


@dataclass
class GuardCheck:
    h: float
    report: object
    min_singular: float
    n_checks: int


def guard_invertibility_check(d=2, n_checks=1000, seed=0, fd_step=1e-6):
    """Smallest singular value of the Euler step map at the guard's largest step.

    The step map ``F(x) = Exp_x(h b(x))`` is differentiated by central
    differences along an orthonormal frame and expressed in a frame at ``F(x)``.
    """
    field, B, L = lipschitz_test_field(d, seed=seed)
    m = field.manifold
    report = step_guard(m.descriptor, B, L)
    h = report.h_max_allowed
    x = m.random_point(rngmod.stream(seed, rngmod.PRIOR, 13), n_checks)
    step = lambda y: m.exp(y, h * field(0.0, y))
    frame_x = m.frame(x)
    fx = step(x)
    frame_y = m.frame(fx)
    cols = []
    for i in range(m.dim):
        e = frame_x[:, i, :]
        diff = (step(m.exp(x, fd_step * e)) - step(m.exp(x, -fd_step * e))) / (2 * fd_step)
        cols.append(np.einsum("njk,nk->nj", frame_y, diff))
    jac = np.stack(cols, axis=-1)
    smin = np.linalg.svd(jac, compute_uv=False)[:, -1]
    return GuardCheck(h, report.with_step(h), float(smin.min()), n_checks)


# --- TV-derivative bound --------------------------------------------------------------------------------

def lemma_reports(d=2, eps=0.1, t_values=(0.25, 0.5, 0.75), mode="mean_square", n_mc=20000, seed=0):
    """TV-derivative diagnostic for the two-bump field against a perturbed copy."""
    bridge, field = two_bump_field(d)
    perturbed = perturb_field(field, eps, mode, seed=seed)
    return [lemma1_diagnostic(field, perturbed, bridge, t, n_mc=n_mc, seed=seed) for t in t_values]
