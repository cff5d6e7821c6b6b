"""TV / W1 estimators, rate regression and the TV-derivative diagnostic."""
from dataclasses import dataclass
import csv
import math

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial import cKDTree

from . import rng as rngmod
from .errors import DomainError, InvalidArgument
from .geometry import divergence_fd
from .quadrature import fibonacci_sphere, sphere_volume

N_BOOTSTRAP = 200


# --- cell partitions ---------------------------------------------------------------

class SphereCellPartition:
    """Voronoi cells on S^d with areas and exact-mass quadrature.

    On S^2 the centres are a spherical Fibonacci lattice and the cell
    geometry is resolved with a fine Fibonacci node set of equal-area
    points.  On higher spheres centres come from k-means on a seeded
    uniform cloud, which also serves as the (Monte Carlo) node set.
    """

    def __init__(self, d, n_cells, n_nodes=None, seed=0):
        if n_cells < 1:
            raise InvalidArgument("need at least one cell")
        self.d = int(d)
        self.volume = sphere_volume(self.d)
        if self.d == 2:
            self.centers = fibonacci_sphere(n_cells)
            n_nodes = n_nodes or max(400 * n_cells, 200_000)
            self.nodes = fibonacci_sphere(n_nodes)
        else:
            g = rngmod.stream(seed, rngmod.ORACLE, 1)
            n_nodes = n_nodes or max(2000 * n_cells, 400_000)
            cloud = g.standard_normal((n_nodes, self.d + 1))
            cloud /= np.linalg.norm(cloud, axis=1, keepdims=True)
            cent, _ = kmeans2(cloud[: 50 * n_cells], n_cells, iter=30, minit="++", seed=g)
            self.centers = cent / np.linalg.norm(cent, axis=1, keepdims=True)
            self.nodes = cloud
        self._tree = cKDTree(self.centers)
        self.node_cells = self.assign(self.nodes)
        self.node_weight = self.volume / len(self.nodes)
        counts = np.bincount(self.node_cells, minlength=self.n_cells)
        self.areas = counts * self.node_weight

    @property
    def n_cells(self):
        return len(self.centers)

    def assign(self, points):
        """Cell index of each point (nearest centre, which is the geodesic Voronoi cell)."""
        return self._tree.query(np.asarray(points), k=1)[1]

    def cell_mass(self, density):
        """Mass of ``density`` (callable on points) in every cell."""
        vals = density(self.nodes) * self.node_weight
        return np.bincount(self.node_cells, weights=vals, minlength=self.n_cells)


def _bootstrap_se(stat, n, rng, reps=N_BOOTSTRAP):
    vals = np.array([stat(rng.integers(0, n, n)) for _ in range(reps)])
    return float(vals.std(ddof=1))


def tv_binned(samples, exact_marginal, partition, seed=0, cell_mass=None):
    """Cell-algebra TV ``1/2 sum |empirical - exact|`` with a bootstrap std error.

    ``exact_marginal`` is a density callable (ignored if ``cell_mass`` is
    given).  This lower-bounds the true TV up to sampling noise.
    """
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise InvalidArgument("empty sample set")
    exact = partition.cell_mass(exact_marginal) if cell_mass is None else np.asarray(cell_mass)
    cells = partition.assign(samples)
    n = len(cells)

    def stat(idx):
        emp = np.bincount(cells[idx], minlength=partition.n_cells) / n
        return 0.5 * np.abs(emp - exact).sum()

    tv = stat(np.arange(n))
    se = _bootstrap_se(stat, n, rngmod.stream(seed, rngmod.BOOTSTRAP))
    return float(min(tv, 1.0)), max(se, 1e-300)


def binned_noise_floor(cell_mass, n):
    """Expected binned TV of ``n`` exact draws, ``sum sqrt(p (1 - p) / (2 pi n))`` (normal limit)."""
    p = np.asarray(cell_mass, dtype=float)
    return float(np.sum(np.sqrt(p * (1.0 - p) / (2.0 * math.pi * n))))


def tv_histograms(cells_a, cells_b, n_cells, seed=0):
    """TV between two empirical cell histograms, bootstrap std error."""
    cells_a, cells_b = np.asarray(cells_a), np.asarray(cells_b)
    na, nb = len(cells_a), len(cells_b)
    if na == 0 or nb == 0:
        raise InvalidArgument("empty sample set")
    g = rngmod.stream(seed, rngmod.BOOTSTRAP)

    def stat(ia, ib):
        pa = np.bincount(cells_a[ia], minlength=n_cells) / na
        pb = np.bincount(cells_b[ib], minlength=n_cells) / nb
        return 0.5 * np.abs(pa - pb).sum()

    tv = stat(np.arange(na), np.arange(nb))
    reps = [stat(g.integers(0, na, na), g.integers(0, nb, nb)) for _ in range(N_BOOTSTRAP)]
    return float(tv), float(np.std(reps, ddof=1))


def tv_pushforward(log_ratio):
    """TV from per-sample log density ratios ``log(p(Y) / q(Y))`` with ``Y ~ q``.

    ``TV(p, q) = 1/2 E_q |1 - p/q|``; the estimate is unbiased and its
    standard error is relative, so small TV values are resolved without a
    binning noise floor.  For Euler output ``Y = F(X0)`` the ratio is
    ``p_T(Y) |det dF(X0)| / p0(X0)``.
    """
    lr = np.asarray(log_ratio, dtype=float)
    if lr.size == 0:
        raise InvalidArgument("empty sample set")
    dev = np.abs(1.0 - np.exp(lr))
    tv = 0.5 * dev.mean()
    se = 0.5 * dev.std(ddof=1) / math.sqrt(len(dev)) if len(dev) > 1 else math.inf
    return float(tv), float(max(se, 1e-300))


def w1_from_tv(tv_hat, diam):
    """Upper bound ``diam * TV`` on W1; only for compact manifolds."""
    if not math.isfinite(diam):
        raise DomainError("W1 bound needs a finite diameter")
    if tv_hat < 0:
        raise InvalidArgument("tv must be nonnegative")
    return diam * tv_hat


def w1_lower_bound_sliced(a, b, n_slices=64, seed=0, wa=None, wb=None):
    """Lower bound on W1 on S^d from 1-Lipschitz test functions.

    For random centres ``c`` the functions ``x -> d(x, c)`` are 1-Lipschitz,
    so ``|E_a d(., c) - E_b d(., c)| <= W1(a, b)``; the maximum over slices
    is returned.  Optional weights make ``a`` / ``b`` weighted point sets.
    """
    a, b = np.asarray(a), np.asarray(b)
    g = rngmod.stream(seed, rngmod.ORACLE, 2)
    c = g.standard_normal((n_slices, a.shape[-1]))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    da = np.arccos(np.clip(a @ c.T, -1, 1))
    db = np.arccos(np.clip(b @ c.T, -1, 1))
    ma = np.average(da, axis=0, weights=wa)
    mb = np.average(db, axis=0, weights=wb)
    return float(np.max(np.abs(ma - mb)))


def energy_distance(a, b, dist, max_points=2000, seed=0):
    """Energy distance ``2E d(A,B) - E d(A,A') - E d(B,B')`` under a distance ``dist``."""
    g = rngmod.stream(seed, rngmod.ORACLE, 3)
    a = a[g.permutation(len(a))[:max_points]]
    b = b[g.permutation(len(b))[:max_points]]
    ab = dist(a[:, None], b[None]).mean()
    aa = dist(a[:, None], a[None]).mean()
    bb = dist(b[:, None], b[None]).mean()
    return float(2 * ab - aa - bb)


def spd2_coordinates(x):
    """``(log l1, log l2, angle)`` of 2x2 SPD matrices, ``l1 >= l2``, angle in ``[0, pi)``."""
    lam, U = np.linalg.eigh(np.asarray(x))
    ang = np.mod(np.arctan2(U[..., 1, 1], U[..., 0, 1]), math.pi)
    return np.stack([np.log(lam[..., 1]), np.log(lam[..., 0]), ang], axis=-1)


def spd2_cells(x, edges_l1, edges_l2, n_angle):
    """Cell index of 2x2 SPD matrices on a (log-eigenvalue, angle) grid."""
    c = spd2_coordinates(x)
    i = np.clip(np.searchsorted(edges_l1, c[..., 0]) - 1, 0, len(edges_l1) - 2)
    j = np.clip(np.searchsorted(edges_l2, c[..., 1]) - 1, 0, len(edges_l2) - 2)
    k = np.minimum((c[..., 2] / math.pi * n_angle).astype(int), n_angle - 1)
    return (i * (len(edges_l2) - 1) + j) * n_angle + k


# --- rate tables -------------------------------------------------------------------------

RATE_HEADER = ["N", "h", "eta", "eps", "T", "d", "tv_hat", "std_err", "n_samples", "seed"]


@dataclass
class RateRow:
    N: int
    h: float
    eta: float
    eps: float
    T: float
    d: int
    tv_hat: float
    std_err: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.tv_hat <= 1.0:
            raise InvalidArgument(f"tv_hat {self.tv_hat} outside [0, 1]")
        if not self.std_err > 0:
            raise InvalidArgument("std_err must be positive")


def write_rate_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RATE_HEADER)
        for r in rows:
            w.writerow([r.N, repr(r.h), repr(r.eta), repr(r.eps), repr(r.T), r.d,
                        repr(r.tv_hat), repr(r.std_err), r.n_samples, r.seed])


def read_rate_table(path):
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != RATE_HEADER:
            raise InvalidArgument("unexpected rate-table header")
        return [RateRow(int(r["N"]), float(r["h"]), float(r["eta"]), float(r["eps"]), float(r["T"]),
                        int(r["d"]), float(r["tv_hat"]), float(r["std_err"]), int(r["n_samples"]),
                        int(r["seed"])) for r in rd]


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    slope_ci: tuple
    n_used: int


def loglog_fit(x, y):
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if np.ptp(lx) == 0:
        raise InvalidArgument("degenerate regressor")
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def rate_regress(rows, axis, seed=0, min_rows=4):
    """Least squares of ``log tv`` on ``log h`` or ``log eps``.

    Rows whose ``tv_hat`` is not above ``3 std_err`` are dropped.  The
    slope CI is the 2.5-97.5% range over parametric bootstrap replicates
    ``tv ~ N(tv_hat, std_err)``.
    """
    if axis not in ("h", "eps"):
        raise InvalidArgument("axis must be 'h' or 'eps'")
    use = [r for r in rows if r.tv_hat > 3.0 * r.std_err]
    if len(use) < min_rows:
        raise InvalidArgument(f"need >= {min_rows} rows above the noise floor, have {len(use)}")
    x = np.array([getattr(r, axis) for r in use])
    y = np.array([r.tv_hat for r in use])
    se = np.array([r.std_err for r in use])
    slope, intercept, r2 = loglog_fit(x, y)
    g = rngmod.stream(seed, rngmod.BOOTSTRAP, 7)
    boots = []
    for _ in range(N_BOOTSTRAP):
        yb = y + se * g.standard_normal(len(y))
        if np.all(yb > 0):
            boots.append(loglog_fit(x, yb)[0])
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5))) if boots else (slope, slope)
    return RateFit(slope, intercept, r2, ci, len(use))


# --- TV-derivative diagnostic ---------------------------------------------------------------

@dataclass(frozen=True)
class Lemma1Report:
    t: float
    lhs_fd: float
    lhs_se: float
    rhs_bound: float
    rhs_se: float
    div_term: float
    score_term: float
    cauchy_schwarz: float

    @property
    def holds(self):
        return self.lhs_fd <= self.rhs_bound + 3.0 * math.hypot(self.lhs_se, self.rhs_se)


def lemma1_diagnostic(v, vtilde, bridge, t, n_mc=20000, delta=0.01, substeps=8, seed=0, fd_step=1e-4):
    """Compare the time derivative of ``TV(flow_v, flow_vtilde)`` with its bound.

    Both flows start at time ``t`` from the exact marginal ``p_t``.  The
    ``v``-flow preserves the marginals, so the left side is the derivative
    of ``TV(p_{t+s}, law of the vtilde-flow)`` at ``s = 0``; it is estimated
    with the push-forward estimator at ``s = delta/2`` and ``delta`` and
    Richardson-extrapolated.  The right side is the Monte Carlo estimate of
    ``E|Div(vtilde - v)| + E[|grad log p_t| |vtilde - v|]``.

    ``vtilde`` must provide an ambient jacobian (closed form) on the sphere.
    """
    from .sampler import euler_sample

    target = bridge.target
    sph = bridge.sphere
    g = rngmod.stream(seed, rngmod.ORACLE, 4)
    # exact X_t samples from the bridge
    x0 = sph.random_point(g, n_mc)
    x1 = target.sample(g, n_mc)
    keep = sph.dist(x0, x1) < math.pi - 1e-3
    xt = sph.geodesic(x0[keep], x1[keep], t)
    lp_t = np.log(bridge.marginal_density(t, xt))

    def log_ratio(s):
        seg = _Segment(tuple(float(u) for u in np.linspace(t, t + s, substeps + 1)))
        tr = euler_sample(vtilde, seg, xt, track_logdet=True, keep_path=False)
        return np.log(bridge.marginal_density(t + s, tr.terminal)) + tr.logdet - lp_t

    lr_full = log_ratio(delta)
    lr_half = log_ratio(delta / 2)
    dev_full = np.abs(1.0 - np.exp(lr_full))
    dev_half = np.abs(1.0 - np.exp(lr_half))
    est = 0.5 * (2.0 * dev_half / (delta / 2) - dev_full / delta)
    lhs, lhs_se = float(est.mean()), float(est.std(ddof=1) / math.sqrt(len(est)))

    diff = _DiffField(vtilde, v)
    div = np.abs(divergence_fd(sph, diff, t, xt, fd_step))
    dv = diff(t, xt)
    ndv = np.linalg.norm(dv, axis=-1)
    sc = np.linalg.norm(bridge.score(t, xt), axis=-1)
    term = div + sc * ndv
    rhs, rhs_se = float(term.mean()), float(term.std(ddof=1) / math.sqrt(len(term)))
    cs = math.sqrt(np.mean(sc ** 2) * np.mean(ndv ** 2))
    return Lemma1Report(t, lhs, lhs_se, rhs, rhs_se, float(div.mean()), float((sc * ndv).mean()), cs)


class _DiffField:
    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, t, x):
        return self.a(t, x) - self.b(t, x)


class _Segment:
    """Schedule stand-in for a grid that need not start at 0."""

    def __init__(self, times):
        self.times = times
        self.steps = np.diff(np.asarray(times))
        self.N = len(times) - 1
        self.T = times[-1]
