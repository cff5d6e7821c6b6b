"""Brute-force numerical oracles: Jacobi/transport integrators, FD determinants,
rejection histograms and bound sweeps."""
from dataclasses import dataclass
import csv
import math

import numpy as np

from .bridge.sphere import sphere_constants
from .errors import InvalidArgument, NumericFailure
from .geometry import SPD, Sphere, covariant_jacobian_fd, divergence_fd
from .quadrature import cap_fraction


# --- ODE integrators ------------------------------------------------------------

def _midpoint(rhs, y0, t_end, steps):
    y = np.array(y0, dtype=float)
    h = np.asarray(t_end, dtype=float) / steps
    for i in range(steps):
        t = i * h
        y = y + h * rhs(t + h / 2, y + h / 2 * rhs(t, y))
    return y


def numeric_jacobi_coefficient(c, t_end, j0, dj0, steps=4096):
    """Signed solution of ``f'' + c f = 0``, ``f(0) = j0``, ``f'(0) = dj0``, by explicit midpoint.

    All arguments except ``steps`` broadcast, so many cases integrate at once.
    """
    if steps < 16:
        raise InvalidArgument("need at least 16 steps")
    c, t_end, j0, dj0 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (c, t_end, j0, dj0)))
    y = _midpoint(lambda t, y: np.stack([y[1], -c * y[0]]), np.stack([j0, dj0]), t_end, steps)
    return y[0] if y[0].ndim else float(y[0])


def numeric_jacobi(c, t_end, j0, dj0, steps=4096):
    """Norm of a normal Jacobi field in constant curvature ``c``, integrated numerically."""
    return np.abs(numeric_jacobi_coefficient(c, t_end, j0, dj0, steps))


# --- parallel transport ----------------------------------------------------------------

def geodesic_path(m, x, y, segments=256):
    """``segments + 1`` points along the geodesic from ``x`` to ``y``."""
    s = np.linspace(0.0, 1.0, segments + 1)
    v = m.log(x, y)
    return np.stack([m.exp(x, si * v) for si in s])


def _pole_rung(m, a, b, w):
    mid = m.exp(a, 0.5 * m.log(a, b))
    p = m.exp(a, w)
    p_ref = m.exp(mid, -m.log(mid, p))
    return -m.log(b, p_ref)


def _transport_rhs(m, path_fn, dpath_fn):
    if isinstance(m, Sphere):
        def rhs(s, v):
            g, dg = path_fn(s), dpath_fn(s)
            return -np.dot(v, dg) * g
    elif isinstance(m, SPD):
        def rhs(s, v):
            g, dg = path_fn(s), dpath_fn(s)
            gi = np.linalg.inv(g)
            return 0.5 * (dg @ gi @ v + v @ gi @ dg)
    else:
        def rhs(s, v):
            return np.zeros_like(v)
    return rhs


def numeric_transport(m, path, v, method="pole", scale=1e-2):
    """Transport ``v`` from ``path[0]`` to ``path[-1]`` along a discretised geodesic.

    ``pole``: one pole-ladder rung per segment (geodesic reflection through
    the segment midpoint, using only ``exp`` / ``log``); the vector is
    scaled to norm ``scale`` while it travels.

    ``ode``: midpoint integration of the transport equation
    (``V' = -<V, g'> g`` on the sphere, ``V' = (g' g^-1 V + V g^-1 g')/2`` on
    SPD) along the geodesic through ``path[0]`` and ``path[-1]``, one
    step per segment, Richardson-extrapolated against half the steps.
    """
    path = np.asarray(path, dtype=float)
    v = np.asarray(v, dtype=float)
    segments = len(path) - 1
    if segments < 1:
        raise InvalidArgument("path needs at least two points")
    if m.dist(path[0], path[-1]) == 0.0 and np.allclose(path, path[0]):
        return v.copy()
    if method == "pole":
        n0 = float(m.norm(path[0], v))
        if n0 == 0.0:
            return v.copy()
        w = v * (scale / n0)
        for a, b in zip(path[:-1], path[1:]):
            if not m.dist(a, b) > 0:
                raise NumericFailure("degenerate path segment")
            w = _pole_rung(m, a, b, w)
        return w * (n0 / scale)
    if method == "ode":
        x0, x1 = path[0], path[-1]
        u = m.log(x0, x1)
        if isinstance(m, SPD):
            from .geometry import sym_expm, sym_invsqrtm, sym_sqrtm
            r, ri = sym_sqrtm(x0), sym_invsqrtm(x0)
            lu = ri @ u @ ri
            path_fn = lambda s: r @ sym_expm(s * lu) @ r
            dpath_fn = lambda s: r @ (lu @ sym_expm(s * lu)) @ r
        else:
            path_fn = lambda s: m.exp(x0, s * u)
            dpath_fn = lambda s: m.transport(x0, m.exp(x0, s * u), u)
        rhs = _transport_rhs(m, path_fn, dpath_fn)
        full = _midpoint(rhs, v, 1.0, segments)
        half = _midpoint(rhs, v, 1.0, max(segments // 2, 1))
        return (4.0 * full - half) / 3.0
    raise InvalidArgument(f"unknown transport method {method!r}")


# --- determinant of dExp --------------------------------------------------------------------

def _dexp_matrix(m, x1, v, s):
    frame = m.frame(x1)
    y = m.exp(x1, v)
    cols = []
    for e in frame:
        dy = (m.log(y, m.exp(x1, v + s * e)) - m.log(y, m.exp(x1, v - s * e))) / (2 * s)
        back = m.transport(y, x1, dy)
        cols.append([m.inner(x1, back, f) for f in frame])
    return np.array(cols).T


def numeric_dexp_det(m, x1, v, fd_step=1e-4):
    """``det`` of the pulled-back differential of ``Exp_{x1}`` at ``v`` in an orthonormal frame.

    Central differences at ``fd_step`` and ``fd_step / 2`` are
    Richardson-combined entrywise before taking the determinant.
    """
    if not 1e-6 <= fd_step <= 1e-3:
        raise InvalidArgument("fd_step must lie in [1e-6, 1e-3]")
    x1, v = np.asarray(x1, dtype=float), np.asarray(v, dtype=float)
    a = _dexp_matrix(m, x1, v, fd_step)
    b = _dexp_matrix(m, x1, v, fd_step / 2)
    return float(abs(np.linalg.det((4.0 * b - a) / 3.0)))


# --- rejection histograms ------------------------------------------------------------------------

@dataclass(frozen=True)
class RejectionHistogram:
    probs: np.ndarray
    std_err: np.ndarray
    counts: np.ndarray
    n_accepted: int
    acceptance_rate: float


def bridge_rejection_histogram(target, prior, t, center, radius, partition, n, rng, batch=200_000):
    """Empirical law of ``X1`` given ``X_t`` in the geodesic ball ``B(center, radius)``.

    Pairs ``(X0, X1)`` are simulated independently, ``X_t`` is the
    geodesic interpolant, and accepted ``X1`` values are histogrammed over
    ``partition`` cells.  Pairs at (numerical) cut-locus distance are
    discarded.
    """
    m = prior.manifold
    counts = np.zeros(partition.n_cells)
    done = 0
    while done < n:
        k = min(batch, n - done)
        x0 = prior.sample(rng, k)
        x1 = target.sample(rng, k)
        ok = m.dist(x0, x1) < math.pi - 1e-9
        xt = m.geodesic(x0[ok], x1[ok], t)
        hit = m.dist(xt, center) < radius
        counts += np.bincount(partition.assign(x1[ok][hit]), minlength=partition.n_cells)
        done += k
    acc = counts.sum()
    rate = acc / n
    if rate < 1e-5:
        raise NumericFailure(f"acceptance rate {rate:.3g} below 1e-5; cell too small", residual=rate)
    p = counts / acc
    return RejectionHistogram(p, np.sqrt(p * (1 - p) / acc), counts, int(acc), float(rate))


def ball_conditional_cells(bridge, t, center, radius, partition, rng, n_ball=4000):
    """Law of ``X1`` over ``partition`` cells given ``X_t`` in ``B(center, radius)``.

    Integrates ``p_t(x) p_t(x1 | x)`` over the ball by Monte Carlo in
    ``x`` (uniform in the ball) and over cells with the partition's node
    rule in ``x1``.  Returns ``(probs, std_err)``; the error is the
    ratio-estimator Monte Carlo error of the ``x`` integral.
    """
    m = bridge.sphere
    batch = int(2 * n_ball / max(cap_fraction(m.d, radius), 1e-6))
    pts = []
    while sum(len(p) for p in pts) < n_ball:
        x = m.random_point(rng, batch)
        pts.append(x[m.dist(x, center) < radius])
    x = np.concatenate(pts)[:n_ball]
    px = bridge.marginal_density(t, x)
    nodes = partition.nodes
    cells = np.empty((n_ball, partition.n_cells))
    for i, xi in enumerate(x):
        cond = bridge.conditional_density(t, xi[None], nodes)
        cells[i] = np.bincount(partition.node_cells, weights=cond, minlength=partition.n_cells)
    cells /= cells.sum(axis=1, keepdims=True)
    probs = px @ cells / px.sum()
    resid = px[:, None] * (cells - probs)
    return probs, np.sqrt(np.sum(resid * resid, axis=0)) / px.sum()


# --- bound sweeps ------------------------------------------------------------------------------------

QUANTITIES = ("grad_v_op", "dt_v", "grad_div_v", "dt_div_v", "score_sq", "v_norm")
BOUND_HEADER = ["quantity", "t", "node_id", "estimate", "constant", "ratio"]


@dataclass
class BoundReport:
    quantity: str
    rows: list
    flagged: list

    @property
    def max_ratio(self):
        r = [row[5] for row in self.rows if math.isfinite(row[5])]
        return max(r) if r else math.nan


def _divergence(field, t, x, step):
    if field.has_jacobian:
        J = field.ambient_jacobian(t, x)
        return np.trace(J, axis1=-2, axis2=-1) - np.einsum("...i,...ij,...j->...", x, J, x)
    return divergence_fd(field.manifold, field, t, x, step)


def _grad_scalar_fd(m, fn, x, step):
    frame = m.frame(x)
    comps = []
    for i in range(frame.shape[-2]):
        e = frame[..., i, :]
        comps.append((fn(m.exp(x, step * e)) - fn(m.exp(x, -step * e))) / (2 * step))
    return np.stack(comps, axis=-1)


def _estimate(field, bridge, quantity, t, x, step):
    m = field.manifold
    if quantity == "v_norm":
        return np.linalg.norm(field(t, x), axis=-1)
    if quantity == "grad_v_op":
        return np.linalg.norm(covariant_jacobian_fd(m, field, t, x, step), ord=2, axis=(-2, -1))
    if quantity == "dt_v":
        return np.linalg.norm((field(t + step, x) - field(t - step, x)) / (2 * step), axis=-1) \
            if t >= step else np.linalg.norm((field(t + step, x) - field(t, x)) / step, axis=-1)
    if quantity == "grad_div_v":
        g = _grad_scalar_fd(m, lambda y: _divergence(field, t, y, step), x, 1e-3)
        return np.linalg.norm(g, axis=-1)
    if quantity == "dt_div_v":
        lo = t - step if t >= step else t
        hi = t + step
        return np.abs(_divergence(field, hi, x, step) - _divergence(field, lo, x, step)) / (hi - lo)
    if quantity == "score_sq":
        return np.sum(bridge.score(t, x) ** 2, axis=-1)
    raise InvalidArgument(f"unknown quantity {quantity!r}")


def _constant(consts, quantity):
    return {"grad_v_op": consts.L_v_x, "dt_v": consts.L_v_t, "grad_div_v": consts.L_div_x,
            "dt_div_v": consts.L_div_t, "score_sq": consts.L_score, "v_norm": consts.L_v}[quantity]


def bound_sweep(field, quantity, t_grid, points, fd_step=1e-5):
    """FD estimates of a regularity quantity on a (t x points) grid against its constant.

    ``field`` is a sphere population field whose target has known
    ``(m1, M1)``.  Nodes where the estimate fails or is non-finite are
    flagged and skipped.
    """
    if quantity not in QUANTITIES:
        raise InvalidArgument(f"unknown quantity {quantity!r}")
    bridge = field.bridge
    target = bridge.target
    if not hasattr(target, "M1"):
        raise InvalidArgument("bound sweep needs a target with known density bounds")
    rows, flagged = [], []
    for t in t_grid:
        const = _constant(sphere_constants(target, target.d, float(t)), quantity)
        try:
            est = _estimate(field, bridge, quantity, float(t), points, fd_step)
        except NumericFailure:
            est = np.full(len(points), np.nan)
        for i, e in enumerate(est):
            if not math.isfinite(e):
                flagged.append((float(t), i))
                continue
            rows.append((quantity, float(t), i, float(e), float(const), float(e / const)))
    return BoundReport(quantity, rows, flagged)


def write_bound_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUND_HEADER)
        for rep in reports:
            for row in rep.rows:
                w.writerow([row[0], repr(row[1]), row[2], repr(row[3]), repr(row[4]), repr(row[5])])
