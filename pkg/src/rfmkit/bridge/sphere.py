"""Geodesic-bridge densities, population velocity and score on S^d.

The prior is uniform.  Two independent routes are provided:

* ``SphereBridge`` works for any target density by quadrature in polar
  coordinates around the query point.  With ``r = (1 - t) u`` the bridge
  Jacobian cancels against the volume element:
  ``J_t(r) sin^{d-1}(r) dr = sin^{d-1}(u) du``.
* ``HarmonicSphereBridge`` handles targets of the form
  ``p1(x) = (1 + b.x + x^T A x) / Vol`` with ``tr A = 0``.  Averaging over
  the geodesic sphere of radius ``r`` maps degree-1 and degree-2 harmonics
  to multiples of themselves, so every quantity reduces to four radial
  expectations.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy.special import ive
from scipy.stats import vonmises_fisher

from ..errors import DomainError, InvalidArgument, NumericFailure
from ..geometry import Sphere
from ..quadrature import polar_nodes, radial_expectation, sphere_rule, sphere_volume
from .fields import VelocityField, check_time


def sphere_jacobian_Jt(d, t, r):
    """Volume Jacobian of the bridge contraction at geodesic distance ``r``.

    ``J_t(r) = (1/(1-t)) (sin(r/(1-t)) / sin r)^{d-1}`` for ``r < (1-t) pi``
    and 0 beyond.
    """
    if t >= 1.0:
        raise DomainError("J_t needs t < 1")
    if t < 0.0:
        raise InvalidArgument("t must be nonnegative")
    r = np.asarray(r, dtype=float)
    s = 1.0 - t
    inside = r < s * math.pi
    rr = np.where(inside, r, 0.0)
    # np.sinc(z) = sin(pi z)/(pi z): finite at r = 0, no 0/0 branch needed
    ratio = np.sinc(rr / (s * math.pi)) / (s * np.sinc(rr / math.pi))
    return np.where(inside, ratio ** (d - 1) / s, 0.0)


def sphere_dlogJ_dr(d, t, r):
    """Radial derivative ``(d-1)(cot(r/(1-t))/(1-t) - cot r)`` of ``log J_t``."""
    s = 1.0 - t
    r = np.asarray(r, dtype=float)
    return (d - 1) * (1.0 / (s * np.tan(r / s)) - 1.0 / np.tan(r))


# --- targets -----------------------------------------------------------------

class SphereTarget:
    """Target law on S^d with known density bounds ``m1 <= p1 <= M1``."""

    name = "target"

    def __init__(self, d):
        self.d = int(d)
        self.sphere = Sphere(self.d)
        self.volume = sphere_volume(self.d)

    def density(self, x):
        raise NotImplementedError

    def sample(self, rng, n):
        raise NotImplementedError

    @property
    def ratio(self):
        return self.M1 / self.m1

    def describe(self):
        return {"target": self.name, "m1": self.m1, "M1": self.M1}

    def _rejection(self, rng, n):
        out = np.empty((0, self.d + 1))
        while len(out) < n:
            k = max(2 * (n - len(out)), 1024)
            x = self.sphere.random_point(rng, k)
            keep = rng.random(k) * self.M1 < self.density(x)
            out = np.concatenate([out, x[keep]])
        return out[:n]


class UniformTarget(SphereTarget):
    name = "uniform"

    def __init__(self, d):
        super().__init__(d)
        self.m1 = self.M1 = 1.0 / self.volume

    def density(self, x):
        return np.full(np.shape(x)[:-1], 1.0 / self.volume)

    def sample(self, rng, n):
        return self.sphere.random_point(rng, n)


class HarmonicTarget(SphereTarget):
    """``p1(x) = (1 + b.x + x^T A x) / Vol(S^d)`` with symmetric traceless ``A``.

    The density integrates to one exactly because the degree-1 and
    degree-2 terms are spherical harmonics.
    """

    name = "harmonic"

    def __init__(self, d, A, b=None):
        super().__init__(d)
        D = self.d + 1
        A = np.asarray(A, dtype=float)
        b = np.zeros(D) if b is None else np.asarray(b, dtype=float)
        if A.shape != (D, D) or b.shape != (D,):
            raise InvalidArgument(f"A must be {D}x{D} and b of length {D}")
        if np.max(np.abs(A - A.T)) > 1e-12 or abs(np.trace(A)) > 1e-12:
            raise InvalidArgument("A must be symmetric and traceless")
        self.A = A
        self.b = b
        lam = np.linalg.eigvalsh(A)
        if np.any(b):
            lo = 1.0 - np.linalg.norm(b) + lam[0]
            hi = 1.0 + np.linalg.norm(b) + lam[-1]
        else:
            lo, hi = 1.0 + lam[0], 1.0 + lam[-1]
        if lo <= 0:
            raise InvalidArgument("density is not bounded away from zero")
        self.m1, self.M1 = float(lo / self.volume), float(hi / self.volume)

    @classmethod
    def two_bump(cls, d, strength=1.0):
        """Bumps at +-e_0 with ``(m1, M1) = (1 - s/2, 1 + s) / Vol``."""
        if d < 2:
            raise InvalidArgument("two-bump preset needs d >= 2")
        diag = np.zeros(d + 1)
        diag[:3] = [strength, -strength / 2, -strength / 2]
        return cls(d, np.diag(diag))

    def density(self, x):
        x = np.asarray(x, dtype=float)
        q = np.einsum("...i,ij,...j->...", x, self.A, x)
        return (1.0 + x @ self.b + q) / self.volume

    def sample(self, rng, n):
        return self._rejection(rng, n)

    def describe(self):
        out = super().describe()
        out["A_diag"] = " ".join(repr(float(a)) for a in np.diag(self.A))
        return out


class VMFTarget(SphereTarget):
    """von Mises-Fisher density ``C exp(kappa mu.x)``."""

    name = "vmf"

    def __init__(self, d, mu, kappa):
        super().__init__(d)
        mu = np.asarray(mu, dtype=float)
        self.mu = mu / np.linalg.norm(mu)
        self.kappa = float(kappa)
        if not self.kappa > 0:
            raise InvalidArgument("kappa must be positive")
        nu = (d + 1) / 2.0 - 1.0
        # log of the normaliser, written with the scaled Bessel function ive
        self.log_c = (nu * math.log(self.kappa) - (nu + 1) * math.log(2 * math.pi)
                      - math.log(ive(nu, self.kappa)) - self.kappa)
        self.m1 = math.exp(self.log_c - self.kappa)
        self.M1 = math.exp(self.log_c + self.kappa)

    def density(self, x):
        return np.exp(self.log_c + self.kappa * (np.asarray(x) @ self.mu))

    def sample(self, rng, n):
        return np.atleast_2d(vonmises_fisher(self.mu, self.kappa).rvs(n, random_state=rng))

    def describe(self):
        out = super().describe()
        out["kappa"] = self.kappa
        return out


class UniformSpherePrior:
    """The uniform prior ``1 / Vol(S^d)``."""

    kind = "sphere_uniform"

    def __init__(self, d):
        self.d = int(d)
        self.manifold = Sphere(self.d)
        self.volume = sphere_volume(self.d)

    def density(self, x):
        return np.full(np.shape(x)[:-1], 1.0 / self.volume)

    def log_density(self, x):
        return np.log(self.density(x))

    def sample(self, rng, size):
        return self.manifold.random_point(rng, size)

    def describe(self):
        return {"prior": self.kind}


def make_sphere_target(name, d, **params):
    if name == "uniform":
        return UniformTarget(d)
    if name in ("two_bump", "bump_mixture"):
        return HarmonicTarget.two_bump(d, params.get("strength", 1.0))
    if name == "vmf":
        mu = np.zeros(d + 1)
        mu[0] = 1.0
        return VMFTarget(d, mu, params.get("kappa", 4.0))
    raise InvalidArgument(f"unknown sphere target {name!r}")


# --- bridge by quadrature ------------------------------------------------------

_NODE_BUDGET = 4_000_000


class SphereBridge:
    """Densities, velocity and score for any target, by polar quadrature.

    Node counts start at ``(n_radial, n_angular)`` and double until every
    returned quantity changes by less than ``tol`` (relative to its scale);
    ``max_doublings`` failures raise ``NumericFailure``.  With
    ``max_doublings=0`` the initial rule is used as is, which keeps the
    result a smooth function of ``x`` (needed under finite differences).
    """

    def __init__(self, target, n_radial=24, n_angular=6, tol=1e-4, max_doublings=3, chunk=4096):
        self.target = target
        self.d = target.d
        self.sphere = target.sphere
        self.volume = target.volume
        self.n_radial = n_radial
        self.n_angular = n_angular
        self.tol = tol
        self.max_doublings = max_doublings
        self.chunk = chunk

    def _moments(self, t, x, nr, na):
        """Normaliser ``Z = int p1 J_t``, ``E[u w]`` and ``E[-dlogJ w]`` given X_t = x."""
        y, u, om, w = polar_nodes(self.sphere, x, t, nr, na)
        pw = self.target.density(y) * w
        z = pw.sum(axis=-1)
        vel = np.einsum("...k,k,...kD->...D", pw, u, om) / z[..., None]
        g = -sphere_dlogJ_dr(self.d, t, (1.0 - t) * u) if self.d > 1 else np.zeros_like(u)
        score = np.einsum("...k,k,...kD->...D", pw, g, om) / z[..., None]
        return z, vel, score

    def _rows(self, nr, na):
        # points per call, so that the node array stays near a few million floats
        nodes = nr * len(sphere_rule(self.d - 1, na)[1]) if self.d > 1 else 2 * nr
        return max(1, min(self.chunk, _NODE_BUDGET // (nodes * (self.d + 1))))

    def _moments_chunked(self, t, x, nr, na):
        step = self._rows(nr, na)
        parts = [self._moments(t, x[i:i + step], nr, na) for i in range(0, len(x), step)]
        return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))

    def _converged(self, t, x):
        """Refine each point separately until its own moments settle."""
        nr, na = self.n_radial, self.n_angular
        prev = self._moments_chunked(t, x, nr, na)
        if self.max_doublings == 0:
            return prev
        out = tuple(np.empty_like(p) for p in prev)
        active = np.arange(len(x))
        err = np.zeros(0)
        for _ in range(self.max_doublings):
            nr, na = 2 * nr, 2 * na
            cur = self._moments_chunked(t, x[active], nr, na)
            err = np.abs(cur[0] - prev[0]) / np.abs(cur[0])
            for k in (1, 2):
                scale = np.maximum(1.0, np.max(np.abs(cur[k]), axis=-1))
                err = np.maximum(err, np.max(np.abs(cur[k] - prev[k]), axis=-1) / scale)
            done = err < self.tol
            for o, c in zip(out, cur):
                o[active[done]] = c[done]
            active = active[~done]
            if len(active) == 0:
                return out
            prev = tuple(c[~done] for c in cur)
            err = err[~done]
        raise NumericFailure("polar quadrature did not converge", residual=float(np.max(err)))

    def _batched(self, t, x):
        if t >= 1.0:
            raise DomainError("bridge quantities need t < 1")
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        z, v, s = self._converged(t, flat)
        z = z.reshape(x.shape[:-1])
        v, s = v.reshape(x.shape), s.reshape(x.shape)
        return z, self.sphere.project_tangent(x, v), self.sphere.project_tangent(x, s)

    def marginal_density(self, t, x):
        return self._batched(t, x)[0] / self.volume

    def normalizer(self, t, x):
        """``int p1(z) J_t(x | z) dV(z)``, the denominator of the conditional."""
        return self._batched(t, x)[0]

    def conditional_density(self, t, x, x1):
        r = self.sphere.dist(x, x1)
        return self.target.density(x1) * sphere_jacobian_Jt(self.d, t, r) / self.normalizer(t, x)

    def velocity(self, t, x):
        return self._batched(t, x)[1]

    def score(self, t, x):
        return self._batched(t, x)[2]


# --- closed forms for harmonic targets -------------------------------------------

def harmonic_coefficients(d, t, n=256):
    """Radial coefficients ``(c1, c2, a1, a2)`` at time ``t``.

    With ``U`` distributed as ``sin^{d-1}(u)`` on ``[0, pi]`` and
    ``R = (1 - t) U``::

        c1 = E[cos R]                     a1 = E[U sin R] / d
        c2 = E[cos^2 R - sin^2 R / d]     a2 = E[U sin R cos R] / d
    """
    s = 1.0 - t

    def fn(u):
        cr, sr = np.cos(s * u), np.sin(s * u)
        return np.stack([cr, cr * cr - sr * sr / d, u * sr / d, u * sr * cr / d])

    return tuple(float(c) for c in radial_expectation(d, fn, n))


class HarmonicSphereBridge:
    """Closed-form bridge quantities for a ``HarmonicTarget``."""

    def __init__(self, target):
        if not isinstance(target, HarmonicTarget):
            raise InvalidArgument("closed forms need a HarmonicTarget")
        self.target = target
        self.d = target.d
        self.sphere = target.sphere
        self.volume = target.volume

    def coefficients(self, t):
        if t >= 1.0:
            raise DomainError("bridge quantities need t < 1")
        return harmonic_coefficients(self.d, t)

    def _parts(self, t, x):
        c1, c2, a1, a2 = self.coefficients(t)
        x = np.asarray(x, dtype=float)
        Ax = x @ self.target.A
        z = 1.0 + c1 * (x @ self.target.b) + c2 * np.sum(x * Ax, axis=-1)
        return (c1, c2, a1, a2), x, Ax, z

    def marginal_density(self, t, x):
        return self._parts(t, x)[3] / self.volume

    def normalizer(self, t, x):
        return self._parts(t, x)[3]

    def conditional_density(self, t, x, x1):
        r = self.sphere.dist(x, x1)
        return self.target.density(x1) * sphere_jacobian_Jt(self.d, t, r) / self.normalizer(t, x)

    def velocity(self, t, x):
        (c1, c2, a1, a2), x, Ax, z = self._parts(t, x)
        g = a1 * self.target.b + 2.0 * a2 * Ax
        return self.sphere.project_tangent(x, g) / z[..., None]

    def score(self, t, x):
        (c1, c2, a1, a2), x, Ax, z = self._parts(t, x)
        g = c1 * self.target.b + 2.0 * c2 * Ax
        return self.sphere.project_tangent(x, g) / z[..., None]

    def velocity_jacobian(self, t, x):
        """Ambient derivative of ``x -> P_x g(x) / Z(x)`` (shape ``(..., D, D)``)."""
        (c1, c2, a1, a2), x, Ax, z = self._parts(t, x)
        A, b = self.target.A, self.target.b
        D = x.shape[-1]
        g = a1 * b + 2.0 * a2 * Ax
        xg = np.sum(x * g, axis=-1)
        pg = g - xg[..., None] * x
        eye = np.eye(D)
        proj = eye - x[..., :, None] * x[..., None, :]
        dpg = (proj @ (2.0 * a2 * A) - xg[..., None, None] * eye
               - x[..., :, None] * g[..., None, :])
        dz = c1 * b + 2.0 * c2 * Ax
        zz = z[..., None, None]
        return dpg / zz - pg[..., :, None] * dz[..., None, :] / zz ** 2


class AtomicTarget:
    """Finite weighted set of atoms on S^d (a concentrated, non-smooth target).

    Given ``X1 = a`` the bridge point ``X_t`` has the radial density
    ``J_t(d(x, a)) / Vol``, so every bridge quantity is a finite sum.
    """

    name = "atoms"

    def __init__(self, d, atoms, weights=None):
        self.d = int(d)
        self.sphere = Sphere(self.d)
        self.volume = sphere_volume(self.d)
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        if atoms.shape[1] != self.d + 1:
            raise InvalidArgument(f"atoms must have {self.d + 1} coordinates")
        self.atoms = atoms / np.linalg.norm(atoms, axis=1, keepdims=True)
        w = np.ones(len(atoms)) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (len(atoms),) or np.any(w <= 0):
            raise InvalidArgument("weights must be positive, one per atom")
        self.weights = w / w.sum()

    @classmethod
    def cluster(cls, d, n_atoms, kappa, seed=0):
        """``n_atoms`` equal-weight draws from a vMF(kappa) around ``e_0``."""
        from ..rng import TARGET, stream
        mu = np.zeros(d + 1)
        mu[0] = 1.0
        pts = vonmises_fisher(mu, kappa).rvs(n_atoms, random_state=stream(seed, TARGET, 99))
        return cls(d, np.atleast_2d(pts))

    def sample(self, rng, n):
        return self.atoms[rng.choice(len(self.atoms), size=n, p=self.weights)]

    def describe(self):
        return {"target": self.name, "n_atoms": len(self.atoms)}


def _log_jt(d, s, r):
    """``log J_t(r)`` with ``s = 1 - t``; ``-inf`` outside ``r < s pi``."""
    inside = r < s * math.pi
    rr = np.where(inside, r, 0.0)
    if s == 1.0:
        return np.zeros_like(r)
    with np.errstate(divide="ignore"):
        val = (d - 1) * (np.log(np.sinc(rr / (s * math.pi))) - np.log(np.sinc(rr / math.pi)) - math.log(s))
    return np.where(inside, val - math.log(s), -np.inf)


def _dlogjt_over_r(d, s, r):
    """``(d/dr log J_t) / r``, finite at ``r = 0``."""
    small = r < 1e-3
    rr = np.where(small, 1.0, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = (d - 1) * (1.0 / (s * np.tan(rr / s)) - 1.0 / np.tan(rr)) / rr
    series = (d - 1) * ((1.0 - 1.0 / s ** 2) / 3.0 + r * r * (1.0 - 1.0 / s ** 4) / 45.0)
    return np.where(small, series, full)


class AtomicSphereBridge:
    """Exact bridge quantities for an ``AtomicTarget``."""

    def __init__(self, target):
        if not isinstance(target, AtomicTarget):
            raise InvalidArgument("needs an AtomicTarget")
        self.target = target
        self.d = target.d
        self.sphere = target.sphere
        self.volume = target.volume

    def _parts(self, t, x):
        if t >= 1.0:
            raise DomainError("bridge quantities need t < 1")
        s = 1.0 - t
        x = np.asarray(x, dtype=float)
        c = np.clip(x @ self.target.atoms.T, -1.0, 1.0)
        r = np.arccos(c)
        logw = np.log(self.target.weights) + _log_jt(self.d, s, r)
        top = np.max(logw, axis=-1, keepdims=True)
        safe_top = np.where(np.isfinite(top), top, 0.0)
        e = np.exp(logw - safe_top)
        tot = e.sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = e / tot
            logp = np.log(tot[..., 0]) + safe_top[..., 0] - math.log(self.volume)
        return s, x, c, r, q, logp

    def log_marginal_density(self, t, x):
        return self._parts(t, x)[5]

    def marginal_density(self, t, x):
        return np.exp(self.log_marginal_density(t, x))

    def _logs(self, t, x):
        s, x, c, r, q, logp = self._parts(t, x)
        if not np.all(np.isfinite(logp)):
            raise NumericFailure("point outside the support of the bridge marginal")
        gr = 1.0 / np.sinc(r / math.pi)            # r / sin r
        L = gr[..., None] * (self.target.atoms - c[..., None] * x[..., None, :])
        return s, x, c, r, q, gr, L

    def velocity(self, t, x):
        s, x, c, r, q, gr, L = self._logs(t, x)
        return np.einsum("...k,...kj->...j", q, L) / s

    def score(self, t, x):
        s, x, c, r, q, gr, L = self._logs(t, x)
        a = np.where(q > 0, _dlogjt_over_r(self.d, s, r), 0.0)
        return -np.einsum("...k,...kj->...j", q * a, L)

    def velocity_jacobian(self, t, x):
        """Ambient derivative of the finite-sum velocity, shape ``(..., D, D)``."""
        s, x, c, r, q, gr, L = self._logs(t, x)
        atoms = self.target.atoms
        D = x.shape[-1]
        a = np.where(q > 0, _dlogjt_over_r(self.d, s, r), 0.0)
        grad_l = -(a * gr)[..., None] * atoms                 # gradient of the log weight
        centred = grad_l - np.einsum("...k,...kj->...j", q, grad_l)[..., None, :]
        out = np.einsum("...k,...ki,...kj->...ij", q, L, centred)
        # derivative of Log_x(a) = g(r) (a - c x), with g'(r) / sin r finite at 0
        small = r < 1e-3
        sn = np.sin(np.where(small, 1.0, r))
        gps = np.where(small, 1.0 / 3.0 + 2.0 * r * r / 15.0,
                       (sn - r * np.cos(r)) / sn ** 3)
        diff = atoms - c[..., None] * x[..., None, :]
        out -= np.einsum("...k,...ki,kj->...ij", q * gps, diff, atoms)
        out -= np.einsum("...k,...i,kj->...ij", q * gr, x, atoms)
        out -= np.sum(q * gr * c, axis=-1)[..., None, None] * np.eye(D)
        return out / s


def make_sphere_bridge(target, **quadrature):
    """Closed-form bridge when available, quadrature otherwise."""
    if isinstance(target, HarmonicTarget):
        return HarmonicSphereBridge(target)
    if isinstance(target, AtomicTarget):
        return AtomicSphereBridge(target)
    return SphereBridge(target, **quadrature)


class SpherePopulationField(VelocityField):
    """Population velocity ``E[Log_x X1 | X_t = x] / (1 - t)`` of a sphere bridge."""

    variant = "population"

    def __init__(self, bridge, check_bound=True):
        super().__init__(bridge.sphere)
        self.bridge = bridge
        self.check_bound = check_bound

    def __call__(self, t, x):
        t = check_time(t)
        v = self.bridge.velocity(t, x)
        if self.check_bound and np.any(np.linalg.norm(v, axis=-1) > math.pi * (1 + 1e-9)):
            raise NumericFailure("population velocity exceeds the pi bound")
        return v

    @property
    def has_jacobian(self):
        return isinstance(self.bridge, (HarmonicSphereBridge, AtomicSphereBridge))

    def ambient_jacobian(self, t, x):
        if not self.has_jacobian:
            return super().ambient_jacobian(t, x)
        return self.bridge.velocity_jacobian(check_time(t), x)

    def describe(self):
        out = {"field": "population", "variant": self.variant,
               "route": type(self.bridge).__name__}
        out.update(self.bridge.target.describe())
        return out


# --- regularity constants ------------------------------------------------------------

@dataclass(frozen=True)
class RegularityConstants:
    """Regularity moduli of the sphere population field at time ``t``."""

    d: int
    t: float
    ratio: float          # M1 / m1
    L_v_x: float
    L_v_t: float
    L_div_x: float
    L_div_t: float
    L_score: float
    L_v: float
    L_R: float

    def lip_x_hat(self, eps):
        return self.L_v_x + eps

    @property
    def C_Lip(self):
        s = math.sqrt(self.L_score)
        return (3 * s * self.L_v_x * self.L_v + s * self.L_v_t + 3 * self.L_v * self.L_div_x
                + self.L_div_t + self.L_R * self.L_v ** 2 * self.d)

    @property
    def C_eps(self):
        s = math.sqrt(self.L_score)
        return (math.sqrt(2 * self.L_score) + 1 + 2 * s * self.L_v + s * self.L_v_x
                + self.L_div_x + 2 * self.L_R * self.d * self.L_v)

    @property
    def C_eps2(self):
        return math.sqrt(self.L_score) + self.L_R * self.d

    def bound(self, h, eps):
        """Right-hand side ``h C_Lip + eps C_eps + eps^2 C_eps2``."""
        return h * self.C_Lip + eps * self.C_eps + eps ** 2 * self.C_eps2


def sphere_constants(target, d, t):
    """Regularity constants for a uniform prior and a target with bounded ratio."""
    if t >= 1.0:
        raise DomainError("constants need t < 1")
    q = target.M1 / target.m1 if hasattr(target, "M1") else float(target)
    s = 1.0 - t
    pi = math.pi
    return RegularityConstants(
        d=d, t=t, ratio=q,
        L_v_x=12 * pi * q * (d - 1) / s,
        L_v_t=8 * pi ** 2 * d * q / s,
        L_div_x=128 * pi * (d - 1) ** 2 * q / s ** 3,
        L_div_t=128 * pi ** 2 * (d - 1) ** 2 * q / s ** 3,
        L_score=8 * (d - 1) ** 2 * q / s ** 2,
        L_v=pi,
        L_R=1.0,
    )
