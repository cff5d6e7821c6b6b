"""Closed-form Riemannian primitives for S^d, SPD(n) and R^d.

Points and tangent vectors are plain ndarrays in ambient coordinates with
arbitrary leading batch dimensions:

* ``Sphere(d)``: points are unit vectors of shape ``(..., d + 1)``.
* ``SPD(n)``: points are symmetric positive definite ``(..., n, n)``
  matrices; the metric is the affine-invariant one,
  ``g_X(U, V) = tr(X^{-1} U X^{-1} V)``.
* ``Euclidean(d)``: points are vectors of shape ``(..., d)``.

Every operation is pure; outputs are re-projected onto the manifold
(renormalised / symmetrised) so round-off does not accumulate.
"""
from dataclasses import dataclass
import math

import numpy as np

from .errors import DomainError, InvalidArgument, NumericFailure

# below this norm the sphere maps switch to Taylor series
_SMALL = 1e-4
# sphere inputs closer than this to the cut locus are rejected
ANTIPODAL_TOL = 1e-6


@dataclass(frozen=True)
class ManifoldDescriptor:
    """Curvature and injectivity data of a manifold.

    Attributes
    ----------
    kind : {"sphere", "spd", "euclidean"}
    dim : int
        Intrinsic dimension.
    k_min, k_max : float
        Lower and upper sectional curvature bounds.
    l_r : float
        Bound ``L_R`` with ``|R(u, v)v| <= L_R |u| |v|^2``.
    inj_radius : float
        Injectivity radius (``inf`` for Hadamard manifolds).
    """

    kind: str
    dim: int
    k_min: float
    k_max: float
    l_r: float
    inj_radius: float

    def __post_init__(self):
        if self.k_min > self.k_max:
            raise InvalidArgument("k_min must not exceed k_max")
        if self.l_r < max(abs(self.k_min), abs(self.k_max)):
            raise InvalidArgument("l_r must dominate |k_min| and |k_max|")
        if not self.inj_radius >= 0:
            raise InvalidArgument("inj_radius must be nonnegative")

    @property
    def compact(self):
        return self.kind == "sphere"

    @property
    def diameter(self):
        return math.pi if self.kind == "sphere" else math.inf


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidArgument("non-finite input")


def _sinc(n):
    """sin(n)/n with a Taylor branch near zero."""
    out = np.empty_like(n)
    small = n < _SMALL
    n2 = n[small] ** 2
    out[small] = 1.0 - n2 / 6.0 + n2 * n2 / 120.0
    big = ~small
    out[big] = np.sin(n[big]) / n[big]
    return out


def _theta_over_sin(theta):
    """theta / sin(theta) with a Taylor branch near zero."""
    out = np.empty_like(theta)
    small = theta < _SMALL
    t2 = theta[small] ** 2
    out[small] = 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    big = ~small
    out[big] = theta[big] / np.sin(theta[big])
    return out


class Manifold:
    """Shared helpers.  Subclasses implement the closed forms."""

    descriptor: ManifoldDescriptor
    ambient_shape: tuple

    @property
    def dim(self):
        return self.descriptor.dim

    @property
    def kind(self):
        return self.descriptor.kind

    @property
    def ambient_size(self):
        return int(np.prod(self.ambient_shape))

    def norm(self, x, v):
        return np.sqrt(np.maximum(self.inner(x, v, v), 0.0))

    def geodesic(self, x0, x1, t):
        """Point ``Exp_{x0}(t Log_{x0}(x1))`` on the minimizing geodesic."""
        t = np.asarray(t, dtype=float)
        if self.ambient_shape and t.ndim:
            t = t.reshape(t.shape + (1,) * len(self.ambient_shape))
        return self.exp(x0, t * self.log(x0, x1))

    def bridge_velocity(self, x0, x1, t, formula="transport"):
        """Velocity of the geodesic bridge at time ``t``.

        ``formula="transport"`` transports ``Log_{x0}(x1)`` to ``X_t``;
        ``formula="log"`` uses ``Log_{X_t}(x1) / (1 - t)``.  The two agree
        up to round-off and the tests hold them to each other.
        """
        if np.any(np.asarray(t) >= 1.0):
            raise DomainError("bridge velocity needs t < 1")
        xt = self.geodesic(x0, x1, t)
        if formula == "transport":
            return self.transport(x0, xt, self.log(x0, x1))
        if formula == "log":
            t = np.asarray(t, dtype=float)
            if self.ambient_shape and t.ndim:
                t = t.reshape(t.shape + (1,) * len(self.ambient_shape))
            return self.log(xt, x1) / (1.0 - t)
        raise InvalidArgument(f"unknown formula {formula!r}")

    def gram(self, x, frame):
        """Gram matrix of a frame (``(..., k, *ambient)``) at ``x``."""
        a = len(self.ambient_shape)
        xs = np.expand_dims(np.expand_dims(x, -1 - a), -1 - a)
        return self.inner(xs, np.expand_dims(frame, -1 - a), np.expand_dims(frame, -2 - a))

    def to_frame_coords(self, x, v, frame=None):
        """Coordinates of ``v`` in an orthonormal frame at ``x``."""
        if frame is None:
            frame = self.frame(x)
        xs = np.expand_dims(x, -1 - len(self.ambient_shape))
        vs = np.expand_dims(v, -1 - len(self.ambient_shape))
        return self.inner(xs, vs, frame)

    def from_frame_coords(self, x, c, frame=None):
        if frame is None:
            frame = self.frame(x)
        axes = len(self.ambient_shape)
        c = np.asarray(c).reshape(np.shape(c) + (1,) * axes)
        return np.sum(c * frame, axis=-1 - axes)


class Sphere(Manifold):
    """Unit sphere S^d embedded in R^{d+1} with the round metric."""

    def __init__(self, d):
        if d < 1:
            raise InvalidArgument("sphere dimension must be >= 1")
        self.d = int(d)
        self.descriptor = ManifoldDescriptor("sphere", self.d, 1.0, 1.0, 1.0, math.pi)
        self.ambient_shape = (self.d + 1,)

    def __repr__(self):
        return f"Sphere({self.d})"

    def volume(self):
        """Vol(S^d) = 2 pi^{(d+1)/2} / Gamma((d+1)/2)."""
        return 2.0 * math.pi ** ((self.d + 1) / 2) / math.gamma((self.d + 1) / 2)

    def project(self, x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def project_tangent(self, x, v):
        return v - np.sum(x * v, axis=-1, keepdims=True) * x

    def inner(self, x, u, v):
        return np.sum(u * v, axis=-1)

    def check_point(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        _finite(x)
        if x.shape[-1] != self.d + 1:
            raise InvalidArgument(f"expected ambient size {self.d + 1}")
        if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > tol):
            raise InvalidArgument("point is not on the unit sphere")
        return x

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        _finite(x, v)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        y = np.cos(n) * x + _sinc(n) * v
        return self.project(y)

    def log(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _finite(x, y)
        c = np.sum(x * y, axis=-1, keepdims=True)
        u = y - c * x
        s = np.linalg.norm(u, axis=-1, keepdims=True)
        theta = np.arctan2(s, c)
        if np.any(theta > math.pi - ANTIPODAL_TOL):
            raise DomainError("log map undefined at the cut locus (antipodal points)")
        v = _theta_over_sin(theta) * u
        return self.project_tangent(x, v)

    def dist(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.sum(x * y, axis=-1)
        s = np.linalg.norm(y - c[..., None] * x, axis=-1)
        return np.arctan2(s, c)

    def transport(self, x, y, v):
        """Parallel transport of ``v`` from ``x`` to ``y`` along the minimizing geodesic."""
        v = np.asarray(v, dtype=float)
        w = self.log(x, y)
        theta = np.linalg.norm(w, axis=-1, keepdims=True)
        safe = np.where(theta > 0, theta, 1.0)
        u = np.where(theta > 0, w / safe, 0.0)
        a = np.sum(u * v, axis=-1, keepdims=True)
        out = v + (np.cos(theta) - 1.0) * a * u - np.sin(theta) * a * x
        return self.project_tangent(y, out)

    def frame(self, x):
        """Orthonormal basis of T_x S^d, shape ``(..., d, d + 1)``.

        Built from the Householder reflection that swaps ``x`` with
        ``-sign(x_d) e_d``, so the construction has no cancellation.  At the
        north pole it returns ``e_0, ..., e_{d-1}``.
        """
        x = np.asarray(x, dtype=float)
        D = self.d + 1
        s = np.where(x[..., -1:] >= 0, -1.0, 1.0)
        w = x.copy()
        w[..., -1:] -= s
        H = np.eye(D) - 2.0 * w[..., :, None] * w[..., None, :] / np.sum(w * w, axis=-1)[..., None, None]
        f = np.swapaxes(H, -1, -2)[..., :self.d, :]
        return f - np.sum(f * x[..., None, :], axis=-1, keepdims=True) * x[..., None, :]

    def random_point(self, rng, size=()):
        size = (size,) if np.isscalar(size) else tuple(size)
        return self.project(rng.standard_normal(size + (self.d + 1,)))

    def random_tangent(self, rng, x, scale=1.0):
        return scale * self.project_tangent(x, rng.standard_normal(np.shape(x)))


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _eigh2(X):
    # closed form for 2x2: LAPACK's per-matrix overhead dominates at this size
    a, b, c = X[..., 0, 0], 0.5 * (X[..., 0, 1] + X[..., 1, 0]), X[..., 1, 1]
    m = 0.5 * (a + c)
    r = np.hypot(0.5 * (a - c), b)
    det = a * c - b * b
    pos = m >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = np.where(pos, m + r, np.where(m - r != 0, det / (m - r), m + r))
        lo = np.where(pos, np.where(hi != 0, det / hi, m - r), m - r)
    th = 0.5 * np.arctan2(2.0 * b, a - c)
    cs, sn = np.cos(th), np.sin(th)
    U = np.stack([np.stack([-sn, cs], axis=-1), np.stack([cs, sn], axis=-1)], axis=-2)
    return np.stack([lo, hi], axis=-1), U


def sym_eigh(X):
    """Ascending eigenpairs of symmetric matrices (batched, closed form for 2x2)."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] == 2:
        w, U = _eigh2(X)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(U))):
            raise NumericFailure("symmetric eigensolver got non-finite input")
        return w, U
    try:
        return np.linalg.eigh(_sym(X))
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"symmetric eigensolver failed: {exc}") from exc


def sym_eigvalsh(X):
    return sym_eigh(X)[0]


def _eig_apply(X, fn):
    w, U = sym_eigh(X)
    return (U * fn(w)[..., None, :]) @ np.swapaxes(U, -1, -2)


def sym_sqrtm(X):
    return _eig_apply(X, np.sqrt)


def sym_invsqrtm(X):
    return _eig_apply(X, lambda w: 1.0 / np.sqrt(w))


def sym_logm(X):
    return _eig_apply(X, np.log)


def sym_expm(X):
    return _eig_apply(X, np.exp)


class SPD(Manifold):
    """SPD(n) with the affine-invariant metric.

    Curvature: sectional curvatures lie in ``[-1/2, 0]``.  The curvature
    operator at the identity is ``R(u, v)w = -[[u, v], w] / 4`` and the
    Boettcher-Wenzel inequality gives ``|R(u, v)v| <= |u| |v|^2 / 2``, hence
    ``L_R = 1/2``.
    """

    def __init__(self, n):
        if n < 1:
            raise InvalidArgument("matrix size must be >= 1")
        self.n = int(n)
        self.descriptor = ManifoldDescriptor(
            "spd", self.n * (self.n + 1) // 2, -0.5 if self.n > 1 else 0.0, 0.0,
            0.5 if self.n > 1 else 0.0, math.inf)
        self.ambient_shape = (self.n, self.n)
        self._basis = self._identity_basis()

    def __repr__(self):
        return f"SPD({self.n})"

    def _identity_basis(self):
        n = self.n
        out = []
        for i in range(n):
            e = np.zeros((n, n))
            e[i, i] = 1.0
            out.append(e)
        for i in range(n):
            for j in range(i + 1, n):
                e = np.zeros((n, n))
                e[i, j] = e[j, i] = 1.0 / math.sqrt(2.0)
                out.append(e)
        return np.array(out)

    def project(self, x):
        return _sym(x)

    def project_tangent(self, x, v):
        return _sym(v)

    def check_point(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        _finite(x)
        if x.shape[-2:] != (self.n, self.n):
            raise InvalidArgument(f"expected {self.n}x{self.n} matrices")
        scale = np.max(np.abs(x), axis=(-1, -2))
        if np.any(np.max(np.abs(x - np.swapaxes(x, -1, -2)), axis=(-1, -2)) > tol * np.maximum(scale, 1.0)):
            raise InvalidArgument("matrix is not symmetric")
        if np.any(sym_eigvalsh(x)[..., 0] <= 0):
            raise InvalidArgument("matrix is not positive definite")
        return x

    def inner(self, x, u, v):
        xi = np.linalg.inv(x)
        return np.einsum("...ij,...jk,...kl,...li->...", xi, u, xi, v)

    def exp(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        _finite(x, v)
        s = sym_sqrtm(x)
        si = sym_invsqrtm(x)
        return _sym(s @ sym_expm(si @ v @ si) @ s)

    def log(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        _finite(x, y)
        s = sym_sqrtm(x)
        si = sym_invsqrtm(x)
        return _sym(s @ sym_logm(si @ y @ si) @ s)

    def dist(self, x, y):
        si = sym_invsqrtm(x)
        w = sym_eigvalsh(si @ y @ si)
        return np.sqrt(np.sum(np.log(w) ** 2, axis=-1))

    def transport(self, x, y, v):
        """Closed form ``E V E^T`` with ``E = (Y X^{-1})^{1/2}``."""
        s = sym_sqrtm(x)
        si = sym_invsqrtm(x)
        e = s @ sym_sqrtm(si @ y @ si) @ si
        return _sym(e @ v @ np.swapaxes(e, -1, -2))

    def frame(self, x):
        s = sym_sqrtm(x)
        s = np.expand_dims(s, -3)
        return _sym(s @ self._basis @ s)

    def random_point(self, rng, size=(), scale=1.0):
        size = (size,) if np.isscalar(size) else tuple(size)
        g = rng.standard_normal(size + (self.n, self.n))
        return sym_expm(scale * _sym(g) / math.sqrt(2.0))

    def random_tangent(self, rng, x, scale=1.0):
        c = rng.standard_normal(np.shape(x)[:-2] + (self.dim,))
        return scale * self.from_frame_coords(x, c)


class Euclidean(Manifold):
    """Flat R^d."""

    def __init__(self, d):
        self.d = int(d)
        self.descriptor = ManifoldDescriptor("euclidean", self.d, 0.0, 0.0, 0.0, math.inf)
        self.ambient_shape = (self.d,)

    def __repr__(self):
        return f"Euclidean({self.d})"

    def project(self, x):
        return np.asarray(x, dtype=float)

    def project_tangent(self, x, v):
        return np.asarray(v, dtype=float)

    def check_point(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        _finite(x)
        return x

    def inner(self, x, u, v):
        return np.sum(u * v, axis=-1)

    def exp(self, x, v):
        _finite(x, v)
        return np.asarray(x, dtype=float) + v

    def log(self, x, y):
        _finite(x, y)
        return np.asarray(y, dtype=float) - x

    def dist(self, x, y):
        return np.linalg.norm(np.asarray(y) - x, axis=-1)

    def transport(self, x, y, v):
        return np.array(v, dtype=float)

    def frame(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.d), x.shape[:-1] + (self.d, self.d)).copy()

    def random_point(self, rng, size=()):
        size = (size,) if np.isscalar(size) else tuple(size)
        return rng.standard_normal(size + (self.d,))

    def random_tangent(self, rng, x, scale=1.0):
        return scale * rng.standard_normal(np.shape(x))


def make_manifold(kind, dim):
    """``make_manifold("sphere", 2)``, ``("spd", 3)`` (matrix size), ``("euclidean", 3)``."""
    kinds = {"sphere": Sphere, "spd": SPD, "euclidean": Euclidean}
    if kind not in kinds:
        raise InvalidArgument(f"unknown manifold kind {kind!r}")
    return kinds[kind](dim)


# --- covariant derivatives by finite differences ---------------------------

def covariant_jacobian_fd(m, field, t, x, step):
    """Matrix ``[<nabla_{e_i} u, e_j>]_{j,i}`` of a vector field at ``x``.

    Central differences along the frame geodesics ``Exp_x(+-step e_i)``;
    values at the displaced points are transported back to ``x`` before
    differencing.  Second order in ``step``.
    """
    if not step > 0:
        raise InvalidArgument("step must be positive")
    x = np.asarray(x, dtype=float)
    frame = m.frame(x)
    axes = len(m.ambient_shape)
    cols = []
    for i in range(m.dim):
        e = frame[..., i, :] if axes == 1 else frame[..., i, :, :]
        yp = m.exp(x, step * e)
        ym = m.exp(x, -step * e)
        up = m.transport(yp, x, field(t, yp))
        um = m.transport(ym, x, field(t, ym))
        cols.append(m.to_frame_coords(x, (up - um) / (2.0 * step), frame))
    return np.stack(cols, axis=-1)


def divergence_fd(m, field, t, x, step):
    """Riemannian divergence ``sum_i <nabla_{e_i} u, e_i>`` by central differences."""
    return np.trace(covariant_jacobian_fd(m, field, t, x, step), axis1=-2, axis2=-1)


# --- Jacobi fields in constant curvature -----------------------------------

def model_function_s(k, r):
    """Model function ``s_k(r)`` and its derivative.

    ``sin(r sqrt k)/sqrt k`` for k > 0, ``r`` for k = 0 and
    ``sinh(r sqrt(-k))/sqrt(-k)`` for k < 0.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise InvalidArgument("r must be nonnegative")
    if k > 0:
        q = math.sqrt(k)
        return np.sin(q * r) / q, np.cos(q * r)
    if k < 0:
        q = math.sqrt(-k)
        return np.sinh(q * r) / q, np.cosh(q * r)
    return r * 1.0, np.ones_like(r)


def model_function_c(k, r):
    """Solution of ``f'' + k f = 0`` with ``f(0) = 1, f'(0) = 0``."""
    r = np.asarray(r, dtype=float)
    if k > 0:
        return np.cos(math.sqrt(k) * r)
    if k < 0:
        return np.cosh(math.sqrt(-k) * r)
    return np.ones_like(r)


def jacobi_coefficient(c, t, j0, dj0):
    """Signed coefficient of a normal Jacobi field along its parallel unit field."""
    return j0 * model_function_c(c, t) + dj0 * model_function_s(c, t)[0]


def jacobi_closed_form(c, t, j0, dj0):
    """Norm of the normal Jacobi field with ``|J(0)| = j0``, ``|J'(0)| = dj0``.

    Both initial vectors point along the same parallel unit normal field,
    so by linearity ``J(t) = (j0 c_c(t) + dj0 s_c(t)) E(t)``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise InvalidArgument("t must be nonnegative")
    return np.abs(jacobi_coefficient(c, t, j0, dj0))
