"""Manifold Euler sampling with step schedules and an invertibility guard.

The update is ``x_{k+1} = Exp_{x_k}(h_k vhat(t_k, x_k))``.  Between grid
times the scheme coincides with the flow of the interpolated field
``vtilde(t, x) = P_{z -> x} vhat(t_k, z)`` where ``z`` is the Euler
preimage of ``x``; ``interpolated_field`` builds that field explicitly.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
import hashlib
import math
import struct
import warnings

import numpy as np
from scipy.optimize import brentq

from . import kernels
from . import rng as rngmod
from .bridge.fields import PerturbedField, VelocityField
from .bridge.perturb import AffineSpherePerturbation
from .bridge.sphere import AtomicSphereBridge, HarmonicSphereBridge, SpherePopulationField, harmonic_coefficients
from .errors import DomainError, InvalidArgument, NumericFailure
from .geometry import Euclidean, Sphere, covariant_jacobian_fd


class GuardWarning(UserWarning):
    """A step exceeded the invertibility threshold under the ``warn`` policy."""


# --- schedules -----------------------------------------------------------------

@dataclass(frozen=True)
class StepSchedule:
    """Time grid ``0 = t_0 < ... < t_N = T`` with ``T < 1``."""

    kind: str
    param: float
    times: tuple

    def __post_init__(self):
        t = np.asarray(self.times)
        if t[0] != 0.0 or np.any(np.diff(t) <= 0) or not t[-1] < 1.0:
            raise InvalidArgument("times must start at 0, increase strictly and stay below 1")

    @property
    def T(self):
        return self.times[-1]

    @property
    def N(self):
        return len(self.times) - 1

    @property
    def steps(self):
        return np.diff(np.asarray(self.times))

    def describe(self):
        return {"schedule": self.kind, "schedule_param": self.param, "T": self.T, "N": self.N}


def make_schedule(kind, T, h=None, n_steps=None, eta=None):
    """Constant or polynomial time grid ending at ``T``.

    ``constant``: give ``h`` (``N = round(T / h)``) or ``n_steps``; the grid is
    uniform with step ``T / N``.

    ``polynomial``: ``t_i = 1 - 1/(1 + eta i)^2`` while below ``T``, with
    ``N = ceil((1/sqrt(1 - T) - 1)/eta)`` and the last node clamped to ``T``.
    """
    if not 0.0 < T:
        raise InvalidArgument("T must be positive")
    if T >= 1.0:
        raise DomainError("early-stopping time T must be < 1")
    if kind == "constant":
        if n_steps is None:
            if h is None or not h > 0:
                raise InvalidArgument("constant schedule needs h > 0 or n_steps")
            n_steps = max(1, int(round(T / h)))
        n_steps = int(n_steps)
        if n_steps < 1:
            raise InvalidArgument("need at least one step")
        times = np.linspace(0.0, T, n_steps + 1)
        return StepSchedule("constant", T / n_steps, tuple(float(t) for t in times))
    if kind == "polynomial":
        if eta is None or not eta > 0:
            raise InvalidArgument("polynomial schedule needs eta > 0")
        N = max(1, math.ceil((1.0 / math.sqrt(1.0 - T) - 1.0) / eta - 1e-9))
        i = np.arange(N)
        times = list(1.0 - 1.0 / (1.0 + eta * i) ** 2) + [T]
        return StepSchedule("polynomial", float(eta), tuple(float(t) for t in times))
    raise InvalidArgument(f"unknown schedule kind {kind!r}")


def polynomial_step(eta, i):
    """Closed form of ``t_{i+1} - t_i`` for the polynomial schedule."""
    return eta * (2.0 + eta * (2 * i + 1)) / ((1.0 + eta * i) ** 2 * (1.0 + eta * (i + 1)) ** 2)


def eta_for_accuracy(eps_target, T, d, const=1.0):
    """Polynomial-schedule parameter of order ``eps sqrt(1 - T) / (d - 1)^2``."""
    return const * eps_target * math.sqrt(1.0 - T) / max(d - 1, 1) ** 2


# --- invertibility guard ---------------------------------------------------------

@dataclass(frozen=True)
class GuardReport:
    """Largest step keeping ``x -> Exp_x(h b(x))`` invertible, and its inputs."""

    h_max_allowed: float
    B: float
    L_grad: float
    L_R: float
    K_min: float
    R: float
    branch: str
    terms: tuple
    h: float = float("nan")

    @property
    def violated(self):
        return bool(self.h > self.h_max_allowed)

    def with_step(self, h):
        return GuardReport(self.h_max_allowed, self.B, self.L_grad, self.L_R, self.K_min,
                           self.R, self.branch, self.terms, float(h))

    def describe(self):
        return (f"GuardReport(branch={self.branch}, h={self.h:.6g}, h_max={self.h_max_allowed:.6g}, "
                f"B={self.B:.6g}, L_grad={self.L_grad:.6g}, L_R={self.L_R}, K_min={self.K_min}, "
                f"R={self.R}, violated={self.violated})")


def step_guard(m, B, L_grad):
    """Step threshold for a field with sup norm ``B`` and ``|nabla b|_op <= L_grad``.

    ``m`` is a ``ManifoldDescriptor`` (or a manifold).  The threshold is the
    minimum of ``R / B``, ``1 / (4 L_grad)`` and a curvature term whose form
    depends on the sign of ``K_min``:

    * ``K_min > 0``: ``sqrt(3 / (4 B^2 L_R (2 + 2 L max(1/sqrt(K), 1))))``
    * ``K_min < 0``: ``sqrt(3 / (4 B^2 L_R (2 s_K(1) + 4 (cosh(sqrt(-K)) - 1)/(-K) L)))``
    * ``K_min = 0``: root of ``h^2 (2 + h L) = 3 / (4 B^2 L_R)``.

    Infinite ``R`` drops the first term, ``L_grad = 0`` the second and
    ``L_R = 0`` the third.
    """
    desc = getattr(m, "descriptor", m)
    if not B > 0:
        raise InvalidArgument("B must be positive")
    if L_grad < 0:
        raise InvalidArgument("L_grad must be nonnegative")
    k, lr, R = desc.k_min, desc.l_r, desc.inj_radius
    t_inj = R / B if math.isfinite(R) else math.inf
    t_lip = 1.0 / (4.0 * L_grad) if L_grad > 0 else math.inf
    if k > 0:
        branch = "PositiveK"
        denom = 4.0 * B * B * lr * (2.0 + 2.0 * L_grad * max(1.0 / math.sqrt(k), 1.0))
        t_curv = math.sqrt(3.0 / denom) if lr > 0 else math.inf
    elif k < 0:
        branch = "NegativeK"
        q = math.sqrt(-k)
        denom = 4.0 * B * B * lr * (2.0 * math.sinh(q) / q + 4.0 * (math.cosh(q) - 1.0) / (-k) * L_grad)
        t_curv = math.sqrt(3.0 / denom) if lr > 0 else math.inf
    else:
        branch = "ZeroK"
        if lr > 0:
            c = 3.0 / (4.0 * B * B * lr)
            f = lambda h: h * h * (2.0 + h * L_grad) - c
            t_curv = brentq(f, 0.0, math.sqrt(c / 2.0) + 1.0, xtol=1e-15, rtol=1e-15)
        else:
            t_curv = math.inf
    terms = (t_inj, t_lip, t_curv)
    return GuardReport(min(terms), float(B), float(L_grad), lr, k, R, branch, terms)


def empirical_guard(field, t, points, fd_step=1e-4):
    """Guard report from the largest ``|v|`` and FD ``|nabla v|_op`` over ``points``."""
    m = field.manifold
    v = field(t, points)
    B = float(np.max(m.norm(points, v)))
    jac = covariant_jacobian_fd(m, field, t, points, fd_step)
    L = float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1))))
    return step_guard(m.descriptor, max(B, 1e-12), L)


def _apply_guard(schedule, guard, policy):
    if guard is None:
        return []
    reports = list(guard) if isinstance(guard, (list, tuple)) else [guard] * schedule.N
    if len(reports) != schedule.N:
        raise InvalidArgument("need one guard report per step")
    out = [r.with_step(h) for r, h in zip(reports, schedule.steps)]
    bad = [r for r in out if r.violated]
    if bad:
        msg = f"{len(bad)} of {schedule.N} steps exceed the invertibility threshold; first: {bad[0].describe()}"
        if policy == "fail":
            raise NumericFailure(msg)
        if policy == "warn":
            warnings.warn(msg, GuardWarning, stacklevel=3)
        else:
            raise InvalidArgument(f"unknown guard policy {policy!r}")
    return out


# --- Euler integration -------------------------------------------------------------

@dataclass
class Trajectory:
    schedule: StepSchedule
    points: np.ndarray
    velocities: np.ndarray
    seed: int
    logdet: np.ndarray = None
    guard: list = dc_field(default_factory=list)

    @property
    def terminal(self):
        return self.points[-1]


def _step_logdet(m, x, y, w, h, dv):
    """``log|det d(x -> Exp_x(h v(x)))|`` from the ambient jacobian ``dv`` of ``v``."""
    D = x.shape[-1]
    eye = np.eye(D)
    if isinstance(m, Euclidean):
        return np.linalg.slogdet(eye + h * dv)[1]
    nw = np.linalg.norm(w, axis=-1)
    safe = np.where(nw > 1e-300, nw, 1.0)
    wh = np.where((nw > 1e-300)[..., None], w / safe[..., None], 0.0)
    cn = np.cos(nw)
    sc = np.where(nw < 1e-4, 1.0 - nw ** 2 / 6.0, np.sin(nw) / safe)
    dE = (-np.sin(nw)[..., None, None] * x[..., :, None] * wh[..., None, :]
          + sc[..., None, None] * eye + (cn - sc)[..., None, None] * wh[..., :, None] * wh[..., None, :])
    jac = cn[..., None, None] * eye + h * dE @ dv
    proj = eye - x[..., :, None] * x[..., None, :]
    return np.linalg.slogdet(jac @ proj + y[..., :, None] * x[..., None, :])[1]


def euler_sample(field, schedule, x0, seed=0, guard=None, guard_policy="fail", track_logdet=False,
                 keep_path=True):
    """Integrate ``field`` with the manifold Euler scheme along ``schedule``.

    ``x0`` may carry batch dimensions.  Field failures are re-raised as
    ``NumericFailure`` with the step index attached.
    """
    m = field.manifold
    reports = _apply_guard(schedule, guard, guard_policy)
    x = np.array(x0, dtype=float)
    times = schedule.times
    pts = [x] if keep_path else None
    vels = [] if keep_path else None
    logdet = np.zeros(x.shape[:x.ndim - len(m.ambient_shape)]) if track_logdet else None
    if track_logdet and not (field.has_jacobian and isinstance(m, (Sphere, Euclidean))):
        raise InvalidArgument("log-determinant tracking needs a closed-form jacobian on S^d or R^d")
    for k, h in enumerate(schedule.steps):
        t = times[k]
        try:
            v = field(t, x)
        except NumericFailure as exc:
            raise NumericFailure(f"field failed at step {k} (t={t:.6g}): {exc}",
                                 residual=exc.residual, step=k) from exc
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"non-finite velocity at step {k}", step=k)
        y = m.exp(x, h * v)
        if track_logdet:
            logdet = logdet + _step_logdet(m, x, y, h * v, h, field.ambient_jacobian(t, x))
        x = y
        if keep_path:
            pts.append(x)
            vels.append(v)
    if keep_path:
        return Trajectory(schedule, np.stack(pts), np.stack(vels) if vels else np.empty((0,) + x.shape),
                          int(seed), logdet, reports)
    return Trajectory(schedule, x[None], np.empty((0,) + x.shape), int(seed), logdet, reports)


# --- interpolated field ---------------------------------------------------------------

class InterpolatedField(VelocityField):
    """Frozen-velocity field ``vtilde(t, x) = P_{z -> x} vhat(t_k, z)``, ``z = F^{-1}(x)``.

    ``F(z) = Exp_z((t - t_k) vhat(t_k, z))``.  The preimage is found by the
    fixed-point map ``z <- Exp_x(-(t - t_k) P_{z -> x} vhat(t_k, z))``, halving
    the update whenever the residual grows.
    """

    variant = "frozen-interpolated"

    def __init__(self, vhat, schedule, tol=1e-9, max_iter=100):
        super().__init__(vhat.manifold)
        self.vhat = vhat
        self.schedule = schedule
        self.tol = tol
        self.max_iter = max_iter
        self._times = np.asarray(schedule.times)

    def segment(self, t):
        if not 0.0 <= t < self.schedule.T:
            raise DomainError(f"t={t} outside [0, T)")
        k = int(np.searchsorted(self._times, t, side="right") - 1)
        return k, self._times[k]

    def preimage(self, t, x):
        """``(z, vhat(t_k, z))`` with ``Exp_z((t - t_k) vhat(t_k, z)) = x``."""
        m = self.manifold
        k, tk = self.segment(t)
        s = t - tk
        x = np.asarray(x, dtype=float)
        vz = self.vhat(tk, x)
        if s == 0.0:
            return x, vz
        z = m.exp(x, -s * vz)

        def resid(z):
            vz = self.vhat(tk, z)
            return m.dist(m.exp(z, s * vz), x), vz

        res, vz = resid(z)
        for _ in range(self.max_iter):
            if np.all(res <= self.tol):
                return z, vz
            cand = m.exp(x, -s * m.transport(z, x, vz))
            res_c, vz_c = resid(cand)
            worse = res_c > res
            if np.any(worse):
                half = m.geodesic(z, cand, 0.5)
                res_h, vz_h = resid(half)
                cand = np.where(_expand(worse, m), half, cand)
                res_c = np.where(worse, res_h, res_c)
                vz_c = np.where(_expand(worse, m), vz_h, vz_c)
            z, res, vz = cand, res_c, vz_c
        if np.all(res <= self.tol):
            return z, vz
        raise NumericFailure("Euler preimage iteration did not converge (step above the guard?)",
                             residual=float(np.max(res)))

    def __call__(self, t, x):
        if self.segment(t)[1] == t:
            return self.vhat(t, x)
        z, vz = self.preimage(t, x)
        return self.manifold.transport(z, x, vz)


def _expand(mask, m):
    return np.asarray(mask).reshape(np.shape(mask) + (1,) * len(m.ambient_shape))


def interpolated_field(vhat, schedule, **kw):
    return InterpolatedField(vhat, schedule, **kw)


# --- batch sampling -----------------------------------------------------------------------

DUMP_MAGIC = {"sphere": b"RFMS", "spd": b"RFMP", "euclidean": b"RFME"}
DUMP_VERSION = 1


@dataclass
class BatchResult:
    points: np.ndarray
    logdet: np.ndarray
    failed: np.ndarray
    manifest: dict

    @property
    def ok_points(self):
        return self.points[~self.failed]


def _kernel_parts(field):
    """Kernel name and arguments when ``field`` has a compiled Euler loop, else ``None``.

    Covered: harmonic population fields plus an optional affine
    perturbation, and unperturbed atomic-target population fields.
    """
    base, pert = field, None
    if isinstance(field, PerturbedField):
        base, pert = field.base, field.perturbation
        if not isinstance(pert, AffineSpherePerturbation):
            return None
    if not isinstance(base, SpherePopulationField):
        return None
    if isinstance(base.bridge, AtomicSphereBridge) and pert is None:
        tg = base.bridge.target
        return "atomic", (np.ascontiguousarray(tg.atoms), np.ascontiguousarray(np.log(tg.weights)))
    if not isinstance(base.bridge, HarmonicSphereBridge):
        return None
    D = base.manifold.d + 1
    c = pert.c if pert is not None else np.zeros(D)
    M = pert.M if pert is not None else np.zeros((D, D))
    return "affine", (base.bridge.target, np.ascontiguousarray(c, dtype=float),
                      np.ascontiguousarray(M, dtype=float))


def _kernel_run(parts, schedule, x0, track, backend):
    kind, args = parts
    mod = kernels if backend in (None, "auto") else kernels.get_backend(backend)
    x = np.ascontiguousarray(x0, dtype=float)
    ld = np.zeros(len(x))
    if kind == "atomic":
        failed = np.zeros(len(x), dtype=np.uint8)
        mod.atomic_euler(x, ld, failed, args[0], args[1], np.asarray(schedule.times, dtype=float),
                         bool(track))
        return x, ld, failed.astype(bool)
    target, c, M = args
    coefs = np.array([harmonic_coefficients(target.d, t) for t in schedule.times[:-1]])
    mod.affine_euler(x, ld, coefs, np.ascontiguousarray(schedule.steps), np.ascontiguousarray(target.b),
                     np.ascontiguousarray(target.A), c, M, bool(track))
    return x, ld, np.zeros(len(x), dtype=bool)


def batch_sample(field, schedule, prior, n, seed, workers=1, chunk_size=4096, guard=None,
                 guard_policy="warn", track_logdet=False, backend="auto", fail_fraction=1e-3,
                 stream_path=()):
    """``n`` independent Euler trajectories from ``prior``; returns terminal points.

    Trajectories are grouped in fixed-size chunks; chunk ``i`` draws its
    starting points from the stream ``(seed, PRIOR, *stream_path, i)``, so the
    result is a pure function of ``(seed, chunk_size, config)`` whatever
    ``workers`` is.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    reports = _apply_guard(schedule, guard, guard_policy)
    m = field.manifold
    parts = _kernel_parts(field) if backend != "generic" else None
    n_chunks = -(-n // chunk_size)

    def run_chunk(i):
        size = min(chunk_size, n - i * chunk_size)
        x0 = prior.sample(rngmod.stream(seed, rngmod.PRIOR, *stream_path, i), size)
        if parts is not None:
            return _kernel_run(parts, schedule, x0, track_logdet, backend)
        try:
            tr = euler_sample(field, schedule, x0, seed, track_logdet=track_logdet, keep_path=False)
            ld = tr.logdet if track_logdet else np.zeros(size)
            return tr.terminal, ld, np.zeros(size, dtype=bool)
        except NumericFailure:
            pass
        # isolate the failing trajectories
        xs, lds, bad = [], [], []
        for j in range(size):
            try:
                tr = euler_sample(field, schedule, x0[j:j + 1], seed, track_logdet=track_logdet,
                                  keep_path=False)
                xs.append(tr.terminal[0])
                lds.append(tr.logdet[0] if track_logdet else 0.0)
                bad.append(False)
            except NumericFailure:
                xs.append(np.full(x0.shape[1:], np.nan))
                lds.append(np.nan)
                bad.append(True)
        return np.stack(xs), np.array(lds), np.array(bad)

    if workers <= 1:
        results = [run_chunk(i) for i in range(n_chunks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, range(n_chunks)))
    points = np.concatenate([r[0] for r in results])
    logdet = np.concatenate([r[1] for r in results])
    failed = np.concatenate([r[2] for r in results])
    n_failed = int(failed.sum())
    manifest = {
        "seed": int(seed), "n": int(n), "chunk_size": int(chunk_size), "n_failed": n_failed,
        "manifold": m.kind, "dim": m.dim, "backend": (backend if backend in ("python", "cython") else kernels.BACKEND) if parts is not None else "generic",
        "track_logdet": bool(track_logdet),
    }
    manifest.update(schedule.describe())
    manifest.update(field.describe())
    if reports:
        worst = min(reports, key=lambda r: r.h_max_allowed - r.h)
        manifest.update(guard_branch=worst.branch, guard_h_max=worst.h_max_allowed,
                        guard_violations=sum(r.violated for r in reports))
    if n_failed > fail_fraction * n:
        raise NumericFailure(f"{n_failed} of {n} trajectories failed", residual=n_failed / n)
    return BatchResult(points, logdet, failed, manifest)


def dump_points(path, manifold, points):
    """Binary dump: 16-byte header (magic, version, dim, count) then float64 LE data."""
    points = np.asarray(points, dtype="<f8")
    count = points.shape[0]
    dim = manifold.d if hasattr(manifold, "d") else manifold.n
    header = DUMP_MAGIC[manifold.kind] + struct.pack("<III", DUMP_VERSION, dim, count)
    data = header + points.reshape(count, -1).tobytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_points(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:4]
    version, dim, count = struct.unpack("<III", data[4:16])
    kind = {v: k for k, v in DUMP_MAGIC.items()}.get(magic)
    if kind is None or version != DUMP_VERSION:
        raise InvalidArgument("not a sample dump")
    arr = np.frombuffer(data[16:], dtype="<f8")
    shape = {"sphere": (dim + 1,), "spd": (dim, dim), "euclidean": (dim,)}[kind]
    return kind, arr.reshape((count,) + shape)


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        for k in sorted(manifest):
            fh.write(f"{k}={_fmt(manifest[k])}\n")


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k] = v
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
