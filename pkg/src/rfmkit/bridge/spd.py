"""Geodesic bridge on SPD(n) with the affine-invariant metric.

Conventions: densities are with respect to the Riemannian volume
``det(X)^{-(n+1)/2} dX``.  The bridge starts from a Riemannian Gaussian
prior around the identity; the population field is estimated by
self-normalised importance sampling over a fixed bank of target draws.
"""
import math

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import wishart

from ..errors import DomainError, InvalidArgument, NumericFailure
from ..geometry import SPD, model_function_s, sym_eigh, sym_eigvalsh, sym_expm, sym_invsqrtm, sym_sqrtm
from .. import rng as rngmod
from .fields import VelocityField, check_time


def log_sinhc(a):
    """``log(sinh(a)/a)`` for ``a >= 0``, stable for tiny and huge ``a``."""
    a = np.abs(np.asarray(a, dtype=float))
    out = np.empty_like(a)
    small = a < 1e-3
    a2 = a[small] ** 2
    out[small] = a2 / 6.0 - a2 * a2 / 180.0
    big = ~small
    ab = a[big]
    out[big] = ab - np.log(2.0 * ab) + np.log1p(-np.exp(-2.0 * ab))
    return out


def _pair_sum(lam):
    """Sum of ``log_sinhc((l_i - l_j)/2)`` over pairs ``i < j``."""
    n = lam.shape[-1]
    iu = np.triu_indices(n, 1)
    diff = lam[..., :, None] - lam[..., None, :]
    return np.sum(log_sinhc(0.5 * diff[..., iu[0], iu[1]]), axis=-1)


def spd_log_jacobian(x1, v):
    """``log |det (dExp_{x1})_v|`` on SPD(n).

    Depends only on the eigenvalues ``l_i`` of ``x1^{-1/2} v x1^{-1/2}``:
    each off-diagonal direction ``(i, j)`` is a Jacobi field of curvature
    ``-(l_i - l_j)^2 / 4`` and contributes ``log(sinh(a)/a)``, ``a = |l_i - l_j|/2``.
    """
    si = sym_invsqrtm(x1)
    return _pair_sum(sym_eigvalsh(si @ v @ si))


class RiemannianGaussianPrior:
    """Density ``exp(-beta d(x, I)^2) / Z`` on SPD(n); ``beta = n(n+1)/2`` by default.

    Sampling: Gaussian tangent vectors at ``I`` with a wider variance are
    pushed through ``Exp_I`` and accepted with probability proportional to
    ``det(dExp) exp(-(beta - beta') r^2)``.  ``det(dExp) <= (s_K(r)/r)^{d-1}``
    with ``K = -1/2`` certifies the acceptance bound.
    """

    kind = "spd_riemannian_gaussian"

    def __init__(self, n, beta=None, proposal_ratio=0.5):
        self.n = int(n)
        self.manifold = SPD(self.n)
        self.beta = float(beta) if beta is not None else self.n * (self.n + 1) / 2.0
        if not self.beta > 0:
            raise InvalidArgument("beta must be positive")
        self.beta_prop = proposal_ratio * self.beta
        d = self.manifold.dim
        k = self.manifold.descriptor.k_min

        def neg_log_env(r):
            s = model_function_s(k, r)[0] if k < 0 else r
            return -((d - 1) * (math.log(s / r) if r > 0 else 0.0) - (self.beta - self.beta_prop) * r * r)

        res = minimize_scalar(neg_log_env, bounds=(1e-9, 50.0), method="bounded")
        grid = np.linspace(1e-6, 20.0, 4001)
        vals = [-neg_log_env(r) for r in grid]
        self.log_bound = max(-res.fun, max(vals)) + 1e-9

    def log_density(self, x):
        """Unnormalised ``-beta d(x, I)^2``."""
        lam = sym_eigvalsh(np.asarray(x))
        return -self.beta * np.sum(np.log(lam) ** 2, axis=-1)

    def sample(self, rng, size):
        m = self.manifold
        out = []
        have = 0
        sd = 1.0 / math.sqrt(2.0 * self.beta_prop)
        while have < size:
            k = max(2 * (size - have), 256)
            c = sd * rng.standard_normal((k, m.dim))
            v = np.einsum("kd,dij->kij", c, m._basis)
            r2 = np.sum(c * c, axis=-1)
            logdet = _pair_sum(sym_eigvalsh(v))
            log_acc = logdet - (self.beta - self.beta_prop) * r2 - self.log_bound
            if np.any(log_acc > 1e-9):
                raise NumericFailure("rejection envelope violated")
            keep = np.log(rng.random(k)) < log_acc
            out.append(sym_expm(v[keep]))
            have += int(keep.sum())
        return np.concatenate(out)[:size]

    def describe(self):
        return {"prior": self.kind, "beta": self.beta}


class WishartTarget:
    """``X1 = W / dof`` with ``W ~ Wishart(dof, I)``; concentrates at ``I`` as dof grows."""

    name = "wishart"

    def __init__(self, n, dof):
        self.n = int(n)
        self.dof = float(dof)
        if self.dof <= self.n - 1:
            raise InvalidArgument("dof must exceed n - 1")
        self.manifold = SPD(self.n)
        self._dist = wishart(df=self.dof, scale=np.eye(self.n) / self.dof)

    def sample(self, rng, size):
        x = self._dist.rvs(size=size, random_state=rng)
        return np.asarray(x).reshape(size, self.n, self.n)

    def log_density(self, x):
        """Log density with respect to the Riemannian volume."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.n, self.n)
        lp = np.array([self._dist.logpdf(xi) for xi in flat])
        _, logdet = np.linalg.slogdet(flat)
        return (lp + 0.5 * (self.n + 1) * logdet).reshape(x.shape[:-2])

    def describe(self):
        return {"target": self.name, "dof": self.dof}


def moment_condition(target_samples, lam=24.0):
    """Empirical ``max{E[d^2 e^{lam d}], E[e^{lam d}]}`` with ``d = d(X1, I)``."""
    lamv = sym_eigvalsh(target_samples)
    dist = np.sqrt(np.sum(np.log(lamv) ** 2, axis=-1))
    e = np.exp(lam * dist)
    return {"lambda1": lam, "E_d2_exp": float(np.mean(dist ** 2 * e)),
            "E_exp": float(np.mean(e)), "M": float(max(np.mean(dist ** 2 * e), np.mean(e)))}


def _whiten(x1, x, si=None):
    """Eigen-decomposition of ``x1^{-1/2} x x1^{-1/2}`` (broadcast over both)."""
    if si is None:
        si = sym_invsqrtm(x1)
    lam, U = sym_eigh(si @ x @ si)
    return si, lam, U


def psi_map(t, x1, x, roots=None):
    """``Exp_{x1}(Log_{x1}(x) / (1 - t))``: the prior point that reaches ``x`` at time ``t``.

    ``roots`` optionally supplies precomputed ``(x1^{1/2}, x1^{-1/2})``.
    """
    if t >= 1.0:
        raise DomainError("psi needs t < 1")
    s1, si = roots if roots is not None else (sym_sqrtm(x1), sym_invsqrtm(x1))
    _, lam, U = _whiten(x1, x, si)
    inner = (U * lam[..., None, :] ** (1.0 / (1.0 - t))) @ np.swapaxes(U, -1, -2)
    return s1 @ inner @ s1


def spd_log_Jt(n, t, x1, x, si=None):
    """``log J_t(x | x1)`` for the SPD bridge."""
    d = n * (n + 1) // 2
    s = 1.0 - t
    _, lam, _ = _whiten(x1, x, si)
    ll = np.log(lam)
    return -d * math.log(s) + _pair_sum(ll / s) - _pair_sum(ll)


def spd_conditional_log_density(target, prior, t, x, x1):
    """Unnormalised ``log p1(x1) + log p0(Psi(x)) + log J_t(x | x1)``."""
    if t >= 1.0:
        raise DomainError("conditional density needs t < 1")
    n = np.shape(x)[-1]
    return (target.log_density(x1) + prior.log_density(psi_map(t, x1, x))
            + spd_log_Jt(n, t, x1, x))


def _pack2(m):
    return np.stack([m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]], axis=-1)


class SpdImportanceField(VelocityField):
    """Population velocity on SPD(n) by self-normalised importance sampling.

    Proposals are a fixed bank of target draws (so the field is a smooth
    deterministic function of ``(t, x)`` for a given seed); each bank point
    ``x1`` gets weight ``p0(Psi_{t,x1}(x)) J_t(x | x1)``.  An effective
    sample size below ``ess_floor`` raises ``NumericFailure``.
    """

    variant = "population"

    def __init__(self, target, prior, n_bank=4000, seed=0, ess_floor=50.0, chunk=64):
        super().__init__(SPD(target.n))
        self.target = target
        self.prior = prior
        self.n_bank = int(n_bank)
        self.seed = int(seed)
        self.ess_floor = float(ess_floor)
        self.chunk = int(chunk)
        self.bank = target.sample(rngmod.stream(seed, rngmod.IMPORTANCE), self.n_bank)
        self._roots = (sym_sqrtm(self.bank), sym_invsqrtm(self.bank))
        self._packed = tuple(np.ascontiguousarray(_pack2(r)) for r in self._roots) if target.n == 2 else None
        self.last_min_ess = math.inf

    def weights(self, t, x):
        """Normalised weights, shape ``(..., n_bank)``, and the ESS per point."""
        x = np.asarray(x, dtype=float)
        xb = x[..., None, :, :]
        logw = (self.prior.log_density(psi_map(t, self.bank, xb, self._roots))
                + spd_log_Jt(self.target.n, t, self.bank, xb, self._roots[1]))
        logw -= logw.max(axis=-1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=-1, keepdims=True)
        ess = 1.0 / np.sum(w * w, axis=-1)
        return w, ess

    def __call__(self, t, x, compiled=True):
        t = check_time(t)
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.target.n, self.target.n)
        if compiled and self._packed is not None:
            return self._call_packed(t, flat).reshape(x.shape)
        out = np.empty_like(flat)
        for i in range(0, len(flat), self.chunk):
            xc = flat[i:i + self.chunk]
            w, ess = self.weights(t, xc)
            self.last_min_ess = min(self.last_min_ess, float(ess.min()))
            if np.any(ess < self.ess_floor):
                raise NumericFailure(
                    f"importance sampling ESS {float(ess.min()):.1f} below floor {self.ess_floor}",
                    residual=float(ess.min()))
            logs = self.manifold.log(xc[:, None], self.bank[None])
            out[i:i + self.chunk] = np.einsum("bk,bkij->bij", w, logs) / (1.0 - t)
        return out.reshape(x.shape)

    def _call_packed(self, t, flat):
        from .. import kernels
        n = len(flat)
        v, ess = kernels.spd2_importance(t, np.ascontiguousarray(_pack2(flat)), self._packed[0],
                                         self._packed[1], self.prior.beta, np.empty((n, 3)), np.empty(n))
        self.last_min_ess = min(self.last_min_ess, float(ess.min()))
        if np.any(ess < self.ess_floor):
            raise NumericFailure(
                f"importance sampling ESS {float(ess.min()):.1f} below floor {self.ess_floor}",
                residual=float(ess.min()))
        return np.stack([np.stack([v[:, 0], v[:, 1]], -1), np.stack([v[:, 1], v[:, 2]], -1)], -2)

    def describe(self):
        out = {"field": "spd_importance", "variant": self.variant, "n_bank": self.n_bank,
               "ess_floor": self.ess_floor, "bank_seed": self.seed}
        out.update(self.target.describe())
        out.update(self.prior.describe())
        return out
