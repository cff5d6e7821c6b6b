"""Analytic perturbations standing in for a learned field.

Each mode controls the deviation exactly:

* ``uniform_rotation``: Killing field ``eps W x`` of a plane rotation; norm
  at most ``eps``, covariant derivative of norm ``eps``, divergence zero.
* ``uniform_additive``: pointwise norm exactly ``eps``.  On odd-dimensional
  spheres this is the Hopf field ``eps J x`` (``J`` a complex structure), which
  is also Killing.  Even-dimensional spheres have no nonvanishing field, so
  there a fixed template vector is parallel transported from a base point;
  that field is singular at the antipode of the base point.  On SPD(n) the
  field is ``eps X^{1/2} E X^{1/2}`` with ``|E|_F = 1``.
* ``mean_square``: a random low-frequency field scaled so that
  ``E |u|^2 = eps^2`` under the uniform law (sphere) or exactly at every
  point (SPD).
"""
import math

import numpy as np

from ..errors import InvalidArgument
from ..geometry import SPD, Sphere, sym_sqrtm
from .. import rng as rngmod
from .fields import PerturbedField, VelocityField

MODES = ("uniform_rotation", "uniform_additive", "mean_square")


class AffineSpherePerturbation(VelocityField):
    """``u(x) = P_x(c + M x)`` on the sphere, with its ambient jacobian."""

    variant = "perturbation"

    def __init__(self, sphere, c, M):
        super().__init__(sphere)
        self.c = np.asarray(c, dtype=float)
        self.M = np.asarray(M, dtype=float)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.manifold.project_tangent(x, self.c + x @ self.M.T)

    @property
    def has_jacobian(self):
        return True

    def ambient_jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        D = x.shape[-1]
        g = self.c + x @ self.M.T
        xg = np.sum(x * g, axis=-1)
        proj = np.eye(D) - x[..., :, None] * x[..., None, :]
        return proj @ self.M - xg[..., None, None] * np.eye(D) - x[..., :, None] * g[..., None, :]


class TransportedTemplate(VelocityField):
    """``eps P_{x0 -> x} tau`` for a fixed unit ``tau`` at ``x0``."""

    variant = "perturbation"

    def __init__(self, sphere, x0, tau):
        super().__init__(sphere)
        self.x0 = np.asarray(x0, dtype=float)
        self.tau = np.asarray(tau, dtype=float)

    def __call__(self, t, x):
        return self.manifold.transport(self.x0, x, np.broadcast_to(self.tau, np.shape(x)))


class SpdScaledTemplate(VelocityField):
    """``X^{1/2} E X^{1/2}``, metric norm equal to ``|E|_F`` at every ``X``."""

    variant = "perturbation"

    def __init__(self, spd, E):
        super().__init__(spd)
        self.E = np.asarray(E, dtype=float)

    def __call__(self, t, x):
        s = sym_sqrtm(x)
        return s @ self.E @ s


def rotation_generator(D, i=0, j=1):
    W = np.zeros((D, D))
    W[i, j], W[j, i] = -1.0, 1.0
    return W


def hopf_generator(D):
    """Complex structure pairing coordinates ``(0,1), (2,3), ...``; needs even ``D``."""
    if D % 2:
        raise InvalidArgument("Hopf field needs an even ambient dimension")
    J = np.zeros((D, D))
    for k in range(0, D, 2):
        J[k, k + 1], J[k + 1, k] = -1.0, 1.0
    return J


def mean_square_scale(c, M):
    """``E |P_x(c + M x)|^2`` for ``x`` uniform on the unit sphere of ``R^D``."""
    D = len(c)
    S = 0.5 * (M + M.T)
    e_g = c @ c + np.sum(M * M) / D
    e_xg = c @ c / D + (np.trace(S) ** 2 + 2.0 * np.sum(S * S)) / (D * (D + 2))
    return e_g - e_xg


def make_perturbation(manifold, eps, mode, seed=0):
    """Build the perturbation field of size ``eps`` for ``manifold``."""
    if mode not in MODES:
        raise InvalidArgument(f"unknown perturbation mode {mode!r}")
    if not np.isfinite(eps) or eps < 0:
        raise InvalidArgument("eps must be finite and nonnegative")
    if isinstance(manifold, Sphere):
        D = manifold.d + 1
        if mode == "uniform_rotation":
            return AffineSpherePerturbation(manifold, np.zeros(D), eps * rotation_generator(D))
        if mode == "uniform_additive":
            if D % 2 == 0:
                return AffineSpherePerturbation(manifold, np.zeros(D), eps * hopf_generator(D))
            x0 = np.zeros(D)
            x0[-1] = 1.0
            tau = np.zeros(D)
            tau[0] = eps
            return TransportedTemplate(manifold, x0, tau)
        g = rngmod.stream(seed, rngmod.PERTURB)
        c = g.standard_normal(D)
        M = g.standard_normal((D, D))
        scale = eps / math.sqrt(mean_square_scale(c, M))
        return AffineSpherePerturbation(manifold, scale * c, scale * M)
    if isinstance(manifold, SPD):
        n = manifold.n
        if mode == "uniform_rotation":
            raise InvalidArgument("uniform_rotation is only defined on spheres")
        if mode == "uniform_additive":
            E = np.eye(n) / math.sqrt(n)
        else:
            g = rngmod.stream(seed, rngmod.PERTURB).standard_normal((n, n))
            E = 0.5 * (g + g.T)
            E /= np.linalg.norm(E)
        return SpdScaledTemplate(manifold, eps * E)
    raise InvalidArgument(f"perturbations are not defined on {manifold!r}")


def perturb_field(base, eps, mode, seed=0):
    """The "learned" field ``base + perturbation`` with deviation ``eps``.

    ``eps = 0`` returns ``base`` itself, so evaluations are bit-identical.
    """
    pert = make_perturbation(base.manifold, eps, mode, seed)
    if eps == 0:
        return base
    return PerturbedField(base, pert, eps, mode)
