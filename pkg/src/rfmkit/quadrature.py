"""Quadrature rules on spheres and radial expectations.

All rules are plain ``(nodes, weights)`` pairs built from scipy's Gauss
rules.  They are cached because tests and experiments reuse the same sizes
many times.
"""
from functools import lru_cache
import math

import numpy as np
from scipy.special import betainc, roots_gegenbauer, roots_legendre

from .errors import InvalidArgument


def sphere_volume(d):
    """Volume of the unit sphere S^d in R^{d+1}."""
    return 2.0 * math.pi ** ((d + 1) / 2) / math.gamma((d + 1) / 2)


@lru_cache(maxsize=64)
def radial_rule(d, n):
    """Gauss-Legendre rule on ``[0, pi]`` against the weight ``sin^{d-1}(u)``.

    Returns nodes ``u`` and weights that sum to ``Vol(S^d) / Vol(S^{d-1})``.
    """
    z, w = roots_legendre(n)
    u = 0.5 * math.pi * (z + 1.0)
    w = 0.5 * math.pi * w * np.sin(u) ** (d - 1)
    u.setflags(write=False)
    w.setflags(write=False)
    return u, w


def radial_expectation(d, fn, n=200):
    """``E[fn(U)]`` for ``U`` with density proportional to ``sin^{d-1}(u)`` on ``[0, pi]``."""
    u, w = radial_rule(d, n)
    vals = fn(u)
    return np.tensordot(vals, w, axes=([-1], [0])) / w.sum()


@lru_cache(maxsize=64)
def sphere_rule(d, n):
    """Product rule on S^d in R^{d+1} with about ``n`` nodes per polar angle.

    S^1 uses the ``2n``-point trapezoid rule; higher spheres add one polar
    coordinate at a time with a Gauss-Gegenbauer rule in ``cos(theta)``.
    Weights sum to ``Vol(S^d)``.
    """
    if d < 1:
        raise InvalidArgument("sphere dimension must be >= 1")
    m = 2 * n
    phi = 2.0 * math.pi * np.arange(m) / m
    pts = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    wts = np.full(m, 2.0 * math.pi / m)
    for k in range(2, d + 1):
        # S^k from S^{k-1}: x = (z, sqrt(1 - z^2) * omega), weight (1-z^2)^{(k-2)/2}
        if k == 2:
            z, wz = roots_legendre(n)
        else:
            z, wz = roots_gegenbauer(n, (k - 1) / 2.0)
        rad = np.sqrt(1.0 - z * z)
        pts = np.concatenate(
            [np.repeat(z, len(pts))[:, None], (rad[:, None, None] * pts[None]).reshape(-1, k)], axis=1)
        wts = (wz[:, None] * wts[None]).reshape(-1)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def fibonacci_sphere(n):
    """``n`` quasi-uniform points on S^2 (spherical Fibonacci lattice)."""
    if n < 1:
        raise InvalidArgument("need at least one point")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * np.arange(n)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def polar_nodes(sphere, x, t, n_radial, n_angular):
    """Points ``y = cos(r) x + sin(r) w`` around ``x`` with ``r = (1 - t) u``.

    The weight of each node is ``sin^{d-1}(u) du dw``, which equals
    ``J_t(r) sin^{d-1}(r) dr dw``.  So for any ``f``,
    ``sum(w * f(y)) = int f(x1) J_t(x | x1) dV(x1)``.

    Returns ``(y, u, omega, w)`` with shapes ``(..., K, D)``, ``(K,)``,
    ``(..., K, D)`` and ``(K,)``.
    """
    d = sphere.d
    u, wu = radial_rule(d, n_radial)
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
        wd = np.array([1.0, 1.0])
    else:
        dirs, wd = sphere_rule(d - 1, n_angular)
    frame = sphere.frame(x)                           # (..., d, D)
    omega = np.einsum("kd,...dD->...kD", dirs, frame)  # (..., A, D)
    r = (1.0 - t) * u
    xs = np.asarray(x)[..., None, None, :]
    y = np.cos(r)[:, None, None] * xs + np.sin(r)[:, None, None] * omega[..., None, :, :]
    shape = y.shape[:-3] + (len(u) * len(wd), y.shape[-1])
    y = y.reshape(shape)
    y = y / np.linalg.norm(y, axis=-1, keepdims=True)
    om = np.broadcast_to(omega[..., None, :, :], y.shape[:-2] + (len(u), len(wd), y.shape[-1])).reshape(shape)
    uu = np.repeat(u, len(wd))
    w = (wu[:, None] * wd[None, :]).reshape(-1)
    return y, uu, om, w


def cap_fraction(d, radius):
    """Fraction of the volume of S^d within geodesic distance ``radius`` of a point."""
    if radius >= math.pi:
        return 1.0
    half = 0.5 * betainc(d / 2.0, 0.5, math.sin(min(radius, math.pi / 2)) ** 2)
    return half if radius <= math.pi / 2 else 1.0 - 0.5 * betainc(d / 2.0, 0.5, math.sin(radius) ** 2)
