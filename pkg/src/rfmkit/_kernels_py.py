"""Pure-numpy implementation of the hot kernels (fallback backend)."""
import math

import numpy as np


def _sinc(n):
    out = np.ones_like(n)
    small = np.abs(n) < 1e-4
    n2 = n[small] ** 2
    out[small] = 1.0 - n2 / 6.0 + n2 * n2 / 120.0
    out[~small] = np.sin(n[~small]) / n[~small]
    return out


def _advance(x, v, dv, h, track):
    """``Exp_x(h v)`` row-wise and, if ``track``, ``log|det|`` of the step map."""
    D = x.shape[1]
    eye = np.eye(D)
    w = h * v
    nw = np.linalg.norm(w, axis=1)
    cn = np.cos(nw)
    sc = _sinc(nw)
    y = cn[:, None] * x + sc[:, None] * w
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    if not track:
        return y, 0.0
    proj = eye - x[:, :, None] * x[:, None, :]
    safe = np.where(nw > 1e-300, nw, 1.0)
    wh = np.where((nw > 1e-300)[:, None], w / safe[:, None], 0.0)
    dE = (-np.sin(nw)[:, None, None] * x[:, :, None] * wh[:, None, :]
          + sc[:, None, None] * eye
          + (cn - sc)[:, None, None] * wh[:, :, None] * wh[:, None, :])
    jac = cn[:, None, None] * eye + h * dE @ dv
    full = jac @ proj + y[:, :, None] * x[:, None, :]
    return y, np.linalg.slogdet(full)[1]


def affine_euler(x, logdet, coefs, steps, b, A, c, M, track):
    """Run Euler steps of the sphere field ``P g / Z + P(c + M x)`` in place.

    ``g = a1 b + 2 a2 A x`` and ``Z = 1 + c1 b.x + c2 x^T A x``; row ``k`` of
    ``coefs`` holds ``(c1, c2, a1, a2)`` at the start time of step ``k``.
    When ``track`` is true, ``logdet`` accumulates ``log|det dF|`` of each
    step map ``F(x) = Exp_x(h v(x))``.
    """
    D = x.shape[1]
    eye = np.eye(D)
    for k in range(len(steps)):
        c1, c2, a1, a2 = coefs[k]
        Ax = x @ A.T
        z = 1.0 + c1 * (x @ b) + c2 * np.sum(x * Ax, axis=1)
        g = a1 * b + 2.0 * a2 * Ax
        gp = c + x @ M.T
        xg = np.sum(x * g, axis=1)
        xgp = np.sum(x * gp, axis=1)
        pg = g - xg[:, None] * x
        v = pg / z[:, None] + gp - xgp[:, None] * x
        dv = None
        if track:
            proj = eye - x[:, :, None] * x[:, None, :]
            dz = c1 * b + 2.0 * c2 * Ax
            dpg = proj @ (2.0 * a2 * A) - xg[:, None, None] * eye - x[:, :, None] * g[:, None, :]
            dv = dpg / z[:, None, None] - pg[:, :, None] * dz[:, None, :] / (z * z)[:, None, None]
            dv += proj @ M - xgp[:, None, None] * eye - x[:, :, None] * gp[:, None, :]
        y, ld = _advance(x, v, dv, steps[k], track)
        logdet += ld
        x[:] = y
    return x, logdet


def _dlogj_over_r(d, s, r):
    small = r < 1e-3
    rr = np.where(small, 1.0, r)
    full = (d - 1) * (1.0 / (s * np.tan(rr / s)) - 1.0 / np.tan(rr)) / rr
    series = (d - 1) * ((1.0 - 1.0 / s ** 2) / 3.0 + r * r * (1.0 - 1.0 / s ** 4) / 45.0)
    return np.where(small, series, full)


def atomic_euler(x, logdet, failed, atoms, logweights, times, track):
    """Euler steps of the exact field of a finite atom target, in place.

    ``times`` is the full grid (``N + 1`` nodes).  Trajectories whose point
    leaves the support of every atom are flagged in ``failed`` and set to
    NaN.
    """
    n, D = x.shape
    d = D - 1
    eye = np.eye(D)
    alive = ~failed.astype(bool)
    for k in range(len(times) - 1):
        s = 1.0 - times[k]
        h = times[k + 1] - times[k]
        xa = x[alive]
        c = np.clip(xa @ atoms.T, -1.0, 1.0)
        r = np.arccos(c)
        inside = r < s * math.pi
        rr = np.where(inside, r, 0.0)
        with np.errstate(divide="ignore"):
            lj = 0.0 if s == 1.0 else ((d - 1) * (np.log(_sinc(rr / s)) - np.log(_sinc(rr)) - math.log(s))
                                       - math.log(s))
        lw = np.where(inside, logweights + lj, -np.inf)
        top = lw.max(axis=1)
        dead = ~np.isfinite(top)
        if np.any(dead):
            idx = np.flatnonzero(alive)[dead]
            failed[idx] = 1
            alive[idx] = False
            xa, c, r, lw, top = xa[~dead], c[~dead], r[~dead], lw[~dead], top[~dead]
        q = np.exp(lw - top[:, None])
        q /= q.sum(axis=1, keepdims=True)
        gr = 1.0 / _sinc(r)
        diff = atoms[None] - c[:, :, None] * xa[:, None, :]
        v = np.einsum("nk,nki->ni", q * gr, diff) / s
        dv = None
        if track:
            ak = np.where(q > 0, -_dlogj_over_r(d, s, r) * gr, 0.0)
            gl = np.einsum("nk,ki->ni", q * ak, atoms)
            small = r < 1e-3
            sn = np.sin(np.where(small, 1.0, r))
            gps = np.where(small, 1.0 / 3.0 + 2.0 * r * r / 15.0, (sn - r * np.cos(r)) / sn ** 3)
            centred = ak[:, :, None] * atoms[None] - gl[:, None, :]
            dv = (np.einsum("nk,nki,nkj->nij", q * gr, diff, centred)
                  - np.einsum("nk,nki,kj->nij", q * gps, diff, atoms)
                  - np.einsum("nk,ni,kj->nij", q * gr, xa, atoms)
                  - np.sum(q * gr * c, axis=1)[:, None, None] * eye) / s
        y, ld = _advance(xa, v, dv, h, track)
        x[alive] = y
        logdet[alive] += ld
    x[failed.astype(bool)] = np.nan
    logdet[failed.astype(bool)] = np.nan
    return x, logdet


def _log_sinhc(a):
    a = np.abs(a)
    small = a < 1e-3
    a2 = a * a
    safe = np.where(small, 1.0, a)
    big = safe - np.log(2.0 * safe) + np.log1p(-np.exp(-2.0 * safe))
    return np.where(small, a2 / 6.0 - a2 * a2 / 180.0, big)


def _eig2(a, b, c):
    m = 0.5 * (a + c)
    hi = m + np.hypot(0.5 * (a - c), b)
    th = 0.5 * np.arctan2(2.0 * b, a - c)
    return (a * c - b * b) / hi, hi, np.cos(th), np.sin(th)


def _sandwich(s, flo, fhi, cs, sn):
    m00 = flo * sn * sn + fhi * cs * cs
    m11 = flo * cs * cs + fhi * sn * sn
    m01 = (fhi - flo) * cs * sn
    s0, s1_, s2 = s[..., 0], s[..., 1], s[..., 2]
    p00, p01 = s0 * m00 + s1_ * m01, s0 * m01 + s1_ * m11
    p10, p11 = s1_ * m00 + s2 * m01, s1_ * m01 + s2 * m11
    return np.stack([p00 * s0 + p01 * s1_, p00 * s1_ + p01 * s2, p10 * s1_ + p11 * s2], axis=-1)


def spd2_importance(t, x, s1, si, beta, out, ess):
    sv = 1.0 - t
    e = 1.0 / sv
    for p in range(len(x)):
        a, b, c = x[p]
        s0, s_1, s2 = si[:, 0], si[:, 1], si[:, 2]
        w0 = (s0 * a + s_1 * b) * s0 + (s0 * b + s_1 * c) * s_1
        w1 = (s0 * a + s_1 * b) * s_1 + (s0 * b + s_1 * c) * s2
        w2 = (s_1 * a + s2 * b) * s_1 + (s_1 * b + s2 * c) * s2
        lo, hi, cs, sn = _eig2(w0, w1, w2)
        ok = lo > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            l1, l2 = np.log(lo), np.log(hi)
            psi = _sandwich(s1, np.exp(l1 * e), np.exp(l2 * e), cs, sn)
            mlo, mhi, _, _ = _eig2(psi[:, 0], psi[:, 1], psi[:, 2])
            lw = (-beta * (np.log(mlo) ** 2 + np.log(mhi) ** 2) - 3.0 * math.log(sv)
                  + _log_sinhc(0.5 * (l2 - l1) * e) - _log_sinhc(0.5 * (l2 - l1)))
        lw = np.where(ok, lw, -np.inf)
        if not np.any(ok):
            out[p] = 0.0
            ess[p] = 0.0
            continue
        wk = np.exp(lw - lw.max())
        logs = _sandwich(s1, np.where(ok, -lo * l1, 0.0), np.where(ok, -hi * l2, 0.0), cs, sn)
        out[p] = wk @ logs / (wk.sum() * sv)
        ess[p] = wk.sum() ** 2 / np.sum(wk * wk)
    return out, ess
