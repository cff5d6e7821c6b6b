# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Euler loops for sphere fields with closed-form jacobians (see _kernels_py)."""
from libc.math cimport cos, sin, sqrt, log, fabs, acos, atan2, exp, INFINITY, NAN, M_PI
import numpy as np

cdef enum:
    MAXD = 16


cdef inline double _sinc(double n) noexcept nogil:
    cdef double n2
    if fabs(n) < 1e-4:
        n2 = n * n
        return 1.0 - n2 / 6.0 + n2 * n2 / 120.0
    return sin(n) / n


cdef double _logabsdet(double* a, int D) noexcept nogil:
    """log|det a| (row stride MAXD) by LU with partial pivoting; destroys ``a``."""
    cdef int i, j, k, p
    cdef double best, tmp, f, acc = 0.0
    for k in range(D):
        p = k
        best = fabs(a[k * MAXD + k])
        for i in range(k + 1, D):
            if fabs(a[i * MAXD + k]) > best:
                best = fabs(a[i * MAXD + k])
                p = i
        if best == 0.0:
            return -INFINITY
        if p != k:
            for j in range(D):
                tmp = a[k * MAXD + j]
                a[k * MAXD + j] = a[p * MAXD + j]
                a[p * MAXD + j] = tmp
        acc += log(fabs(a[k * MAXD + k]))
        for i in range(k + 1, D):
            f = a[i * MAXD + k] / a[k * MAXD + k]
            for j in range(k + 1, D):
                a[i * MAXD + j] -= f * a[k * MAXD + j]
    return acc


cdef double _advance(double* x, double* v, double* dv, double h, int D, bint track) noexcept nogil:
    """Replace ``x`` by ``Exp_x(h v)``; return ``log|det|`` of the step map if ``track``.

    ``dv`` is the ambient jacobian of ``v`` (row stride MAXD).
    """
    cdef int i, j, k
    cdef double w[MAXD]
    cdef double wh[MAXD]
    cdef double y[MAXD]
    cdef double q[MAXD]
    cdef double full[MAXD * MAXD]
    cdef double nw = 0.0, cn, sn, sc, ny = 0.0, acc, jij, out = 0.0
    for i in range(D):
        w[i] = h * v[i]
        nw += w[i] * w[i]
    nw = sqrt(nw)
    cn = cos(nw)
    sn = sin(nw)
    sc = _sinc(nw)
    for i in range(D):
        y[i] = cn * x[i] + sc * w[i]
        ny += y[i] * y[i]
    ny = sqrt(ny)
    for i in range(D):
        y[i] /= ny
    if track:
        for i in range(D):
            wh[i] = w[i] / nw if nw > 1e-300 else 0.0
        # d Exp = sc I - sn x wh^T + (cn - sc) wh wh^T, applied to dv through q = wh^T dv
        for j in range(D):
            acc = 0.0
            for k in range(D):
                acc += wh[k] * dv[k * MAXD + j]
            q[j] = acc
        # full = jac (I - x x^T) + y x^T with jac = cn I + h dExp dv
        for i in range(D):
            acc = 0.0
            for k in range(D):
                jij = h * (sc * dv[i * MAXD + k] - sn * x[i] * q[k] + (cn - sc) * wh[i] * q[k])
                if i == k:
                    jij += cn
                full[i * MAXD + k] = jij
                acc += jij * x[k]
            for j in range(D):
                full[i * MAXD + j] += (y[i] - acc) * x[j]
        out = _logabsdet(full, D)
    for i in range(D):
        x[i] = y[i]
    return out


def affine_euler(double[:, ::1] x, double[::1] logdet, double[:, ::1] coefs, double[::1] steps,
                 double[::1] b, double[:, ::1] A, double[::1] c, double[:, ::1] M, bint track):
    cdef Py_ssize_t n = x.shape[0], s, N = steps.shape[0]
    cdef int D = x.shape[1]
    cdef int i, j, k, step
    cdef double c1, c2, a1, a2, z, xg, xgp, bx, xAx, acc
    cdef double xs[MAXD]
    cdef double Ax[MAXD]
    cdef double g[MAXD]
    cdef double gp[MAXD]
    cdef double pg[MAXD]
    cdef double v[MAXD]
    cdef double dz[MAXD]
    cdef double r[MAXD]
    cdef double dv[MAXD * MAXD]
    if D > MAXD:
        raise ValueError("ambient dimension too large for the compiled kernel")
    with nogil:
        for s in range(n):
            for i in range(D):
                xs[i] = x[s, i]
            for step in range(N):
                c1 = coefs[step, 0]
                c2 = coefs[step, 1]
                a1 = coefs[step, 2]
                a2 = coefs[step, 3]
                bx = 0.0
                xAx = 0.0
                for i in range(D):
                    acc = 0.0
                    for j in range(D):
                        acc = acc + A[i, j] * xs[j]
                    Ax[i] = acc
                    bx = bx + b[i] * xs[i]
                    xAx = xAx + xs[i] * acc
                z = 1.0 + c1 * bx + c2 * xAx
                xg = 0.0
                xgp = 0.0
                for i in range(D):
                    g[i] = a1 * b[i] + 2.0 * a2 * Ax[i]
                    acc = c[i]
                    for j in range(D):
                        acc = acc + M[i, j] * xs[j]
                    gp[i] = acc
                    xg = xg + xs[i] * g[i]
                    xgp = xgp + xs[i] * gp[i]
                for i in range(D):
                    pg[i] = g[i] - xg * xs[i]
                    v[i] = pg[i] / z + gp[i] - xgp * xs[i]
                if track:
                    for i in range(D):
                        dz[i] = c1 * b[i] + 2.0 * c2 * Ax[i]
                    # dv = P Q - (xg / z + xgp) I - x (g / z + gp)^T - pg dz^T / z^2,  Q = 2 a2 A / z + M
                    for j in range(D):
                        acc = 0.0
                        for k in range(D):
                            acc = acc + xs[k] * (2.0 * a2 * A[k, j] / z + M[k, j])
                        r[j] = acc + g[j] / z + gp[j]
                    for i in range(D):
                        for j in range(D):
                            dv[i * MAXD + j] = (2.0 * a2 * A[i, j] / z + M[i, j] - xs[i] * r[j]
                                                - pg[i] * dz[j] / (z * z))
                        dv[i * MAXD + i] -= xg / z + xgp
                logdet[s] += _advance(xs, v, dv, steps[step], D, track)
            for i in range(D):
                x[s, i] = xs[i]
    return np.asarray(x), np.asarray(logdet)


def atomic_euler(double[:, ::1] x, double[::1] logdet, unsigned char[::1] failed,
                 double[:, ::1] atoms, double[::1] logweights, double[::1] times, bint track):
    cdef Py_ssize_t n = x.shape[0], s, N = times.shape[0] - 1
    cdef int D = x.shape[1], K = atoms.shape[0], d = D - 1
    cdef int i, j, k, step
    cdef double sv, h, top, tot, cc, rr, sr, aa, sa, ca, lw, gk, acc, gbar_c, ak, gps, qk
    cdef double xs[MAXD]
    cdef double v[MAXD]
    cdef double gl[MAXD]
    cdef double dv[MAXD * MAXD]
    if D > MAXD:
        raise ValueError("ambient dimension too large for the compiled kernel")
    # per-atom scratch: cos r, r, weight, r / sin r, d(log weight)/dc, g'(r)/sin r
    cbuf = np.zeros((6, K))
    cdef double[:, ::1] buf = cbuf
    with nogil:
        for s in range(n):
            for i in range(D):
                xs[i] = x[s, i]
            for step in range(N):
                sv = 1.0 - times[step]
                h = times[step + 1] - times[step]
                top = -INFINITY
                for k in range(K):
                    acc = 0.0
                    for i in range(D):
                        acc += xs[i] * atoms[k, i]
                    cc = min(1.0, max(-1.0, acc))
                    rr = acos(cc)
                    buf[0, k] = cc
                    buf[1, k] = rr
                    lw = -INFINITY
                    if rr < sv * M_PI:
                        sr = sqrt(max(0.0, 1.0 - cc * cc))
                        aa = rr / sv
                        sa = sin(aa)
                        ca = cos(aa)
                        if rr < 1e-3:
                            # sin(r/s) / (s sin r), r / sin r, (d/dr log J)/r, g'(r)/sin r as series
                            lw = (d - 1) * log((1.0 - aa * aa / 6.0) / (1.0 - rr * rr / 6.0)) - d * log(sv)
                            buf[3, k] = 1.0 + rr * rr / 6.0
                            buf[4, k] = (d - 1) * ((1.0 - 1.0 / (sv * sv)) / 3.0
                                                   + rr * rr * (1.0 - 1.0 / (sv * sv * sv * sv)) / 45.0)
                            buf[5, k] = 1.0 / 3.0 + 2.0 * rr * rr / 15.0
                        else:
                            lw = (d - 1) * log(sa / sr) - log(sv)
                            buf[3, k] = rr / sr
                            buf[4, k] = (d - 1) * (ca / (sv * sa) - cc / sr) / rr
                            buf[5, k] = (sr - rr * cc) / (sr * sr * sr)
                        lw += logweights[k]
                    buf[2, k] = lw
                    if lw > top:
                        top = lw
                if top == -INFINITY:
                    failed[s] = 1
                    break
                tot = 0.0
                for k in range(K):
                    buf[2, k] = exp(buf[2, k] - top)
                    tot += buf[2, k]
                for i in range(D):
                    v[i] = 0.0
                    gl[i] = 0.0
                gbar_c = 0.0
                for k in range(K):
                    qk = buf[2, k] / tot
                    buf[2, k] = qk
                    if qk == 0.0:
                        continue
                    gk = buf[3, k]
                    for i in range(D):
                        v[i] += qk * gk * (atoms[k, i] - buf[0, k] * xs[i]) / sv
                    if track:
                        # gradient of the log weight is ak * atom
                        buf[4, k] = -buf[4, k] * gk
                        gbar_c += qk * gk * buf[0, k]
                        for i in range(D):
                            gl[i] += qk * buf[4, k] * atoms[k, i]
                if track:
                    for i in range(D):
                        for j in range(D):
                            dv[i * MAXD + j] = 0.0
                    for k in range(K):
                        qk = buf[2, k]
                        if qk == 0.0:
                            continue
                        cc = buf[0, k]
                        gk = buf[3, k]
                        ak = buf[4, k]
                        gps = buf[5, k]
                        for i in range(D):
                            acc = atoms[k, i] - cc * xs[i]
                            for j in range(D):
                                dv[i * MAXD + j] += qk * (gk * acc * (ak * atoms[k, j] - gl[j])
                                                          - gps * acc * atoms[k, j]
                                                          - gk * xs[i] * atoms[k, j])
                    for i in range(D):
                        dv[i * MAXD + i] -= gbar_c
                        for j in range(D):
                            dv[i * MAXD + j] /= sv
                logdet[s] += _advance(xs, v, dv, h, D, track)
            if failed[s]:
                for i in range(D):
                    x[s, i] = NAN
                logdet[s] = NAN
            else:
                for i in range(D):
                    x[s, i] = xs[i]
    return np.asarray(x), np.asarray(logdet)


cdef inline double _log_sinhc(double a) noexcept nogil:
    cdef double a2
    a = fabs(a)
    if a < 1e-3:
        a2 = a * a
        return a2 / 6.0 - a2 * a2 / 180.0
    return a - log(2.0 * a) + log(1.0 - exp(-2.0 * a))


cdef inline void _eig2(double a, double b, double c, double* lo, double* hi,
                       double* cs, double* sn) noexcept nogil:
    """Eigenpairs of [[a, b], [b, c]] (positive definite); ``hi`` has vector (cs, sn)."""
    cdef double m = 0.5 * (a + c), r = sqrt(0.25 * (a - c) * (a - c) + b * b), th
    hi[0] = m + r
    lo[0] = (a * c - b * b) / hi[0]
    th = 0.5 * atan2(2.0 * b, a - c)
    cs[0] = cos(th)
    sn[0] = sin(th)


cdef inline void _sandwich(double* s, double flo, double fhi, double cs, double sn,
                           double* out) noexcept nogil:
    """``s U diag(flo, fhi) U^T s`` for symmetric 2x2 ``s`` stored as (s00, s01, s11)."""
    cdef double m00 = flo * sn * sn + fhi * cs * cs
    cdef double m11 = flo * cs * cs + fhi * sn * sn
    cdef double m01 = (fhi - flo) * cs * sn
    cdef double p00 = s[0] * m00 + s[1] * m01, p01 = s[0] * m01 + s[1] * m11
    cdef double p10 = s[1] * m00 + s[2] * m01, p11 = s[1] * m01 + s[2] * m11
    out[0] = p00 * s[0] + p01 * s[1]
    out[1] = p00 * s[1] + p01 * s[2]
    out[2] = p10 * s[1] + p11 * s[2]


def spd2_importance(double t, double[:, ::1] x, double[:, ::1] s1, double[:, ::1] si,
                    double beta, double[:, ::1] out, double[::1] ess):
    """Self-normalised importance velocity on SPD(2); matrices packed as (m00, m01, m11).

    ``s1`` / ``si`` hold square roots / inverse square roots of the bank.
    Weights are ``p0(psi) J_t`` with the Riemannian Gaussian prior of rate ``beta``.
    """
    cdef Py_ssize_t n = x.shape[0], K = s1.shape[0], p, k
    cdef double sv = 1.0 - t, e = 1.0 / (1.0 - t), top, tot, sq, wk
    cdef double w[3]
    cdef double psi[3]
    cdef double lo, hi, cs, sn, l1, l2, mlo, mhi, mcs, msn, lw
    cbuf = np.empty((K, 4))
    cdef double[:, ::1] buf = cbuf
    with nogil:
        for p in range(n):
            top = -INFINITY
            for k in range(K):
                # whitened point W = si x si
                w[0] = (si[k, 0] * x[p, 0] + si[k, 1] * x[p, 1]) * si[k, 0] \
                    + (si[k, 0] * x[p, 1] + si[k, 1] * x[p, 2]) * si[k, 1]
                w[1] = (si[k, 0] * x[p, 0] + si[k, 1] * x[p, 1]) * si[k, 1] \
                    + (si[k, 0] * x[p, 1] + si[k, 1] * x[p, 2]) * si[k, 2]
                w[2] = (si[k, 1] * x[p, 0] + si[k, 2] * x[p, 1]) * si[k, 1] \
                    + (si[k, 1] * x[p, 1] + si[k, 2] * x[p, 2]) * si[k, 2]
                _eig2(w[0], w[1], w[2], &lo, &hi, &cs, &sn)
                if not (lo > 0.0):
                    buf[k, 0] = -INFINITY
                    continue
                l1 = log(lo)
                l2 = log(hi)
                # prior point psi = s1 U diag(lam^{1/s}) U^T s1, then its log-eigenvalues
                _sandwich(&s1[k, 0], exp(l1 * e), exp(l2 * e), cs, sn, psi)
                _eig2(psi[0], psi[1], psi[2], &mlo, &mhi, &mcs, &msn)
                lw = -beta * (log(mlo) ** 2 + log(mhi) ** 2)
                lw += -3.0 * log(sv) + _log_sinhc(0.5 * (l2 - l1) * e) - _log_sinhc(0.5 * (l2 - l1))
                buf[k, 0] = lw
                # Log_x(bank) = -s1 U diag(lam log lam) U^T s1
                _sandwich(&s1[k, 0], -lo * l1, -hi * l2, cs, sn, &buf[k, 1])
                if lw > top:
                    top = lw
            out[p, 0] = 0.0
            out[p, 1] = 0.0
            out[p, 2] = 0.0
            if top == -INFINITY:
                ess[p] = 0.0
                continue
            tot = 0.0
            sq = 0.0
            for k in range(K):
                wk = exp(buf[k, 0] - top)
                tot += wk
                sq += wk * wk
                out[p, 0] += wk * buf[k, 1]
                out[p, 1] += wk * buf[k, 2]
                out[p, 2] += wk * buf[k, 3]
            ess[p] = tot * tot / sq
            out[p, 0] /= tot * sv
            out[p, 1] /= tot * sv
            out[p, 2] /= tot * sv
    return np.asarray(out), np.asarray(ess)
