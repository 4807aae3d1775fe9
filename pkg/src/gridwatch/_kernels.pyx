# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: region power flow and the anomaly-factor recursion.

Semantics are identical to ``_kernels_py``; the test-suite checks both.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, pow, isfinite, isnan, copysign

cnp.import_array()

PENALTY_SENTINEL = 1.0e300
FACTOR_CAP = 1.0e300
cdef double _SENTINEL = 1.0e300
cdef double _CAP = 1.0e300


def region_flows(v, delta, g, b):
    cdef double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] dd = np.ascontiguousarray(delta, dtype=np.float64)
    cdef double[::1] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = vv.shape[0]
    p_arr = np.empty(n)
    q_arr = np.empty(n)
    cdef double[::1] p = p_arr
    cdef double[::1] q = q_arr
    cdef double v0 = vv[0], d0 = dd[0]
    cdef double gsum = 0.0, bsum = 0.0, sp = 0.0, sq = 0.0
    cdef double th, c, s, gk, bk, vk
    cdef Py_ssize_t k
    for k in range(1, n):
        gk = gg[k - 1]
        bk = bb[k - 1]
        vk = vv[k]
        th = d0 - dd[k]
        c = cos(th)
        s = sin(th)
        gsum += gk
        bsum += bk
        sp += vk * (-gk * c - bk * s)
        sq += vk * (-gk * s + bk * c)
        p[k] = vk * vk * gk + vk * v0 * (-gk * c + bk * s)
        q[k] = -vk * vk * bk + vk * v0 * (gk * s + bk * c)
    p[0] = v0 * v0 * gsum + v0 * sp
    q[0] = -v0 * v0 * bsum + v0 * sq
    return p_arr, q_arr


def region_jacobian(v, delta, g, b):
    cdef double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] dd = np.ascontiguousarray(delta, dtype=np.float64)
    cdef double[::1] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = vv.shape[0]
    jac_arr = np.zeros((2 * n, 2 * n))
    cdef double[:, ::1] jac = jac_arr
    cdef double v0 = vv[0], d0 = dd[0]
    cdef double th, c, s, gk, bk, vk, tp, tq, dtp, dtq, up, uq, dup, duq
    cdef Py_ssize_t k, pr, qr
    for k in range(1, n):
        jac[0, 0] += 2.0 * v0 * gg[k - 1]
        jac[1, 0] += -2.0 * v0 * bb[k - 1]
    for k in range(1, n):
        gk = gg[k - 1]
        bk = bb[k - 1]
        vk = vv[k]
        th = d0 - dd[k]
        c = cos(th)
        s = sin(th)
        tp = -gk * c - bk * s
        tq = -gk * s + bk * c
        dtp = gk * s - bk * c
        dtq = -gk * c - bk * s
        jac[0, 0] += vk * tp
        jac[0, 2 * k] += v0 * tp
        jac[0, 1] += v0 * vk * dtp
        jac[0, 2 * k + 1] -= v0 * vk * dtp
        jac[1, 0] += vk * tq
        jac[1, 2 * k] += v0 * tq
        jac[1, 1] += v0 * vk * dtq
        jac[1, 2 * k + 1] -= v0 * vk * dtq
        up = -gk * c + bk * s
        uq = gk * s + bk * c
        dup = gk * s + bk * c
        duq = gk * c - bk * s
        pr = 2 * k
        qr = 2 * k + 1
        jac[pr, 2 * k] = 2.0 * vk * gk + v0 * up
        jac[pr, 0] = vk * up
        jac[pr, 1] = vk * v0 * dup
        jac[pr, 2 * k + 1] = -vk * v0 * dup
        jac[qr, 2 * k] = -2.0 * vk * bk + v0 * uq
        jac[qr, 0] = vk * uq
        jac[qr, 1] = vk * v0 * duq
        jac[qr, 2 * k + 1] = -vk * v0 * duq
    return jac_arr


cdef inline double _rate(double d_prev, double d, double a) nogil:
    if d != d_prev:
        return a * (d - d_prev)
    if d > 0.0:
        return 1.0
    if d < 0.0:
        return -1.0
    return 0.0


cdef inline double _decay(double d, double n0, double eps) nogil:
    if fabs(d) > eps:
        return 1.0
    return n0


def factor_step(double f_prev, double d_prev, double d, double n0, double a, double eps):
    cdef double rate = _rate(d_prev, d, a)
    cdef double decay = _decay(d, n0, eps)
    cdef double f = (f_prev + d * rate) / decay
    cdef bint saturated = False
    if not isfinite(f) or fabs(f) > _CAP:
        f = _CAP if isnan(f) else copysign(_CAP, f)
        saturated = True
    return f, rate, decay, saturated


def factor_series(d, double n0, double a, double eps, double f0=0.0, double d_prev0=0.0):
    cdef double[::1] dd = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t n = dd.shape[0]
    f_arr = np.empty(n)
    r_arr = np.empty(n)
    n_arr = np.empty(n)
    cdef double[::1] fo = f_arr
    cdef double[::1] ro = r_arr
    cdef double[::1] no = n_arr
    cdef double f = f0, dp = d_prev0, dk, rate, decay
    cdef Py_ssize_t k
    with nogil:
        for k in range(n):
            dk = dd[k]
            rate = _rate(dp, dk, a)
            decay = _decay(dk, n0, eps)
            f = (f + dk * rate) / decay
            if not isfinite(f) or fabs(f) > _CAP:
                f = _CAP if isnan(f) else copysign(_CAP, f)
            fo[k] = f
            ro[k] = rate
            no[k] = decay
            dp = dk
    return f_arr, r_arr, n_arr


cdef inline double _penalty(double f, double c) nogil:
    cdef double value = pow(c, f) - 1.0
    if not isfinite(value) or value > _SENTINEL:
        return _SENTINEL
    return value


def penalty_raw(double f, double c):
    return _penalty(f, c)


def penalty_series(f, double c):
    cdef double[::1] ff = np.ascontiguousarray(f, dtype=np.float64)
    cdef Py_ssize_t n = ff.shape[0]
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t k
    with nogil:
        for k in range(n):
            out[k] = _penalty(ff[k], c)
    return out_arr
