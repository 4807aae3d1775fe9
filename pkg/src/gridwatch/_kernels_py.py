"""Pure-Python implementations of the numerical kernels.

These mirror ``_kernels.pyx`` one for one and are used whenever the compiled
extension is unavailable (or ``GRIDWATCH_PURE_PYTHON=1`` is set).
"""
import math

import numpy as np

PENALTY_SENTINEL = 1.0e300
FACTOR_CAP = 1.0e300


def region_flows(v, delta, g, b):
    """Active/reactive injections of a star-shaped region.

    Bus 0 is the prosumer, buses ``1..m`` are its auxiliary buses; ``g[k]`` and
    ``b[k]`` are the attachment admittance between bus 0 and bus ``k + 1``.
    """
    v = np.asarray(v, dtype=float)
    delta = np.asarray(delta, dtype=float)
    g = np.asarray(g, dtype=float)
    b = np.asarray(b, dtype=float)
    v0, d0 = v[0], delta[0]
    va, da = v[1:], delta[1:]
    th = d0 - da
    c, s = np.cos(th), np.sin(th)
    p = np.empty(v.shape[0])
    q = np.empty(v.shape[0])
    p[0] = v0 * v0 * g.sum() + v0 * np.sum(va * (-g * c - b * s))
    q[0] = -v0 * v0 * b.sum() + v0 * np.sum(va * (-g * s + b * c))
    # theta_k0 = -th
    p[1:] = va * va * g + va * v0 * (-g * c + b * s)
    q[1:] = -va * va * b + va * v0 * (g * s + b * c)
    return p, q


def region_jacobian(v, delta, g, b):
    """Jacobian of ``region_flows``.

    Rows are ``[P0, Q0, P1, Q1, ...]``; columns ``[V0, d0, V1, d1, ...]``.
    """
    v = np.asarray(v, dtype=float)
    delta = np.asarray(delta, dtype=float)
    g = np.asarray(g, dtype=float)
    b = np.asarray(b, dtype=float)
    n = v.shape[0]
    jac = np.zeros((2 * n, 2 * n))
    v0, d0 = v[0], delta[0]
    jac[0, 0] = 2.0 * v0 * g.sum()
    jac[1, 0] = -2.0 * v0 * b.sum()
    for k in range(1, n):
        gk, bk = g[k - 1], b[k - 1]
        vk = v[k]
        th = d0 - delta[k]
        c, s = math.cos(th), math.sin(th)
        # pair terms seen from bus 0
        tp = -gk * c - bk * s
        tq = -gk * s + bk * c
        dtp = gk * s - bk * c  # d(tp)/d(th)
        dtq = -gk * c - bk * s  # d(tq)/d(th)
        jac[0, 0] += vk * tp
        jac[0, 2 * k] += v0 * tp
        jac[0, 1] += v0 * vk * dtp
        jac[0, 2 * k + 1] -= v0 * vk * dtp
        jac[1, 0] += vk * tq
        jac[1, 2 * k] += v0 * tq
        jac[1, 1] += v0 * vk * dtq
        jac[1, 2 * k + 1] -= v0 * vk * dtq
        # pair terms seen from aux bus k (angle difference is -th)
        up = -gk * c + bk * s
        uq = gk * s + bk * c
        dup = gk * s + bk * c  # d(up)/d(th)
        duq = gk * c - bk * s
        pr, qr = 2 * k, 2 * k + 1
        jac[pr, 2 * k] = 2.0 * vk * gk + v0 * up
        jac[pr, 0] = vk * up
        jac[pr, 1] = vk * v0 * dup
        jac[pr, 2 * k + 1] = -vk * v0 * dup
        jac[qr, 2 * k] = -2.0 * vk * bk + v0 * uq
        jac[qr, 0] = vk * uq
        jac[qr, 1] = vk * v0 * duq
        jac[qr, 2 * k + 1] = -vk * v0 * duq
    return jac


def factor_step(f_prev, d_prev, d, n0, a, eps):
    """One anomaly-factor update; returns ``(F, D, N, saturated)``."""
    if d != d_prev:
        rate = a * (d - d_prev)
    elif d > 0.0:
        rate = 1.0
    elif d < 0.0:
        rate = -1.0
    else:
        rate = 0.0
    decay = 1.0 if abs(d) > eps else n0
    f = (f_prev + d * rate) / decay
    saturated = False
    if not math.isfinite(f) or abs(f) > FACTOR_CAP:
        f = math.copysign(FACTOR_CAP, f) if not math.isnan(f) else FACTOR_CAP
        saturated = True
    return f, rate, decay, saturated


def factor_series(d, n0, a, eps, f0=0.0, d_prev0=0.0):
    """Run the recursion over a filtered mismatch sequence."""
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    f_out = np.empty(n)
    rate_out = np.empty(n)
    decay_out = np.empty(n)
    f, dp = float(f0), float(d_prev0)
    for k in range(n):
        dk = float(d[k])
        f, rate, decay, _ = factor_step(f, dp, dk, n0, a, eps)
        f_out[k] = f
        rate_out[k] = rate
        decay_out[k] = decay
        dp = dk
    return f_out, rate_out, decay_out


def penalty_raw(f, c):
    """``c**F - 1`` with overflow mapped to the sentinel."""
    try:
        value = c ** f - 1.0
    except OverflowError:
        return PENALTY_SENTINEL
    if value > PENALTY_SENTINEL or math.isinf(value):
        return PENALTY_SENTINEL
    return value


def penalty_series(f, c):
    return np.array([penalty_raw(float(x), c) for x in np.asarray(f, dtype=float)])
