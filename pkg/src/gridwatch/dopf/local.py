"""Per-prosumer local OPF problems on the decoupled network.

Variables of a region, in per-unit on the network base::

    [V, delta, Pg, Qg,  V_b1, delta_b1, P_b1, Q_b1,  V_b2, ...]

where ``b_k`` is the auxiliary bus on the tie line to the k-th neighbor
(neighbors sorted by id) and ``P_bk``/``Q_bk`` is the power entering the
region through that auxiliary bus.  Objective values are in $/h divided by
``base_mva`` so that gradients with respect to per-unit power read as $/MWh.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import lsq_linear, minimize

from .. import kernels
from ..grid import DecoupledNetwork

V, DELTA, P, Q = 0, 1, 2, 3
OWN = 4  # own-bus block size
AUX = 4  # per auxiliary bus

KINK_TOL = 1e-7
BOUND_TOL = 1e-8


class LocalSolveError(RuntimeError):
    def __init__(self, owner, message, residual=float("nan")):
        self.owner = owner
        self.residual = residual
        super().__init__(f"prosumer {owner}: {message}")


class LocalInfeasibleError(LocalSolveError):
    pass


@dataclass(frozen=True, eq=False)
class Region:
    """Static per-unit data of one prosumer's local problem."""

    owner: object
    neighbors: tuple
    g: np.ndarray
    b: np.ndarray
    cost: tuple  # scaled: c2 * x^2 + c1 * x + c0 with x = Pg in pu
    load: tuple  # (Pd, Qd) pu
    lo: np.ndarray
    hi: np.ndarray
    is_slack: bool
    base_mva: float

    @property
    def size(self) -> int:
        return OWN + AUX * len(self.neighbors)

    def aux_index(self, j) -> int:
        return OWN + AUX * self.neighbors.index(j)

    def objective(self, x) -> float:
        c2, c1, c0 = self.cost
        pg = x[P]
        return c2 * pg * pg + c1 * pg + c0

    def objective_gradient(self, x) -> np.ndarray:
        grad = np.zeros(self.size)
        grad[P] = 2.0 * self.cost[0] * x[P] + self.cost[1]
        return grad

    def objective_hessian(self) -> np.ndarray:
        hess = np.zeros((self.size, self.size))
        hess[P, P] = 2.0 * self.cost[0]
        return hess

    def _voltages(self, x):
        m = len(self.neighbors)
        v = np.empty(m + 1)
        d = np.empty(m + 1)
        v[0], d[0] = x[V], x[DELTA]
        v[1:] = x[OWN + V::AUX]
        d[1:] = x[OWN + DELTA::AUX]
        return v, d

    def residual(self, x) -> np.ndarray:
        """Power-flow mismatches: own bus (P, Q) then each auxiliary bus."""
        v, d = self._voltages(x)
        p, q = kernels.region_flows(v, d, self.g, self.b)
        r = np.empty(2 + 2 * len(self.neighbors))
        r[0] = p[0] - (x[P] - self.load[0])
        r[1] = q[0] - (x[Q] - self.load[1])
        r[2::2] = p[1:] - x[OWN + P::AUX]
        r[3::2] = q[1:] - x[OWN + Q::AUX]
        return r

    def residual_jacobian(self, x) -> np.ndarray:
        v, d = self._voltages(x)
        jr = kernels.region_jacobian(v, d, self.g, self.b)
        m = len(self.neighbors)
        jac = np.zeros((2 + 2 * m, self.size))
        cols = [V, DELTA]
        for k in range(m):
            cols += [OWN + AUX * k + V, OWN + AUX * k + DELTA]
        jac[:, cols] = jr
        jac[0, P] = -1.0
        jac[1, Q] = -1.0
        for k in range(m):
            jac[2 + 2 * k, OWN + AUX * k + P] = -1.0
            jac[3 + 2 * k, OWN + AUX * k + Q] = -1.0
        return jac

    def constraint_hessian(self, x, nu, h: float = 1e-6) -> np.ndarray:
        """Finite-difference Hessian of ``nu . residual`` (only V/delta carry curvature)."""
        hess = np.zeros((self.size, self.size))
        curved = [V, DELTA]
        for k in range(len(self.neighbors)):
            curved += [OWN + AUX * k + V, OWN + AUX * k + DELTA]
        for col in curved:
            e = np.zeros(self.size)
            e[col] = h
            up = self.residual_jacobian(x + e).T @ nu
            dn = self.residual_jacobian(x - e).T @ nu
            hess[:, col] = (up - dn) / (2.0 * h)
        return 0.5 * (hess + hess.T)


def build_region(dec: DecoupledNetwork, i) -> Region:
    net = dec.base
    pro = net.prosumer(i)
    base = net.base_mva
    att = dec.attachments(i)
    nbrs = tuple(j for j, _ in att)
    g = np.array([y.real for _, y in att], dtype=float)
    b = np.array([y.imag for _, y in att], dtype=float)
    size = OWN + AUX * len(nbrs)
    lo = np.full(size, -np.inf)
    hi = np.full(size, np.inf)
    lo[V], hi[V] = pro.v_bounds
    lo[P], hi[P] = pro.p_bounds[0] / base, pro.p_bounds[1] / base
    lo[Q], hi[Q] = pro.q_bounds[0] / base, pro.q_bounds[1] / base
    if pro.is_slack:
        lo[V] = hi[V] = 1.0
        lo[DELTA] = hi[DELTA] = 0.0
    c2, c1, c0 = pro.cost
    # C(base * x) / base
    cost = (c2 * base, c1, c0 / base)
    load = (pro.fixed_load[0] / base, pro.fixed_load[1] / base)
    return Region(i, nbrs, g, b, cost, load, lo, hi, pro.is_slack, base)


@dataclass(frozen=True, eq=False)
class LocalState:
    """Primal point of one region plus its coupling weights and solve diagnostics."""

    owner: object
    neighbors: tuple
    x: np.ndarray
    weights: Mapping = field(default_factory=dict)
    objective: float = math.nan
    kkt_residual: float = math.nan
    pf_residual: float = math.nan
    pf_multipliers: np.ndarray | None = None

    def aux(self, j) -> np.ndarray:
        """``(V, delta, P, Q)`` of the auxiliary bus towards ``j``."""
        k = OWN + AUX * self.neighbors.index(j)
        return self.x[k:k + AUX]

    @property
    def pg(self) -> float:
        return float(self.x[P])

    @property
    def qg(self) -> float:
        return float(self.x[Q])


def flat_state(region: Region) -> LocalState:
    """Flat start: V = 1, delta = 0, generation mid-range, no auxiliary flow."""
    x = np.zeros(region.size)
    x[V] = 1.0
    x[OWN + V::AUX] = 1.0
    for idx in (P, Q):
        lo, hi = region.lo[idx], region.hi[idx]
        x[idx] = 0.5 * (lo + hi)
    x = np.clip(x, region.lo, region.hi)
    return LocalState(region.owner, region.neighbors, x)


def coupling_targets(region: Region, neighbor_states: Mapping) -> np.ndarray:
    """Values the region's auxiliary variables must match (neighbor side, sign-flipped powers)."""
    t = np.empty(AUX * len(region.neighbors))
    for k, j in enumerate(region.neighbors):
        other = neighbor_states[j].aux(region.owner)
        t[AUX * k:AUX * k + AUX] = (other[V], other[DELTA], -other[P], -other[Q])
    return t


def _weights_vector(region: Region, weights: Mapping) -> np.ndarray:
    return np.repeat([float(weights.get(j, 0.0)) for j in region.neighbors], AUX)


def kkt_certificate(region: Region, x, z, targets, weights: Mapping, rho: float):
    """Fit local multipliers and return ``(stationarity residual, pf multipliers)``.

    The L1 coupling terms contribute a subgradient in ``[-w, w]`` where the
    auxiliary value sits on its target; bound multipliers are sign-constrained.
    """
    n = region.size
    grad = region.objective_gradient(x) + rho * (x - z)
    w = _weights_vector(region, weights)
    cols = [region.residual_jacobian(x).T]
    lo_b, hi_b = [np.full(cols[0].shape[1], -np.inf)], [np.full(cols[0].shape[1], np.inf)]
    for c in range(w.size):
        ix = OWN + c
        diff = x[ix] - targets[c]
        if abs(diff) > KINK_TOL:
            grad[ix] += w[c] * math.copysign(1.0, diff)
        else:
            e = np.zeros((n, 1))
            e[ix] = 1.0
            cols.append(e)
            lo_b.append(np.array([-w[c]]))
            hi_b.append(np.array([w[c]]))
    for ix in range(OWN):
        lo, hi = region.lo[ix], region.hi[ix]
        at_lo = x[ix] - lo <= BOUND_TOL
        at_hi = hi - x[ix] <= BOUND_TOL
        if not (at_lo or at_hi):
            continue
        e = np.zeros((n, 1))
        e[ix] = 1.0
        cols.append(e)
        lo_b.append(np.array([-np.inf if at_lo else 0.0]))
        hi_b.append(np.array([np.inf if at_hi else 0.0]))
    mat = np.hstack(cols)
    lb, ub = np.concatenate(lo_b), np.concatenate(hi_b)
    if mat.shape[1] == 0:
        return float(np.max(np.abs(grad), initial=0.0)), np.zeros(0)
    # lsq_linear needs lb < ub strictly
    ub = np.where(ub <= lb, lb + 1e-300, ub)
    sol = lsq_linear(mat, -grad, bounds=(lb, ub), method="bvls", tol=1e-14, lsmr_tol="auto")
    resid = mat @ sol.x + grad
    n_pf = cols[0].shape[1]
    return float(np.max(np.abs(resid))), sol.x[:n_pf]


def local_solve(
    state: LocalState,
    dec: DecoupledNetwork,
    weights: Mapping,
    neighbor_states: Mapping | None = None,
    *,
    rho: float = 1.0,
    max_iter: int = 200,
    pf_tol: float = 1e-8,
    kkt_tol: float = 1e-6,
    region: Region | None = None,
    restarts: int = 3,
) -> LocalState:
    """Solve the local problem of ``state.owner`` around its current iterate.

    Minimizes ``C(Pg) + sum_k w_k * A_k + rho/2 * |x - z|^2`` subject to the
    region's power-flow equations, bounds and slack conditions, where ``A_k``
    is the L1 disagreement with neighbor ``k``'s current auxiliary values and
    ``z`` is ``state.x``.
    """
    if region is None:
        region = build_region(dec, state.owner)
    for j, wj in weights.items():
        if not math.isfinite(wj) or wj < 0:
            raise ValueError(f"coupling weight for {j} must be finite and nonnegative, got {wj}")
    if neighbor_states is None:
        neighbor_states = {}
    owner = region.owner
    m = len(region.neighbors)
    if m == 0:
        for idx, load in ((P, region.load[0]), (Q, region.load[1])):
            if not region.lo[idx] - 1e-12 <= load <= region.hi[idx] + 1e-12:
                raise LocalInfeasibleError(owner, "bounds cannot cover the fixed load")
    z = np.asarray(state.x, dtype=float)
    targets = coupling_targets(region, neighbor_states) if m else np.zeros(0)
    w = _weights_vector(region, weights)
    n = region.size
    ns = AUX * m

    def fun(y):
        x, s = y[:n], y[n:]
        dx = x - z
        val = region.objective(x) + w @ s + 0.5 * rho * dx @ dx
        grad = np.empty_like(y)
        grad[:n] = region.objective_gradient(x) + rho * dx
        grad[n:] = w
        return val, grad

    eq = {
        "type": "eq",
        "fun": lambda y: region.residual(y[:n]),
        "jac": lambda y: np.hstack([region.residual_jacobian(y[:n]), np.zeros((2 + 2 * m, ns))]),
    }
    cons = [eq]
    if m:
        sel = np.zeros((ns, n))
        sel[np.arange(ns), OWN + np.arange(ns)] = 1.0
        eye = np.eye(ns)
        g_mat = np.vstack([np.hstack([-sel, eye]), np.hstack([sel, eye])])
        g_off = np.concatenate([targets, -targets])
        cons.append({"type": "ineq", "fun": lambda y: g_mat @ y + g_off, "jac": lambda y: g_mat})
    bounds = [(None if np.isinf(lo) else lo, None if np.isinf(hi) else hi)
              for lo, hi in zip(region.lo, region.hi)] + [(0.0, None)] * ns
    x0 = np.clip(z, region.lo, region.hi)
    y0 = np.concatenate([x0, np.abs(x0[OWN:] - targets)])
    for attempt in range(restarts + 1):
        res = minimize(fun, y0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                       options={"maxiter": max_iter, "ftol": 1e-14})
        x = np.clip(res.x[:n], region.lo, region.hi)
        pf_res = float(np.max(np.abs(region.residual(x)), initial=0.0))
        if res.status == 4 and pf_res > pf_tol and attempt == restarts:
            raise LocalInfeasibleError(owner, "local power-flow constraints incompatible", pf_res)
        if pf_res > pf_tol:
            x, pf_res = _restore_feasibility(region, x)
        kkt, nu = (kkt_certificate(region, x, z, targets, weights, rho)
                   if pf_res <= pf_tol else (math.inf, None))
        if kkt <= kkt_tol:
            break
        # SLSQP's quasi-Newton model can stall; a restart from the last point resets it
        y0 = np.concatenate([x, np.abs(x[OWN:] - targets)])
    if pf_res > pf_tol:
        raise LocalSolveError(owner, f"no convergence within {max_iter} iterations ({res.message})", pf_res)
    if kkt > kkt_tol:
        raise LocalSolveError(owner, f"first-order conditions not met (residual {kkt:.3e})", kkt)
    diff = np.abs(x[OWN:] - targets)
    obj = region.objective(x) + float(w @ diff)
    return LocalState(owner, region.neighbors, x, dict(weights), obj, kkt, pf_res, nu)


def _restore_feasibility(region: Region, x, iters: int = 8):
    """Gauss-Newton projection of ``x`` onto the power-flow manifold (minimum-norm steps)."""
    x = x.copy()
    free = region.lo < region.hi
    res = region.residual(x)
    for _ in range(iters):
        if np.max(np.abs(res), initial=0.0) <= 1e-13:
            break
        jac = region.residual_jacobian(x)[:, free]
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        x[free] += step
        res = region.residual(x)
    return x, float(np.max(np.abs(res), initial=0.0))
