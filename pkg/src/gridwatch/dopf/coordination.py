"""Coordination step of the distributed OPF: derivatives, consensus QP, line search."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg

from ..grid import DecoupledNetwork
from .local import AUX, BOUND_TOL, DELTA, OWN, LocalState, Region, build_region, P, Q, V


class SingularSystemError(RuntimeError):
    def __init__(self, message, condition=float("inf")):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class LineSearchStall(RuntimeError):
    pass


@dataclass(frozen=True)
class ConsensusResidual:
    pair: tuple
    value: float


def coupling_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Signed consensus mismatches of two mirrored auxiliary buses ``(V, delta, P, Q)``."""
    return np.array([a[V] - b[V], a[DELTA] - b[DELTA], a[P] + b[P], a[Q] + b[Q]])


def consensus_residual(a: LocalState, b: LocalState, pair: tuple) -> ConsensusResidual:
    i, j = pair
    if a.owner != i or b.owner != j:
        a, b = b, a
    if a.owner != i or b.owner != j or j not in a.neighbors or i not in b.neighbors:
        raise ValueError(f"states do not share auxiliary pair {pair}")
    return ConsensusResidual(pair, float(np.sum(np.abs(coupling_rows(a.aux(j), b.aux(i))))))


@dataclass(eq=False)
class SolverWorkspace:
    """Derivatives of every region at the latest local solutions."""

    regions: dict
    states: dict
    gradients: dict
    hessians: dict
    jacobians: dict
    residuals: dict
    iteration: int = 0
    step_length: float = 1.0

    @property
    def order(self) -> list:
        return sorted(self.regions)

    def offsets(self) -> dict:
        off, pos = {}, 0
        for i in self.order:
            off[i] = pos
            pos += self.regions[i].size
        return off


def build_derivatives(states: Mapping, dec: DecoupledNetwork, regions: Mapping | None = None,
                      iteration: int = 0) -> SolverWorkspace:
    """Objective gradient, Lagrangian Hessian and power-flow Jacobian per region."""
    regions = dict(regions) if regions else {i: build_region(dec, i) for i in states}
    grads, hess, jacs, ress = {}, {}, {}, {}
    for i in sorted(states):
        reg, st = regions[i], states[i]
        x = st.x
        grads[i] = reg.objective_gradient(x)
        jacs[i] = reg.residual_jacobian(x)
        ress[i] = reg.residual(x)
        h = reg.objective_hessian()
        if st.pf_multipliers is not None and st.pf_multipliers.size:
            h = h + reg.constraint_hessian(x, st.pf_multipliers)
        hess[i] = 0.5 * (h + h.T)
        for name, arr in (("gradient", grads[i]), ("Hessian", hess[i]), ("Jacobian", jacs[i])):
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"prosumer {i}: non-finite {name} entries")
    return SolverWorkspace(regions, dict(states), grads, hess, jacs, ress, iteration)


@dataclass(frozen=True, eq=False)
class ConsensusStep:
    dx: dict
    coupling_multipliers: dict  # pair -> (V, delta, P, Q) multipliers
    pf_multipliers: dict
    shift: float
    gradient_dot: float  # g . dx
    curvature: float  # dx . H . dx (unshifted)
    violation: np.ndarray  # |constraint residual| per merit row
    row_kind: tuple  # ("pf", i) or ("pair", (i, j)) per merit row

    def is_zero(self, tol=0.0) -> bool:
        return all(np.max(np.abs(v), initial=0.0) <= tol for v in self.dx.values())

    def model_decrease(self, row_weights: np.ndarray) -> float:
        """Predicted decrease of the L1 merit (curvature term dropped if not positive)."""
        sigma = 1.0 if self.curvature > 0 else 0.0
        return -self.gradient_dot - 0.5 * sigma * self.curvature + float(row_weights @ self.violation)


def _bound_keys(reg: Region, x) -> tuple[list, set]:
    """Fixed variables and bounds active at ``x``: ``(i-less) (ix, side)`` keys."""
    fixed, active = [], set()
    for ix in range(OWN):
        lo, hi = reg.lo[ix], reg.hi[ix]
        if lo == hi:
            fixed.append(ix)
        elif x[ix] - lo <= BOUND_TOL:
            active.add((ix, "lo"))
        elif hi - x[ix] <= BOUND_TOL:
            active.add((ix, "hi"))
    return fixed, active


def consensus_step(ws: SolverWorkspace, dec: DecoupledNetwork, *, regularize: bool = True,
                   max_shift: float = 1e8, max_active_iter: int = 50) -> ConsensusStep:
    """Coupled QP coordinating all regions.

    Minimizes ``sum g_i.dx_i + 1/2 dx_i.H_i.dx_i`` subject to the linearized
    power-flow equations, the variable bounds and the consensus constraints,
    which are linear and therefore met exactly by ``x + dx``.  Bounds are
    handled with a working set.  ``H`` is shifted by a multiple of the identity
    until it is positive definite on the null space of the equality
    constraints.
    """
    off = ws.offsets()
    n = sum(r.size for r in ws.regions.values())
    hess = np.zeros((n, n))
    grad = np.zeros(n)
    rows, rhs, kinds = [], [], []
    for i in ws.order:
        o, reg = off[i], ws.regions[i]
        s = slice(o, o + reg.size)
        hess[s, s] = ws.hessians[i]
        grad[s] = ws.gradients[i]
        jac = ws.jacobians[i]
        for r in range(jac.shape[0]):
            row = np.zeros(n)
            row[s] = jac[r]
            rows.append(row)
            rhs.append(-ws.residuals[i][r])
            kinds.append(("pf", i))
    pair_rows = {}
    for pair in dec.aux_pairs:
        i, j = pair.i, pair.j
        ai = off[i] + ws.regions[i].aux_index(j)
        aj = off[j] + ws.regions[j].aux_index(i)
        cur = coupling_rows(ws.states[i].aux(j), ws.states[j].aux(i))
        idx = []
        for c, sign in ((V, -1.0), (DELTA, -1.0), (P, 1.0), (Q, 1.0)):
            row = np.zeros(n)
            row[ai + c] = 1.0
            row[aj + c] = sign
            rows.append(row)
            rhs.append(-cur[c])
            kinds.append(("pair", (i, j)))
            idx.append(len(rows) - 1)
        pair_rows[(i, j)] = idx
    n_merit = len(rows)
    x_all = np.concatenate([ws.states[i].x for i in ws.order])
    lo_all = np.concatenate([ws.regions[i].lo for i in ws.order])
    hi_all = np.concatenate([ws.regions[i].hi for i in ws.order])
    fixed, working = [], set()
    for i in ws.order:
        f, a = _bound_keys(ws.regions[i], ws.states[i].x)
        fixed += [off[i] + ix for ix in f]
        working |= {(off[i] + ix, side) for ix, side in a}
    for col in fixed:
        row = np.zeros(n)
        row[col] = 1.0
        rows.append(row)
        rhs.append(lo_all[col] - x_all[col])
        kinds.append(("bound", col))
    base_rows = np.array(rows).reshape(len(rows), n)
    base_rhs = np.array(rhs)

    def admissible(current: set, candidates) -> set:
        # greedily keep bounds that leave the constraint rows linearly independent
        kept = set(current)
        mat = np.vstack([base_rows] + [_unit(n, c) for c, _ in sorted(kept)])
        for key in candidates:
            trial = np.vstack([mat, _unit(n, key[0])])
            if _full_row_rank(trial):
                kept.add(key)
                mat = trial
        return kept

    working = admissible(set(), sorted(working))
    seen = set()
    for _ in range(max_active_iter):
        wl = sorted(working)
        extra = np.zeros((len(wl), n))
        extra_rhs = np.empty(len(wl))
        for r, (col, side) in enumerate(wl):
            extra[r, col] = 1.0
            extra_rhs[r] = (lo_all[col] if side == "lo" else hi_all[col]) - x_all[col]
        cmat = np.vstack([base_rows, extra])
        crhs = np.concatenate([base_rhs, extra_rhs])
        dx, lam, shift = _solve_eqp(hess, grad, cmat, crhs, regularize, max_shift)
        key = frozenset(working)
        seen.add(key)
        # release the bound whose multiplier most wants it to leave
        worst, worst_key = 0.0, None
        for r, (col, side) in enumerate(wl):
            y = lam[len(base_rhs) + r]
            wrong = y if side == "lo" else -y
            if wrong > worst + 1e-12:
                worst, worst_key = wrong, (col, side)
        if worst_key is not None:
            cand = working - {worst_key}
            if frozenset(cand) not in seen:
                working = cand
                continue
        xn = x_all + dx
        added = {(c, "lo") for c in np.flatnonzero(xn < lo_all - 1e-12)}
        added |= {(c, "hi") for c in np.flatnonzero(xn > hi_all + 1e-12)}
        added -= working
        added = {k for k in added if k[0] not in fixed}
        viol = lambda k: (lo_all[k[0]] - xn[k[0]]) if k[1] == "lo" else (xn[k[0]] - hi_all[k[0]])
        grown = admissible(working, sorted(added, key=lambda k: (-viol(k), k)))
        if grown != working and frozenset(grown) not in seen:
            working = grown
            continue
        break

    dx_by = {i: dx[off[i]:off[i] + ws.regions[i].size].copy() for i in ws.order}
    pf_mult = {i: lam[[r for r, k in enumerate(kinds) if k == ("pf", i)]] for i in ws.order}
    coup = {pair: lam[idx] for pair, idx in pair_rows.items()}
    return ConsensusStep(
        dx=dx_by,
        coupling_multipliers=coup,
        pf_multipliers=pf_mult,
        shift=shift,
        gradient_dot=float(grad @ dx),
        curvature=float(dx @ hess @ dx),
        violation=np.abs(base_rhs[:n_merit]),
        row_kind=tuple(kinds[:n_merit]),
    )


def _unit(n: int, col: int) -> np.ndarray:
    row = np.zeros((1, n))
    row[0, col] = 1.0
    return row


def _full_row_rank(mat: np.ndarray) -> bool:
    if mat.shape[0] > mat.shape[1]:
        return False
    sv = np.linalg.svd(mat, compute_uv=False)
    return bool(sv.size == 0 or sv[-1] > 1e-10 * sv[0])


def _solve_eqp(hess, grad, cmat, rhs, regularize, max_shift):
    """Null-space solution of an equality-constrained QP; returns ``(dx, multipliers, shift)``."""
    n = hess.shape[0]
    if cmat.shape[0]:
        sv = np.linalg.svd(cmat, compute_uv=False)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
        if cmat.shape[0] > n or sv[-1] <= 1e-10 * sv[0]:
            raise SingularSystemError("coupled constraint system is rank deficient", cond)
        z_basis = scipy.linalg.null_space(cmat)
        dp = np.linalg.lstsq(cmat, rhs, rcond=None)[0]
    else:
        z_basis = np.eye(n)
        dp = np.zeros(n)
    shift = 0.0
    scale = max(1.0, float(np.max(np.abs(np.diag(hess)), initial=0.0)))
    chol = None
    while z_basis.shape[1]:
        hs = hess + shift * np.eye(n)
        reduced = z_basis.T @ hs @ z_basis
        try:
            chol = scipy.linalg.cho_factor(reduced)
            if np.min(np.abs(np.diag(chol[0]))) <= 1e-7 * math.sqrt(scale):
                raise np.linalg.LinAlgError
            break
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            if not regularize:
                ev = np.linalg.eigvalsh(reduced)
                cond = abs(ev[-1] / ev[0]) if ev[0] != 0 else math.inf
                raise SingularSystemError("reduced Hessian is not positive definite", cond) from None
            shift = 1e-8 * scale if shift == 0.0 else shift * 10.0
            if shift > max_shift * scale:
                raise SingularSystemError("Hessian regularization did not reach positive definiteness",
                                          math.inf) from None
    hs = hess + shift * np.eye(n)
    if chol is not None:
        w = scipy.linalg.cho_solve(chol, -(z_basis.T @ (grad + hs @ dp)))
        dx = dp + z_basis @ w
    else:
        dx = dp
    lam = np.zeros(cmat.shape[0])
    if cmat.shape[0]:
        lam = np.linalg.lstsq(cmat.T, -(grad + hs @ dx), rcond=None)[0]
    return dx, lam, shift


@dataclass
class MeritFunction:
    """``sum C_i + sum_pairs w_ij * A_ij + pi * sum |power-flow residual|``."""

    regions: dict
    dec: DecoupledNetwork
    pair_weights: dict
    pf_weight: float

    def row_weights(self, kinds) -> np.ndarray:
        return np.array([self.pf_weight if k[0] == "pf" else self.pair_weights[k[1]] for k in kinds])

    def __call__(self, xs: Mapping) -> float:
        total = 0.0
        for i in sorted(self.regions):
            reg = self.regions[i]
            total += reg.objective(xs[i])
            total += self.pf_weight * float(np.sum(np.abs(reg.residual(xs[i]))))
        for pair in self.dec.aux_pairs:
            i, j = pair.i, pair.j
            ai = self.regions[i].aux_index(j)
            aj = self.regions[j].aux_index(i)
            rows = coupling_rows(xs[i][ai:ai + AUX], xs[j][aj:aj + AUX])
            total += self.pair_weights[(i, j)] * float(np.sum(np.abs(rows)))
        return total


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    merit_before: float
    merit_after: float
    trials: tuple = field(default_factory=tuple)


def trial_point(regions: Mapping, base: Mapping, dx: Mapping, alpha: float) -> dict:
    return {i: np.clip(base[i] + alpha * dx[i], regions[i].lo, regions[i].hi) for i in base}


def line_search(merit: MeritFunction, base: Mapping, dx: Mapping, *, armijo: float = 1e-4,
                model_decrease: float = 0.0, floor: float = 1e-6) -> LineSearchResult:
    """Backtrack ``alpha = 1, 1/2, 1/4, ...`` until the merit function does not increase.

    With a positive ``model_decrease`` an Armijo fraction of it is demanded.
    """
    phi0 = merit(base)
    slack = 1e-13 * max(1.0, abs(phi0))
    alpha = 1.0
    trials = []
    while alpha >= floor:
        phi = merit(trial_point(merit.regions, base, dx, alpha))
        trials.append((alpha, phi))
        if phi <= phi0 - armijo * alpha * max(model_decrease, 0.0) + slack:
            return LineSearchResult(alpha, phi0, phi, tuple(trials))
        alpha *= 0.5
    raise LineSearchStall(f"no acceptable step length above {floor:g} (merit {phi0:.6g})")
