"""Recursive anomaly factor kept by each observer for each neighboring target."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels


@dataclass(frozen=True)
class DetectorParams:
    n0: float = 3.0
    a: float = 1.0
    eps_dz: float = 0.1  # MW

    def __post_init__(self):
        if not self.n0 > 1:
            raise ValueError(f"n0 must be > 1, got {self.n0}")
        if not self.a > 0:
            raise ValueError(f"a must be > 0, got {self.a}")
        if not self.eps_dz > 0:
            raise ValueError(f"eps_dz must be > 0, got {self.eps_dz}")


@dataclass(frozen=True)
class DetectorState:
    observer: object
    target: object
    F: float = 0.0
    d_prev: float = 0.0
    k: int = 0
    # values from the most recent update, kept for tracing
    D: float = 0.0
    N: float = 1.0
    saturated: bool = False

    def __post_init__(self):
        if not math.isfinite(self.F):
            raise ValueError("anomaly factor must be finite")


def rate_term(d: float, d_prev: float, a: float) -> float:
    if d != d_prev:
        return a * (d - d_prev)
    if d > 0:
        return 1.0
    if d < 0:
        return -1.0
    return 0.0


def decay_factor(d: float, params: DetectorParams) -> float:
    return 1.0 if abs(d) > params.eps_dz else params.n0


def update_factor(state: DetectorState, d: float, params: DetectorParams,
                  k: int | None = None) -> DetectorState:
    """Advance one interval with an already dead-zone filtered mismatch ``d`` (MW)."""
    if k is None:
        k = state.k + 1
    elif k != state.k + 1:
        raise ValueError(f"detector {state.observer}->{state.target} at k={state.k} cannot jump to {k}")
    if not math.isfinite(d):
        raise ValueError("mismatch must be finite")
    if d != 0.0 and abs(d) <= params.eps_dz:
        raise ValueError(f"mismatch {d} lies inside the dead zone; filter it first")
    f, rate, decay, sat = kernels.factor_step(state.F, state.d_prev, float(d),
                                              params.n0, params.a, params.eps_dz)
    return replace(state, F=f, d_prev=float(d), k=k, D=rate, N=decay,
                   saturated=state.saturated or bool(sat))


def reset(state: DetectorState) -> DetectorState:
    """Forget history after a topology change; the interval counter is kept."""
    return replace(state, F=0.0, d_prev=0.0, D=0.0, N=1.0, saturated=False)


def factor_series(d, params: DetectorParams, F0: float = 0.0, d_prev0: float = 0.0):
    """Vectorized recursion over a filtered mismatch stream; returns ``(F, D, N)`` arrays."""
    return kernels.factor_series(np.asarray(d, dtype=float), params.n0, params.a,
                                 params.eps_dz, F0, d_prev0)
