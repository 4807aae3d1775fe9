"""Penalty prices, isolation votes and the utility's isolation decision."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from . import kernels
from .detection import DetectorState, reset
from .dopf.schedule import ReferenceSchedule
from .grid import Network, isolate, neighbors


@dataclass(frozen=True)
class PenaltyParams:
    c: float = 1.06
    c_th: float = 1300.0
    vote_ratio: float = 0.5

    def __post_init__(self):
        if not self.c > 1:
            raise ValueError(f"penalty base c must be > 1, got {self.c}")
        if not self.c_th > 0:
            raise ValueError(f"threshold c_th must be > 0, got {self.c_th}")
        if not 0 < self.vote_ratio < 1:
            raise ValueError(f"vote_ratio must lie in (0, 1), got {self.vote_ratio}")


@dataclass(frozen=True)
class PenaltyRecord:
    observer: object
    target: object
    interval: int
    penalty: float
    raw: float = 0.0
    F: float = 0.0
    saturated: bool = False

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")


@dataclass(frozen=True)
class AggregatedPenalty:
    target: object
    interval: int
    value: float
    count: int


@dataclass(frozen=True)
class IsolationVote:
    observer: object
    target: object
    interval: int


@dataclass(frozen=True)
class UtilityDecision:
    target: object
    interval: int
    isolated: bool
    votes_received: int
    neighbor_count: int
    vote_ratio_required: float
    voters: tuple = ()


def neighbor_penalty(F: float, c: float) -> float:
    """``max(0, c**F - 1)``; overflow saturates at the kernel sentinel."""
    if not c > 1:
        raise ValueError(f"penalty base c must be > 1, got {c}")
    if not math.isfinite(F):
        raise ValueError("anomaly factor must be finite")
    return max(0.0, kernels.penalty_raw(F, c))


def penalty_record(state: DetectorState, c: float, interval: int | None = None) -> PenaltyRecord:
    raw = kernels.penalty_raw(state.F, c)
    return PenaltyRecord(state.observer, state.target, state.k if interval is None else interval,
                         max(0.0, raw), raw, state.F, raw >= kernels.PENALTY_SENTINEL)


def aggregate_penalty(records: Iterable[PenaltyRecord], i, k) -> AggregatedPenalty:
    """Mean of the neighbor penalties actually reported for ``i`` at ``k``."""
    records = list(records)
    for r in records:
        if r.target != i or r.interval != k:
            raise ValueError(f"record for ({r.target}, k={r.interval}) passed for ({i}, k={k})")
    if not records:
        raise ValueError(f"no penalty records for {i} at interval {k}")
    return AggregatedPenalty(i, k, sum(r.penalty for r in records) / len(records), len(records))


def check_threshold(record: PenaltyRecord, c_th: float) -> IsolationVote | None:
    if not c_th > 0:
        raise ValueError("threshold must be positive")
    if record.penalty > c_th:
        return IsolationVote(record.observer, record.target, record.interval)
    return None


def utility_decide(votes: Iterable[IsolationVote], net: Network, i, ratio: float,
                   interval: int | None = None) -> UtilityDecision:
    """Isolate ``i`` when the share of distinct voting neighbors exceeds ``ratio``."""
    if not 0 < ratio < 1:
        raise ValueError(f"vote ratio must lie in (0, 1), got {ratio}")
    nbrs = neighbors(net, i)
    voters = set()
    for v in votes:
        if v.target != i:
            raise ValueError(f"vote against {v.target} passed to decision on {i}")
        if interval is None:
            interval = v.interval
        elif v.interval != interval:
            raise ValueError(f"votes from intervals {interval} and {v.interval} mixed")
        if v.observer not in nbrs:
            raise ValueError(f"vote from {v.observer}, which is not a neighbor of {i}")
        voters.add(v.observer)
    n = len(nbrs)
    isolated = n > 0 and len(voters) / n > ratio
    return UtilityDecision(i, interval if interval is not None else -1, isolated, len(voters), n,
                           ratio, tuple(sorted(voters)))


ScheduleProvider = Callable[[Network], ReferenceSchedule]


def apply_mitigation(decision: UtilityDecision, net: Network, provider: ScheduleProvider,
                     detectors: Mapping | None = None, schedule: ReferenceSchedule | None = None):
    """Execute an isolation decision.

    Returns ``(network, schedule, detectors)``: the reduced network, the
    provider's schedule for it, and the detector states with every state
    touching the isolated prosumer dropped and the rest reset. A decision
    that does not isolate leaves everything unchanged.
    """
    detectors = dict(detectors or {})
    if not decision.isolated:
        return net, schedule if schedule is not None else provider(net), detectors
    reduced = isolate(net, decision.target)
    sched = provider(reduced)
    kept = {}
    for key, st in detectors.items():
        if decision.target in (st.observer, st.target):
            continue
        kept[key] = reset(st)
    return reduced, sched, kept
