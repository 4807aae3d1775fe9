"""Tie-line probing: sample delivery over a two-hop message bus and energy mismatch."""
from __future__ import annotations

import csv
import math
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .dopf.schedule import ReferenceSchedule
from .grid import Network, neighbors, two_hop


class IncompleteWindowError(RuntimeError):
    """Raised when a window is still missing samples after delivery."""

    def __init__(self, observer, target, interval, missing):
        self.observer = observer
        self.target = target
        self.interval = interval
        self.missing = missing
        super().__init__(
            f"interval {interval}: observer {observer} has an incomplete window for {target} "
            f"({len(missing)} samples missing)"
        )


@dataclass(frozen=True)
class ProbeSample:
    """Flow measured at ``line[0]``'s end toward ``line[1]`` (MW, positive = export)."""

    line: tuple
    sample_index: int
    power: float

    def __post_init__(self):
        if self.sample_index < 1:
            raise ValueError(f"sample_index must be >= 1, got {self.sample_index}")


@dataclass(frozen=True)
class MeasurementWindow:
    interval: int
    target: object
    samples: Mapping  # neighbor id -> tuple of L powers, sample order
    L: int

    def __post_init__(self):
        for k, vals in self.samples.items():
            if len(vals) != self.L:
                raise ValueError(f"line ({self.target}, {k}) has {len(vals)} samples, expected {self.L}")

    def neighbor_sum(self, l: int) -> float:
        """Target's net injection at sample ``l`` (0-based), summed in neighbor-id order."""
        total = 0.0
        for k in sorted(self.samples):
            total += self.samples[k][l]
        return total


@dataclass(frozen=True)
class MismatchReport:
    observer: object
    target: object
    interval: int
    d: float  # MW, average-power mismatch
    raw_energy: float  # MW*min


@dataclass(frozen=True)
class Message:
    interval: int
    relay: object
    sample: ProbeSample


class MessageBus:
    """Deterministic in-memory bus.

    Each line-end sample is relayed by the far-end prosumer. Delivery order
    within an interval is a seeded shuffle; windows are assembled by key so
    the order never changes results. ``drop`` can discard messages to model
    losses.
    """

    def __init__(self, net: Network, seed: int = 0, drop: Callable[[Message], bool] | None = None):
        self.net = net
        self.seed = seed
        self.drop = drop
        self._pending: dict[int, list[Message]] = defaultdict(list)
        self._delivered: dict[int, dict[tuple, list[Message]]] = {}
        self._reach_cache: dict = {}

    def publish(self, interval: int, samples: Iterable[ProbeSample]) -> None:
        if interval in self._delivered:
            raise RuntimeError(f"interval {interval} already delivered")
        self._pending[interval].extend(Message(interval, s.line[1], s) for s in samples)

    def deliver(self, interval: int) -> list[Message]:
        """Barrier: deliver every message of ``interval``; returns them in delivery order."""
        msgs = self._pending.pop(interval, [])
        random.Random(f"{self.seed}:{interval}").shuffle(msgs)
        by_line: dict[tuple, list[Message]] = defaultdict(list)
        kept = []
        for m in msgs:
            if self.drop is not None and self.drop(m):
                continue
            by_line[m.sample.line].append(m)
            kept.append(m)
        self._delivered[interval] = by_line
        return kept

    def reachable(self, observer) -> frozenset:
        """Relays whose messages reach ``observer`` within two hops (itself included)."""
        if observer not in self._reach_cache:
            self._reach_cache[observer] = frozenset(two_hop(self.net, observer)) | {observer}
        return self._reach_cache[observer]

    def received(self, observer, interval: int, line: tuple) -> list[Message]:
        if interval not in self._delivered:
            raise RuntimeError(f"interval {interval} not delivered yet")
        reach = self.reachable(observer)
        return [m for m in self._delivered[interval].get(line, ()) if m.relay in reach]


def collect_window(bus: MessageBus, observer, target, interval: int, L: int) -> MeasurementWindow:
    """Assemble ``observer``'s view of ``target``'s tie-line samples for one interval."""
    net = bus.net
    if target not in neighbors(net, observer):
        raise ValueError(f"{observer} is not a neighbor of {target}")
    reach = bus.reachable(observer)
    nbrs = sorted(neighbors(net, target))
    out_of_reach = [k for k in nbrs if k not in reach]
    if out_of_reach:
        raise ValueError(f"lines of {target} toward {out_of_reach} are beyond two hops of {observer}")
    samples = {}
    missing = []
    for k in nbrs:
        vals = [None] * L
        for m in bus.received(observer, interval, (target, k)):
            idx = m.sample.sample_index
            if idx > L:
                raise ValueError(f"sample_index {idx} exceeds L = {L}")
            vals[idx - 1] = m.sample.power
        missing.extend((k, l + 1) for l, v in enumerate(vals) if v is None)
        samples[k] = tuple(vals)
    if missing:
        raise IncompleteWindowError(observer, target, interval, missing)
    return MeasurementWindow(interval, target, samples, L)


def energy_mismatch(window: MeasurementWindow, ref: ReferenceSchedule, tau: float,
                    observer=None) -> MismatchReport:
    """Delivered energy minus agreed energy over the interval.

    ``raw_energy = (tau/L) * sum_l sum_k p_ik(l) - tau * p_ref`` in MW*min,
    accumulated per sample so a profile that meets the reference at every
    sample gives exactly zero. ``d = raw_energy / tau`` in MW.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    p_ref = ref[window.target]
    acc = 0.0
    for l in range(window.L):
        acc += window.neighbor_sum(l) - p_ref
    raw = tau / window.L * acc
    return MismatchReport(observer, window.target, window.interval, raw / tau, raw)


def dead_zone(d: float, eps_dz: float) -> float:
    """Zero out ``|d| <= eps_dz``."""
    if not eps_dz > 0:
        raise ValueError("dead-zone width must be positive")
    return 0.0 if abs(d) <= eps_dz else d


PROBE_COLUMNS = ("interval", "from", "to", "sample_index", "power_mw")


def write_probes(path, rows: Iterable[tuple[int, ProbeSample]]) -> None:
    """Write ``(interval, sample)`` pairs; floats use repr so replay is exact."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROBE_COLUMNS)
        for k, s in rows:
            w.writerow((k, s.line[0], s.line[1], s.sample_index, repr(float(s.power))))


def _id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def read_probes(path) -> dict[int, list[ProbeSample]]:
    out: dict[int, list[ProbeSample]] = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PROBE_COLUMNS:
            raise ValueError(f"probe trace columns must be {PROBE_COLUMNS}, got {reader.fieldnames}")
        for n, row in enumerate(reader, start=2):
            try:
                power = float(row["power_mw"])
                if not math.isfinite(power):
                    raise ValueError("non-finite power")
                out[int(row["interval"])].append(
                    ProbeSample((_id(row["from"]), _id(row["to"])), int(row["sample_index"]), power))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from None
    return dict(out)
