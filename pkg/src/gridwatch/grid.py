"""Prosumer network model, case-file parsing and topology operations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Hashable, Iterable

import yaml

ProsumerId = Hashable


class CaseError(ValueError):
    """Case-file or network invariant violation.

    ``errors`` holds one message per problem so callers can report all of them
    at once.
    """

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Prosumer:
    """A network node. Powers are in MW/MVAr, voltages in per-unit.

    ``p_bounds``/``q_bounds`` bound the controllable generation; the net
    injection is generation minus ``fixed_load`` (generation positive).
    """

    id: ProsumerId
    cost: tuple[float, float, float] = (0.0, 0.0, 0.0)  # c2 $/MW^2h, c1 $/MWh, c0 $/h
    p_bounds: tuple[float, float] = (0.0, 0.0)
    q_bounds: tuple[float, float] = (0.0, 0.0)
    v_bounds: tuple[float, float] = (0.95, 1.05)
    fixed_load: tuple[float, float] = (0.0, 0.0)
    is_slack: bool = False

    def __post_init__(self):
        for name in ("p_bounds", "q_bounds", "v_bounds"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise CaseError(f"prosumer {self.id}: {name} min {lo} > max {hi}")

    def generation_cost(self, p_mw: float) -> float:
        c2, c1, c0 = self.cost
        return c2 * p_mw * p_mw + c1 * p_mw + c0


@dataclass(frozen=True)
class TieLine:
    endpoints: tuple[ProsumerId, ProsumerId]
    admittance: complex  # per-unit on the network base
    rate_mva: float | None = None  # carried, not enforced

    def __post_init__(self):
        i, j = self.endpoints
        if i == j:
            raise CaseError(f"line {i}-{j}: both ends on the same prosumer")
        if self.admittance == 0:
            raise CaseError(f"line {i}-{j}: zero admittance")

    @property
    def key(self) -> frozenset:
        return frozenset(self.endpoints)

    def other(self, i: ProsumerId) -> ProsumerId:
        a, b = self.endpoints
        if i == a:
            return b
        if i == b:
            return a
        raise TopologyError(f"prosumer {i} is not an end of line {a}-{b}")


@dataclass(frozen=True)
class Network:
    prosumers: tuple[Prosumer, ...]
    lines: tuple[TieLine, ...]
    base_mva: float = 100.0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ids = [p.id for p in self.prosumers]
        seen = set()
        for i in ids:
            if i in seen:
                raise CaseError(f"duplicate prosumer id {i}")
            seen.add(i)
        keys = set()
        for line in self.lines:
            for end in line.endpoints:
                if end not in seen:
                    raise CaseError(f"line {line.endpoints[0]}-{line.endpoints[1]}: unknown prosumer {end}")
            if line.key in keys:
                raise CaseError(f"duplicate line {line.endpoints[0]}-{line.endpoints[1]}")
            keys.add(line.key)
        slacks = [p.id for p in self.prosumers if p.is_slack]
        if self.prosumers and not slacks:
            raise CaseError("no slack bus")
        if len(slacks) > 1:
            raise CaseError(f"multiple slack buses: {slacks}")
        if self.base_mva <= 0:
            raise CaseError(f"base_mva must be positive, got {self.base_mva}")

    @cached_property
    def _by_id(self) -> dict:
        return {p.id: p for p in self.prosumers}

    @cached_property
    def _adjacency(self) -> dict:
        adj = {p.id: set() for p in self.prosumers}
        for line in self.lines:
            i, j = line.endpoints
            adj[i].add(j)
            adj[j].add(i)
        return {k: frozenset(v) for k, v in adj.items()}

    @cached_property
    def _line_index(self) -> dict:
        return {line.key: line for line in self.lines}

    @property
    def ids(self) -> list:
        return sorted(self._by_id)

    @property
    def slack(self) -> ProsumerId | None:
        for p in self.prosumers:
            if p.is_slack:
                return p.id
        return None

    def prosumer(self, i: ProsumerId) -> Prosumer:
        try:
            return self._by_id[i]
        except KeyError:
            raise TopologyError(f"unknown prosumer {i}") from None

    def __contains__(self, i) -> bool:
        return i in self._by_id

    def line(self, i: ProsumerId, j: ProsumerId) -> TieLine:
        try:
            return self._line_index[frozenset((i, j))]
        except KeyError:
            raise TopologyError(f"no tie line between {i} and {j}") from None

    def is_connected(self) -> bool:
        if not self.prosumers:
            return True
        return len(_component(self._adjacency, self.prosumers[0].id)) == len(self.prosumers)


def neighbors(net: Network, i: ProsumerId) -> frozenset:
    """Prosumers sharing a tie line with ``i``."""
    net.prosumer(i)
    return net._adjacency[i]


def two_hop(net: Network, i: ProsumerId) -> frozenset:
    """Neighbors of ``i`` and their neighbors, without ``i`` itself."""
    first = neighbors(net, i)
    reach = set(first)
    for j in first:
        reach |= net._adjacency[j]
    reach.discard(i)
    return frozenset(reach)


def _component(adj: dict, start) -> set:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


@dataclass(frozen=True)
class AuxPair:
    """Auxiliary buses ``b_ij`` (attached to ``i``) and ``b_ji`` (attached to ``j``)."""

    i: ProsumerId
    j: ProsumerId
    line_admittance: complex

    @property
    def attachment(self) -> complex:
        return 2.0 * self.line_admittance

    def series_admittance(self) -> complex:
        ya = yb = self.attachment
        return ya * yb / (ya + yb)


@dataclass(frozen=True)
class DecoupledNetwork:
    base: Network
    aux_pairs: tuple[AuxPair, ...]

    @cached_property
    def _pair_index(self) -> dict:
        return {frozenset((p.i, p.j)): p for p in self.aux_pairs}

    def pair(self, i, j) -> AuxPair:
        try:
            return self._pair_index[frozenset((i, j))]
        except KeyError:
            raise TopologyError(f"no auxiliary pair for {i}-{j}") from None

    def attachments(self, i) -> list[tuple[ProsumerId, complex]]:
        """``(neighbor, attachment admittance)`` for each auxiliary bus of ``i``, neighbor-sorted."""
        return [(j, self.pair(i, j).attachment) for j in sorted(neighbors(self.base, i))]


def decouple(net: Network) -> DecoupledNetwork:
    if isinstance(net, DecoupledNetwork):
        raise TypeError("network is already decoupled")
    pairs = []
    for line in net.lines:
        i, j = sorted(line.endpoints)
        pairs.append(AuxPair(i, j, line.admittance))
    pairs.sort(key=lambda p: (p.i, p.j))
    return DecoupledNetwork(net, tuple(pairs))


def isolate(net: Network, i: ProsumerId) -> Network:
    """Remove prosumer ``i`` and its tie lines; warn if the remainder splits."""
    target = net.prosumer(i)
    if target.is_slack:
        raise TopologyError(f"cannot isolate slack prosumer {i}")
    prosumers = tuple(p for p in net.prosumers if p.id != i)
    lines = tuple(line for line in net.lines if i not in line.endpoints)
    reduced = Network(prosumers, lines, net.base_mva, net.warnings)
    if not reduced.is_connected():
        parts = _partition(reduced)
        msg = f"isolating {i} partitions the network into {len(parts)} parts: {parts}"
        reduced = replace(reduced, warnings=net.warnings + (msg,))
    return reduced


def _partition(net: Network) -> list[list]:
    left = set(net.ids)
    parts = []
    while left:
        comp = _component(net._adjacency, min(left))
        parts.append(sorted(comp))
        left -= comp
    return parts


# --- case files -------------------------------------------------------------

_TOP_KEYS = {"system", "prosumers", "lines"}
_SYSTEM_KEYS = {"base_mva", "slack"}
_PROSUMER_KEYS = {"id", "cost", "p_min", "p_max", "q_min", "q_max", "v_min", "v_max", "load_p", "load_q"}
_COST_KEYS = {"c2", "c1", "c0"}
_LINE_KEYS = {"from", "to", "g", "b", "rate_mva"}


def _unknown(where: str, data: dict, allowed: set, errors: list):
    for key in sorted(set(data) - allowed, key=str):
        errors.append(f"{where}: unknown field '{key}'")


def _number(where: str, data: dict, key: str, errors: list, default=None):
    if key not in data:
        if default is None:
            errors.append(f"{where}: missing field '{key}'")
            return 0.0
        return default
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{where}: field '{key}' must be a number, got {value!r}")
        return 0.0
    return float(value)


def parse_case(text: str) -> Network:
    """Parse a YAML case document into a validated :class:`Network`.

    All problems found are collected and raised together as a
    :class:`CaseError`.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CaseError(f"case: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise CaseError("case: top level must be a mapping")
    errors: list[str] = []
    _unknown("case", doc, _TOP_KEYS, errors)
    for key in ("system", "prosumers", "lines"):
        if key not in doc:
            errors.append(f"case: missing section '{key}'")
    if errors:
        raise CaseError(errors)

    system = doc["system"]
    if not isinstance(system, dict):
        raise CaseError("system: must be a mapping")
    _unknown("system", system, _SYSTEM_KEYS, errors)
    base = _number("system", system, "base_mva", errors)
    slack_spec = system.get("slack")
    if slack_spec is None:
        errors.append("system: missing field 'slack'")
        slack_ids = []
    else:
        slack_ids = list(slack_spec) if isinstance(slack_spec, list) else [slack_spec]
    if len(slack_ids) > 1:
        errors.append(f"system: multiple slack buses {slack_ids}")

    raw_prosumers = doc["prosumers"]
    if not isinstance(raw_prosumers, list):
        raise CaseError(errors + ["prosumers: must be a list"])
    prosumers = []
    seen = set()
    for n, entry in enumerate(raw_prosumers):
        where = f"prosumers[{n}]"
        if not isinstance(entry, dict):
            errors.append(f"{where}: must be a mapping")
            continue
        if "id" not in entry:
            errors.append(f"{where}: missing field 'id'")
            continue
        pid = entry["id"]
        where = f"prosumer {pid}"
        if pid in seen:
            errors.append(f"{where}: duplicate id")
            continue
        seen.add(pid)
        _unknown(where, entry, _PROSUMER_KEYS, errors)
        cost = entry.get("cost", {})
        if not isinstance(cost, dict):
            errors.append(f"{where}: cost must be a mapping")
            cost = {}
        _unknown(f"{where}.cost", cost, _COST_KEYS, errors)
        c = tuple(_number(f"{where}.cost", cost, k, errors, 0.0) for k in ("c2", "c1", "c0"))
        vals = {k: _number(where, entry, k, errors, d) for k, d in (
            ("p_min", 0.0), ("p_max", 0.0), ("q_min", 0.0), ("q_max", 0.0),
            ("v_min", 0.95), ("v_max", 1.05), ("load_p", 0.0), ("load_q", 0.0))}
        try:
            prosumers.append(Prosumer(
                id=pid,
                cost=c,
                p_bounds=(vals["p_min"], vals["p_max"]),
                q_bounds=(vals["q_min"], vals["q_max"]),
                v_bounds=(vals["v_min"], vals["v_max"]),
                fixed_load=(vals["load_p"], vals["load_q"]),
                is_slack=pid in slack_ids,
            ))
        except CaseError as exc:
            errors.extend(exc.errors)
    for sid in slack_ids:
        if sid not in seen:
            errors.append(f"system: slack {sid} is not a prosumer")

    raw_lines = doc["lines"]
    if raw_lines is None:
        raw_lines = []
    if not isinstance(raw_lines, list):
        raise CaseError(errors + ["lines: must be a list"])
    lines = []
    line_keys = set()
    for n, entry in enumerate(raw_lines):
        where = f"lines[{n}]"
        if not isinstance(entry, dict):
            errors.append(f"{where}: must be a mapping")
            continue
        _unknown(where, entry, _LINE_KEYS, errors)
        i, j = entry.get("from"), entry.get("to")
        if i is None or j is None:
            errors.append(f"{where}: needs 'from' and 'to'")
            continue
        where = f"line {i}-{j}"
        for end in (i, j):
            if end not in seen:
                errors.append(f"{where}: unknown prosumer {end}")
        key = frozenset((i, j))
        if key in line_keys:
            errors.append(f"{where}: duplicate line")
            continue
        line_keys.add(key)
        g = _number(where, entry, "g", errors)
        b = _number(where, entry, "b", errors)
        rate = entry.get("rate_mva")
        try:
            lines.append(TieLine((i, j), complex(g, b), None if rate is None else float(rate)))
        except CaseError as exc:
            errors.extend(exc.errors)

    if errors:
        raise CaseError(errors)
    try:
        net = Network(tuple(prosumers), tuple(lines), base)
    except CaseError as exc:
        raise CaseError(exc.errors) from None
    if not net.is_connected():
        parts = _partition(net)
        raise CaseError(f"network is disconnected: components {parts}")
    return net


def load_case(path: str | Path) -> Network:
    return parse_case(Path(path).read_text())


def dump_case(net: Network) -> str:
    """Serialize a network back to the case-file format."""
    doc: dict[str, Any] = {
        "system": {"base_mva": net.base_mva, "slack": net.slack},
        "prosumers": [],
        "lines": [],
    }
    for p in net.prosumers:
        doc["prosumers"].append({
            "id": p.id,
            "cost": dict(zip(("c2", "c1", "c0"), p.cost)),
            "p_min": p.p_bounds[0], "p_max": p.p_bounds[1],
            "q_min": p.q_bounds[0], "q_max": p.q_bounds[1],
            "v_min": p.v_bounds[0], "v_max": p.v_bounds[1],
            "load_p": p.fixed_load[0], "load_q": p.fixed_load[1],
        })
    for line in net.lines:
        entry = {"from": line.endpoints[0], "to": line.endpoints[1],
                 "g": line.admittance.real, "b": line.admittance.imag}
        if line.rate_mva is not None:
            entry["rate_mva"] = line.rate_mva
        doc["lines"].append(entry)
    return yaml.safe_dump(doc, sort_keys=False)


def make_network(prosumers: Iterable[Prosumer], lines: Iterable[tuple], base_mva: float = 100.0) -> Network:
    """Convenience constructor: ``lines`` are ``(i, j, admittance)`` triples."""
    return Network(tuple(prosumers), tuple(TieLine((i, j), complex(y)) for i, j, y in lines), base_mva)
