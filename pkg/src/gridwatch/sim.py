"""Discrete-time simulation of probing, detection and mitigation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import yaml

from .detection import DetectorParams, DetectorState, update_factor
from .dopf.schedule import ReferenceSchedule, fixed_reference
from .grid import Network, neighbors
from .mitigation import (
    PenaltyParams,
    UtilityDecision,
    aggregate_penalty,
    apply_mitigation,
    check_threshold,
    penalty_record,
    utility_decide,
)
from .probing import (
    IncompleteWindowError,
    MessageBus,
    ProbeSample,
    collect_window,
    dead_zone,
    energy_mismatch,
    write_probes,
)


class ScenarioError(ValueError):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


class SimulationError(RuntimeError):
    def __init__(self, interval: int, cause: Exception):
        self.interval = interval
        self.cause = cause
        super().__init__(f"interval {interval}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class AnomalyInjection:
    """Deviation of a prosumer's actual output from its reference.

    ``mode`` is ``"scale"`` (actual = magnitude * p_ref) or ``"offset"``
    (actual = p_ref + magnitude MW). Active for ``start_k <= k < end_k``;
    ``end_k = None`` keeps it active to the end of the run.
    """

    target: object
    start_k: int
    end_k: int | None = None
    mode: str = "scale"
    magnitude: float = 1.0

    def __post_init__(self):
        if self.mode not in ("scale", "offset"):
            raise ValueError(f"injection mode must be 'scale' or 'offset', got {self.mode!r}")
        if self.end_k is not None and not self.start_k < self.end_k:
            raise ValueError(f"injection on {self.target}: start_k {self.start_k} >= end_k {self.end_k}")
        if not math.isfinite(self.magnitude):
            raise ValueError("injection magnitude must be finite")

    def active(self, k: int) -> bool:
        return self.start_k <= k and (self.end_k is None or k < self.end_k)

    def apply(self, p: float) -> float:
        return p * self.magnitude if self.mode == "scale" else p + self.magnitude


@dataclass(frozen=True)
class ReferenceConfig:
    mode: str = "fixed"  # "fixed" or "solve"
    values: Mapping = field(default_factory=dict)
    post_isolation_values: Mapping = field(default_factory=dict)
    eps_consensus: float = 1e-4
    max_iters: int = 100


@dataclass(frozen=True)
class Scenario:
    K: int
    tau: float = 5.0
    L: int = 30
    seed: int = 0
    stop_on_isolation: bool = False
    detector: DetectorParams = field(default_factory=DetectorParams)
    penalty: PenaltyParams = field(default_factory=PenaltyParams)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    injections: tuple = ()

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.L < 1:
            raise ValueError("L must be >= 1")


# --- scenario files ---------------------------------------------------------

_SECTIONS = {
    "sim": {"K", "tau_min", "L", "seed", "stop_on_isolation"},
    "detector": {"n0", "a", "eps_dz_mw"},
    "penalty": {"c", "c_th", "vote_ratio"},
    "reference": {"mode", "values", "post_isolation_values", "eps_consensus", "max_iters"},
}
_INJECTION_KEYS = {"target", "start_k", "end_k", "mode", "magnitude"}


def _get(section: dict, path: str, key: str, kind, errors: list, default=None, required=False):
    if key not in section:
        if required:
            errors.append(f"{path}.{key}: required")
        return default
    val = section[key]
    if kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
    elif kind is bool:
        ok = isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        errors.append(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, got {val!r}")
        return default
    return float(val) if kind is float else val


def _values(raw, path: str, errors: list) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected a mapping of prosumer id to MW")
        return {}
    out = {}
    for k, v in raw.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            errors.append(f"{path}.{k}: expected a number, got {v!r}")
        else:
            out[k] = float(v)
    return out


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document; all problems are reported together."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ScenarioError("scenario: top level must be a mapping")
    errors: list[str] = []
    for key in doc:
        if key not in _SECTIONS and key != "injections":
            errors.append(f"scenario: unknown section '{key}'")
    sec = {}
    for name, allowed in _SECTIONS.items():
        s = doc.get(name) or {}
        if not isinstance(s, dict):
            errors.append(f"{name}: must be a mapping")
            s = {}
        for key in s:
            if key not in allowed:
                errors.append(f"{name}.{key}: unknown field")
        sec[name] = s
    if "sim" not in doc:
        errors.append("scenario: missing section 'sim'")

    sim, det, pen, ref = sec["sim"], sec["detector"], sec["penalty"], sec["reference"]
    K = _get(sim, "sim", "K", int, errors, required=True)
    tau = _get(sim, "sim", "tau_min", float, errors, 5.0)
    L = _get(sim, "sim", "L", int, errors, 30)
    seed = _get(sim, "sim", "seed", int, errors, 0)
    stop = _get(sim, "sim", "stop_on_isolation", bool, errors, False)
    n0 = _get(det, "detector", "n0", float, errors, 3.0)
    a = _get(det, "detector", "a", float, errors, 1.0)
    eps = _get(det, "detector", "eps_dz_mw", float, errors, 0.1)
    c = _get(pen, "penalty", "c", float, errors, 1.06)
    c_th = _get(pen, "penalty", "c_th", float, errors, 1300.0)
    ratio = _get(pen, "penalty", "vote_ratio", float, errors, 0.5)
    mode = _get(ref, "reference", "mode", str, errors, "fixed")
    if mode not in ("fixed", "solve"):
        errors.append(f"reference.mode: must be 'fixed' or 'solve', got {mode!r}")
    values = _values(ref.get("values"), "reference.values", errors)
    post = _values(ref.get("post_isolation_values"), "reference.post_isolation_values", errors)
    if mode == "fixed" and not values:
        errors.append("reference.values: required in fixed mode")
    eps_c = _get(ref, "reference", "eps_consensus", float, errors, 1e-4)
    max_iters = _get(ref, "reference", "max_iters", int, errors, 100)

    raw_inj = doc.get("injections") or []
    injections = []
    if not isinstance(raw_inj, list):
        errors.append("injections: must be a list")
        raw_inj = []
    for n, entry in enumerate(raw_inj):
        path = f"injections[{n}]"
        if not isinstance(entry, dict):
            errors.append(f"{path}: must be a mapping")
            continue
        for key in entry:
            if key not in _INJECTION_KEYS:
                errors.append(f"{path}.{key}: unknown field")
        if "target" not in entry:
            errors.append(f"{path}.target: required")
            continue
        start = _get(entry, path, "start_k", int, errors, required=True)
        end = entry.get("end_k")
        if end is not None and (isinstance(end, bool) or not isinstance(end, int)):
            errors.append(f"{path}.end_k: expected int, got {end!r}")
            end = None
        imode = _get(entry, path, "mode", str, errors, "scale")
        mag = _get(entry, path, "magnitude", float, errors, required=True)
        if start is None or mag is None:
            continue
        try:
            injections.append(AnomalyInjection(entry["target"], start, end, imode, mag))
        except ValueError as exc:
            errors.append(f"{path}: {exc}")

    if errors:
        raise ScenarioError(errors)
    try:
        return Scenario(
            K=K, tau=tau, L=L, seed=seed, stop_on_isolation=stop,
            detector=DetectorParams(n0, a, eps),
            penalty=PenaltyParams(c, c_th, ratio),
            reference=ReferenceConfig(mode, values, post, eps_c, max_iters),
            injections=tuple(injections),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


def check_scenario(scn: Scenario, net: Network) -> list[str]:
    """Cross-check a scenario against a network; returns error messages."""
    errors = []
    for n, inj in enumerate(scn.injections):
        if inj.target not in net:
            errors.append(f"injections[{n}].target: unknown prosumer {inj.target}")
        elif inj.target == net.slack:
            errors.append(f"injections[{n}].target: {inj.target} is the slack prosumer")
    if scn.reference.mode == "fixed":
        missing = [i for i in net.ids if i not in scn.reference.values]
        if missing:
            errors.append(f"reference.values: missing prosumers {missing}")
        for key in ("values", "post_isolation_values"):
            extra = [i for i in getattr(scn.reference, key) if i not in net]
            if extra:
                errors.append(f"reference.{key}: unknown prosumers {extra}")
    return errors


# --- schedule providers -----------------------------------------------------

def schedule_provider(scn: Scenario, net: Network) -> Callable[[Network], ReferenceSchedule]:
    """Provider for the initial network and for every reduced network after isolation."""
    ref = scn.reference
    if ref.mode == "fixed":
        base = fixed_reference(ref.values, net)

        def fixed(current: Network) -> ReferenceSchedule:
            if current is net:
                return base
            return base.merged(ref.post_isolation_values)

        return fixed

    from .dopf import DOPFSolver

    def solve(current: Network) -> ReferenceSchedule:
        return DOPFSolver(current, ref.eps_consensus, ref.max_iters).solve().schedule

    return solve


# --- probe synthesis --------------------------------------------------------

def actual_powers(scn: Scenario, net: Network, refs: ReferenceSchedule, k: int) -> dict:
    """Net MW each prosumer actually delivers at interval ``k``; the slack absorbs deviations."""
    out = {}
    for i in net.ids:
        p = refs[i]
        for inj in scn.injections:
            if inj.target == i and inj.active(k):
                p = inj.apply(p)
        out[i] = p
    s = net.slack
    if s is not None:
        dev = sum(out[i] - refs[i] for i in net.ids if i != s)
        out[s] = refs[s] - dev
    return out


def line_flows(net: Network, injections: Mapping, split: str = "admittance") -> dict:
    """Line-end flows ``(i, j) -> MW`` whose per-prosumer sums equal ``injections``.

    Any surplus of the injections is booked as line losses, shared in
    proportion to conductance; the remaining lossless part follows a
    weighted-Laplacian split (weights ``|y|`` for ``"admittance"``, ``|b|``
    for ``"dc"``).
    """
    ids = net.ids
    lines = net.lines
    if not lines:
        return {}
    pos = {i: n for n, i in enumerate(ids)}
    if split == "dc":
        w = np.array([abs(line.admittance.imag) or abs(line.admittance) for line in lines])
    elif split == "admittance":
        w = np.array([abs(line.admittance) for line in lines])
    else:
        raise ValueError(f"unknown split {split!r}")
    g = np.array([max(line.admittance.real, 0.0) for line in lines])
    share = g / g.sum() if g.sum() > 0 else np.full(len(lines), 1.0 / len(lines))
    total = sum(injections[i] for i in ids)
    loss = total * share
    r = np.array([float(injections[i]) for i in ids])
    lap = np.zeros((len(ids), len(ids)))
    for n, line in enumerate(lines):
        a, b = (pos[e] for e in line.endpoints)
        r[a] -= 0.5 * loss[n]
        r[b] -= 0.5 * loss[n]
        lap[a, a] += w[n]
        lap[b, b] += w[n]
        lap[a, b] -= w[n]
        lap[b, a] -= w[n]
    ground = pos[net.slack] if net.slack is not None else 0
    keep = [n for n in range(len(ids)) if n != ground]
    theta = np.zeros(len(ids))
    if net.is_connected():
        theta[keep] = np.linalg.solve(lap[np.ix_(keep, keep)], r[keep])
    else:
        theta = np.linalg.lstsq(lap, r, rcond=None)[0]
    flows = {}
    for n, line in enumerate(lines):
        i, j = line.endpoints
        phi = w[n] * (theta[pos[i]] - theta[pos[j]])
        half = 0.5 * loss[n]
        flows[(i, j)] = float(phi + half)
        flows[(j, i)] = float(-phi + half)
    return flows


def synthesize_probes(scn: Scenario, net: Network, refs: ReferenceSchedule, k: int,
                      known=None) -> list[ProbeSample]:
    """Probe samples for every line end at interval ``k`` (constant within the interval).

    ``known`` lists every prosumer the run has seen; injections on isolated
    prosumers are ignored, injections on never-seen ids are errors.
    """
    known = set(net.ids) if known is None else set(known)
    for inj in scn.injections:
        if inj.target not in net and inj.target not in known:
            raise ValueError(f"injection targets unknown prosumer {inj.target}")
    split = "dc" if scn.reference.mode == "solve" else "admittance"
    flows = line_flows(net, actual_powers(scn, net, refs, k), split)
    return [ProbeSample(line, l, p) for line, p in sorted(flows.items()) for l in range(1, scn.L + 1)]


# --- world and stepping -----------------------------------------------------

# Mismatches are read at 1e-9 MW resolution. Splitting a prosumer's power over
# its lines and summing it back leaves round-off of ~1e-14 MW that would
# otherwise make a held mismatch look like a changing one to the rate term.
MISMATCH_DIGITS = 9

@dataclass
class World:
    scenario: Scenario
    net: Network
    schedule: ReferenceSchedule
    provider: Callable[[Network], ReferenceSchedule]
    detectors: dict = field(default_factory=dict)
    epoch: int = 0
    k: int = 0
    pending: list = field(default_factory=list)
    known: frozenset = frozenset()


def initial_world(scn: Scenario, net: Network) -> World:
    errors = check_scenario(scn, net)
    if errors:
        raise ScenarioError(errors)
    provider = schedule_provider(scn, net)
    return World(scn, net, provider(net), provider, known=frozenset(net.ids))


@dataclass
class StepRecord:
    interval: int
    epoch: int
    power: list = field(default_factory=list)  # (prosumer, p_ref, actual)
    mismatch: list = field(default_factory=list)  # (observer, target, raw_energy, d)
    detector: list = field(default_factory=list)  # (observer, target, d, D, N, F)
    penalty: list = field(default_factory=list)  # (observer, target, F, raw, penalty, vote)
    aggregate: list = field(default_factory=list)  # (target, value, count)
    utility: list = field(default_factory=list)  # UtilityDecision
    skipped: list = field(default_factory=list)  # (observer, target)
    probes: list = field(default_factory=list)
    isolations: list = field(default_factory=list)  # (target, epoch after)


def _apply_pending(world: World, k: int) -> tuple[World, list]:
    done = []
    for dec in world.pending:
        net, sched, dets = apply_mitigation(dec, world.net, world.provider, world.detectors, world.schedule)
        world = replace(world, net=net, schedule=replace(sched, valid_from=k), detectors=dets,
                        epoch=world.epoch + 1)
        done.append((dec.target, world.epoch))
    return replace(world, pending=[]), done


def step(world: World, k: int, probes: list[ProbeSample] | None = None,
         drop=None) -> tuple[World, StepRecord]:
    """Advance the world through interval ``k``.

    Phases: pending isolations take effect, probes are published and
    delivered, every observer evaluates each neighboring target, penalties
    and votes are computed and the utility decides. Decisions made here take
    effect at ``k + 1``.
    """
    if k != world.k + 1:
        raise ValueError(f"world is at interval {world.k}, cannot step to {k}")
    scn = world.scenario
    world, applied = _apply_pending(world, k)
    rec = StepRecord(k, world.epoch, isolations=applied)
    net, refs = world.net, world.schedule

    actual = actual_powers(scn, net, refs, k)
    rec.power = [(i, refs[i], actual[i]) for i in net.ids]
    samples = probes if probes is not None else synthesize_probes(scn, net, refs, k, world.known)
    rec.probes = samples
    bus = MessageBus(net, scn.seed, drop)
    bus.publish(k, samples)
    bus.deliver(k)

    dets = dict(world.detectors)
    decisions = []
    for target in net.ids:
        if target == net.slack:
            continue
        records, votes = [], []
        for obs in sorted(neighbors(net, target)):
            key = (obs, target)
            st = dets.get(key) or DetectorState(obs, target, k=k - 1)
            try:
                window = collect_window(bus, obs, target, k, scn.L)
            except IncompleteWindowError:
                dets[key] = replace(st, k=k)
                rec.skipped.append((obs, target))
                continue
            rep = energy_mismatch(window, refs, scn.tau, obs)
            d = dead_zone(round(rep.d, MISMATCH_DIGITS), scn.detector.eps_dz)
            st = update_factor(st, d, scn.detector, k)
            dets[key] = st
            pr = penalty_record(st, scn.penalty.c, k)
            vote = check_threshold(pr, scn.penalty.c_th)
            records.append(pr)
            if vote is not None:
                votes.append(vote)
            rec.mismatch.append((obs, target, rep.raw_energy, rep.d))
            rec.detector.append((obs, target, d, st.D, st.N, st.F))
            rec.penalty.append((obs, target, st.F, pr.raw, pr.penalty, vote is not None))
        if records:
            agg = aggregate_penalty(records, target, k)
            rec.aggregate.append((target, agg.value, agg.count))
        dec = utility_decide(votes, net, target, scn.penalty.vote_ratio, k)
        rec.utility.append(dec)
        if dec.isolated:
            decisions.append(dec)
    return replace(world, detectors=dets, k=k, pending=decisions), rec


# --- traces -----------------------------------------------------------------

@dataclass
class SimTrace:
    scenario: Scenario
    steps: list = field(default_factory=list)
    final_epoch: int = 0
    stopped_early_at: int | None = None

    @property
    def isolation_events(self) -> list[dict]:
        events = []
        for s in self.steps:
            for dec in s.utility:
                if dec.isolated:
                    events.append({"interval": s.interval, "target": dec.target,
                                   "votes": dec.votes_received, "neighbors": dec.neighbor_count,
                                   "effective_from": s.interval + 1})
        return events

    def factor(self, observer, target) -> dict:
        return {s.interval: row[5] for s in self.steps for row in s.detector
                if row[0] == observer and row[1] == target}

    def penalty(self, observer, target) -> dict:
        return {s.interval: row[4] for s in self.steps for row in s.penalty
                if row[0] == observer and row[1] == target}

    def mismatch(self, observer, target) -> dict:
        return {s.interval: row[3] for s in self.steps for row in s.mismatch
                if row[0] == observer and row[1] == target}

    def votes(self) -> list[tuple]:
        return [(s.interval, row[0], row[1]) for s in self.steps for row in s.penalty if row[5]]

    def summary(self) -> dict:
        max_f: dict = {}
        for s in self.steps:
            for row in s.detector:
                max_f[row[1]] = max(max_f.get(row[1], 0.0), row[5])
        return {
            "intervals": len(self.steps),
            "stopped_early_at": self.stopped_early_at,
            "topology_epochs": self.final_epoch,
            "max_factor": {str(i): max_f[i] for i in sorted(max_f)},
            "isolation_events": self.isolation_events,
            "votes": len(self.votes()),
        }


def run(scn: Scenario, net: Network, probes: Mapping | None = None, drop=None) -> SimTrace:
    """Simulate ``scn.K`` intervals; ``probes`` replays recorded samples per interval."""
    errors = check_scenario(scn, net)
    if errors:
        raise ScenarioError(errors)
    try:
        world = initial_world(scn, net)
    except Exception as exc:
        raise SimulationError(0, exc) from exc
    trace = SimTrace(scn)
    for k in range(1, scn.K + 1):
        try:
            given = None
            if probes is not None:
                if k not in probes:
                    raise ValueError("probe replay has no samples for this interval")
                given = probes[k]
            world, rec = step(world, k, given, drop)
        except Exception as exc:
            raise SimulationError(k, exc) from exc
        trace.steps.append(rec)
        if scn.stop_on_isolation and world.pending:
            trace.stopped_early_at = k
            break
    trace.final_epoch = world.epoch + len(world.pending)
    return trace


def _f(x) -> str:
    return repr(float(x))


def _write(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_trace(trace: SimTrace, out_dir) -> dict:
    """Write trace, plot-series and summary files; returns ``name -> path``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = trace.steps
    paths = {}
    paths["detector"] = _write(out / "detector.csv", ("interval", "observer", "target", "d_mw", "D", "N", "F"),
                               ((s.interval, o, t, _f(d), _f(D), _f(N), _f(F))
                                for s in st for o, t, d, D, N, F in s.detector))
    paths["mismatch"] = _write(out / "mismatch.csv",
                               ("interval", "observer", "target", "raw_energy_mwmin", "d_unfiltered_mw"),
                               ((s.interval, o, t, _f(e), _f(d)) for s in st for o, t, e, d in s.mismatch))
    paths["penalty"] = _write(out / "penalty.csv",
                              ("interval", "observer", "target", "F", "penalty_raw", "penalty", "vote"),
                              ((s.interval, o, t, _f(F), _f(raw), _f(p), int(v))
                               for s in st for o, t, F, raw, p, v in s.penalty))
    paths["utility"] = _write(out / "utility.csv",
                              ("interval", "target", "votes", "neighbor_count", "ratio", "isolated"),
                              ((s.interval, d.target, d.votes_received, d.neighbor_count,
                                _f(d.vote_ratio_required), int(d.isolated)) for s in st for d in s.utility))
    paths["intervals"] = _write(out / "intervals.csv",
                                ("interval", "epoch", "prosumers", "max_F", "votes", "isolations_decided",
                                 "skipped_windows"),
                                ((s.interval, s.epoch, len(s.power),
                                  _f(max((r[5] for r in s.detector), default=0.0)),
                                  sum(1 for r in s.penalty if r[5]),
                                  sum(1 for d in s.utility if d.isolated), len(s.skipped)) for s in st))
    paths["probes"] = out / "probes.csv"
    write_probes(paths["probes"], ((s.interval, p) for s in st for p in s.probes))

    # plot-ready series, one per panel
    paths["series_power"] = _write(out / "series_power.csv",
                                   ("interval", "prosumer", "epoch", "p_ref_mw", "actual_mw"),
                                   ((s.interval, i, s.epoch, _f(r), _f(a)) for s in st for i, r, a in s.power))
    first_obs = {}
    for s in st:
        for o, t, *_ in s.detector:
            first_obs.setdefault((s.interval, t), o)
    paths["series_factor"] = _write(out / "series_factor.csv", ("interval", "target", "observer", "F"),
                                    ((s.interval, t, o, _f(F)) for s in st for o, t, _, _, _, F in s.detector
                                     if first_obs[(s.interval, t)] == o))
    paths["series_penalty"] = _write(out / "series_penalty.csv",
                                     ("interval", "target", "penalty_mean", "reports"),
                                     ((s.interval, t, _f(v), n) for s in st for t, v, n in s.aggregate))
    paths["series_isolation"] = _write(out / "series_isolation.csv",
                                       ("interval", "target", "votes", "isolation_signal"),
                                       ((s.interval, d.target, d.votes_received, int(d.isolated))
                                        for s in st for d in s.utility))
    summary = trace.summary()
    summary["files"] = {k: p.name for k, p in sorted(paths.items())}
    paths["summary"] = out / "summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths
