from dataclasses import replace

import pytest

from gridwatch.grid import neighbors
from gridwatch.sim import (
    AnomalyInjection,
    Scenario,
    ScenarioError,
    SimulationError,
    actual_powers,
    initial_world,
    line_flows,
    parse_scenario,
    run,
    step,
    synthesize_probes,
    write_trace,
)
from oracles import scalar_recursion

QUIET = """
sim: {K: 1}
reference:
  mode: fixed
  values: {1: 23.56, 2: 49.56, 3: 39.04, 4: -44.16, 5: -66.23}
injections: []
"""


def quiet(**sim):
    scn = parse_scenario(QUIET)
    return replace(scn, **sim)


# --- scenario files -----------------------------------------------------------

def test_bundled_scenario(two_anomaly):
    s = two_anomaly
    assert (s.K, s.tau, s.L) == (24, 5.0, 30)
    assert (s.detector.n0, s.detector.a, s.detector.eps_dz) == (3.0, 1.0, 0.1)
    assert s.penalty.c == 1.06 and s.penalty.vote_ratio == 0.5
    # threshold calibrated so isolation lands at k = 22 with d in MW
    assert 200.263 < s.penalty.c_th <= 267.645
    assert [(i.target, i.start_k, i.end_k, i.magnitude) for i in s.injections] == [(2, 4, 5, 1.15), (2, 8, None, 0.9)]


def test_defaults_and_quiescent():
    s = parse_scenario(QUIET)
    assert s.L == 30 and s.penalty.vote_ratio == 0.5 and s.penalty.c_th == 1300.0
    assert s.injections == ()


def test_bad_injection_window():
    text = QUIET.replace("injections: []", "injections:\n  - {target: 2, start_k: 5, end_k: 5, magnitude: 1.1}")
    with pytest.raises(ScenarioError, match=r"injections\[0\]"):
        parse_scenario(text)


def test_errors_carry_field_paths():
    text = """
sim: {K: 0.5, L: -1, bogus: 1}
penalty: {c: 0.9}
reference: {mode: guess}
injections: [{target: 2}]
extra: {}
"""
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    msgs = "\n".join(err.value.errors)
    for path in ("sim.K", "sim.bogus", "reference.mode", "injections[0].start_k", "scenario: unknown section 'extra'"):
        assert path in msgs


@pytest.mark.parametrize("text", ["- a list", "sim: [", "reference: {mode: fixed, values: {}}\nsim: {K: 2}"])
def test_malformed(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_range_errors_become_scenario_errors():
    with pytest.raises(ScenarioError, match="K"):
        parse_scenario(QUIET.replace("K: 1", "K: 0"))
    with pytest.raises(ScenarioError, match="c must be > 1"):
        parse_scenario(QUIET + "penalty: {c: 1.0}\n")


def test_injection_validation():
    with pytest.raises(ValueError):
        AnomalyInjection(2, 3, 3)
    with pytest.raises(ValueError):
        AnomalyInjection(2, 3, mode="ramp")
    inj = AnomalyInjection(2, 3, 5, "offset", -2.0)
    assert [inj.active(k) for k in (2, 3, 4, 5)] == [False, True, True, False]
    assert inj.apply(10.0) == 8.0


def test_unknown_or_slack_target(five_bus):
    for target in (9, 1):
        scn = replace(quiet(), injections=(AnomalyInjection(target, 1, magnitude=1.1),))
        with pytest.raises(ScenarioError):
            run(scn, five_bus)


# --- probe synthesis ------------------------------------------------------------

def test_probe_sums(five_bus, two_anomaly):
    refs = initial_world(two_anomaly, five_bus).schedule
    for k, expect in ((4, 56.994), (1, 49.56), (8, 44.604), (12, 44.604)):
        samples = synthesize_probes(two_anomaly, five_bus, refs, k)
        assert {s.sample_index for s in samples} == set(range(1, 31))
        for l in (1, 30):
            total = sum(s.power for s in samples if s.line[0] == 2 and s.sample_index == l)
            assert total == pytest.approx(expect, abs=1e-9)


def test_slack_absorbs_deviation(five_bus, two_anomaly):
    refs = initial_world(two_anomaly, five_bus).schedule
    act = actual_powers(two_anomaly, five_bus, refs, 4)
    assert act[1] == pytest.approx(23.56 - 0.15 * 49.56)
    assert sum(act.values()) == pytest.approx(sum(refs[i] for i in five_bus.ids))


def test_lossless_flows_antisymmetric(five_bus):
    inj = {1: 10.0, 2: -4.0, 3: 1.5, 4: -5.0, 5: -2.5}
    flows = line_flows(five_bus, inj)
    for (i, j), p in flows.items():
        assert p == -flows[(j, i)]
    for i in five_bus.ids:
        assert sum(p for (a, _), p in flows.items() if a == i) == pytest.approx(inj[i], abs=1e-12)


def test_lossy_flows_book_losses(five_bus):
    inj = {1: 10.0, 2: -4.0, 3: 1.5, 4: -5.0, 5: -2.0}
    for split in ("admittance", "dc"):
        flows = line_flows(five_bus, inj, split)
        loss = sum(flows[(i, j)] + flows[(j, i)] for (i, j) in flows if i < j)
        assert loss == pytest.approx(0.5, abs=1e-12)
        assert all(flows[(i, j)] + flows[(j, i)] >= 0 for (i, j) in flows)
    with pytest.raises(ValueError):
        line_flows(five_bus, inj, "ac")


# --- stepping and runs ------------------------------------------------------------

def test_quiescent_single_interval(five_bus):
    trace = run(quiet(), five_bus)
    assert len(trace.steps) == 1
    rows = trace.steps[0].detector
    # every non-slack target is watched by each of its neighbors
    expect = sum(len(neighbors(five_bus, i)) for i in five_bus.ids if i != five_bus.slack)
    assert len(rows) == expect
    assert all(r[2] == 0.0 and r[5] == 0.0 for r in rows)
    assert trace.votes() == [] and trace.isolation_events == []


def test_step_ordering(five_bus, two_anomaly):
    world = initial_world(two_anomaly, five_bus)
    with pytest.raises(ValueError):
        step(world, 2)
    world, rec = step(world, 1)
    keys = [(r[1], r[0]) for r in rec.detector]
    assert keys == sorted(keys)


def test_rows_ordered(two_anomaly, five_bus):
    trace = run(two_anomaly, five_bus)
    keys = [(s.interval, r[1], r[0]) for s in trace.steps for r in s.detector]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_two_simultaneous_injections(five_bus):
    inj = (AnomalyInjection(2, 3, magnitude=1.1), AnomalyInjection(3, 5, 9, "offset", -2.0))
    scn = replace(quiet(K=12), injections=inj, penalty=replace(quiet().penalty, c_th=1e9))
    trace = run(scn, five_bus)
    d2 = [round(0.1 * 49.56, 9) if k >= 3 else 0.0 for k in range(1, 13)]
    d3 = [-2.0 if 5 <= k < 9 else 0.0 for k in range(1, 13)]
    for target, ds in ((2, d2), (3, d3)):
        expect, _ = scalar_recursion(ds, 3.0, 1.0, 0.1, 1.06)
        for obs in neighbors(five_bus, target):
            got = trace.factor(obs, target)
            assert [got[k] for k in range(1, 13)] == pytest.approx(expect, rel=1e-12, abs=0)
    # prosumers 4 and 5 only see the slack absorbing the deviations, not their own
    assert max(trace.factor(3, 4).values()) == 0.0


def test_pipeline_matches_oracle(two_anomaly, five_bus):
    trace = run(two_anomaly, five_bus)
    c = two_anomaly.penalty.c
    pairs = {(r[0], r[1]) for s in trace.steps for r in s.detector}
    for obs, tgt in pairs:
        ks = sorted(trace.factor(obs, tgt))
        by_k = {s.interval: s for s in trace.steps}
        ds = [next(r[2] for r in by_k[k].detector if r[:2] == (obs, tgt)) for k in ks]
        F, pen = scalar_recursion(ds, 3.0, 1.0, 0.1, c)
        got_f = [trace.factor(obs, tgt)[k] for k in ks]
        got_p = [trace.penalty(obs, tgt)[k] for k in ks]
        assert got_f == pytest.approx(F, rel=1e-12, abs=0)
        assert got_p == pytest.approx(pen, rel=1e-12, abs=0)


def test_topology_epoch(two_anomaly, five_bus):
    trace = run(two_anomaly, five_bus)
    (event,) = trace.isolation_events
    assert event["target"] == 2 and event["interval"] == 22 and event["effective_from"] == 23
    for s in trace.steps:
        assert s.epoch == (0 if s.interval <= 22 else 1)
        if s.interval > 22:
            assert all(2 not in r[:2] for r in s.detector)
            assert 2 not in [p[0] for p in s.power]
            assert all(2 not in p.line for p in s.probes)
    assert trace.steps[22].isolations == [(2, 1)]
    assert trace.final_epoch == 1
    after = {p[0]: p[1] for p in trace.steps[23].power}
    assert (after[1], after[3]) == (83.01, 50.0)


def test_stop_on_isolation(two_anomaly, five_bus):
    trace = run(replace(two_anomaly, stop_on_isolation=True), five_bus)
    assert trace.stopped_early_at == 22 and len(trace.steps) == 22
    assert trace.final_epoch == 1


def test_determinism_and_seed_independence(two_anomaly, five_bus, tmp_path):
    a = write_trace(run(two_anomaly, five_bus), tmp_path / "a")
    b = write_trace(run(two_anomaly, five_bus), tmp_path / "b")
    c = write_trace(run(replace(two_anomaly, seed=7), five_bus), tmp_path / "c")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()
        assert a[name].read_bytes() == c[name].read_bytes()  # delivery order never changes results


def test_probe_replay(two_anomaly, five_bus, tmp_path):
    from gridwatch.probing import read_probes

    first = write_trace(run(two_anomaly, five_bus), tmp_path / "a")
    probes = read_probes(first["probes"])
    again = write_trace(run(two_anomaly, five_bus, probes), tmp_path / "b")
    for name in ("detector", "penalty", "utility", "mismatch"):
        assert first[name].read_bytes() == again[name].read_bytes()
    del probes[5]
    with pytest.raises(SimulationError) as err:
        run(two_anomaly, five_bus, probes)
    assert err.value.interval == 5


def test_dropped_messages_skip_updates(two_anomaly, five_bus):
    def drop(msg):
        return msg.interval == 9 and msg.sample.line == (2, 5) and msg.sample.sample_index == 1

    trace = run(two_anomaly, five_bus, drop=drop)
    s9 = trace.steps[8]
    # prosumer 1 gets (2, 5) samples only through relay 5, so every observer misses them
    assert sorted(s9.skipped) == [(1, 2), (3, 2), (4, 2), (5, 2)]
    f = trace.factor(3, 2)
    assert 9 not in f and f[10] == pytest.approx(f[8] + 4.956, rel=1e-12)


def test_written_files(two_anomaly, five_bus, tmp_path):
    paths = write_trace(run(two_anomaly, five_bus), tmp_path)
    for name in ("series_power", "series_factor", "series_penalty", "series_isolation", "summary"):
        assert paths[name].exists()
    header = paths["detector"].read_text().splitlines()[0]
    assert header == "interval,observer,target,d_mw,D,N,F"
    assert paths["penalty"].read_text().splitlines()[0] == "interval,observer,target,F,penalty_raw,penalty,vote"
    assert paths["utility"].read_text().splitlines()[0] == "interval,target,votes,neighbor_count,ratio,isolated"
    iso = [l for l in paths["series_isolation"].read_text().splitlines()[1:] if l.endswith(",1")]
    assert iso == ["22,2,4,1"]


def test_solve_mode(two_anomaly, five_bus):
    scn = replace(two_anomaly, reference=replace(two_anomaly.reference, mode="solve"))
    trace = run(scn, five_bus)
    assert [e["interval"] for e in trace.isolation_events] == [22]
    first = {p[0]: p[1] for p in trace.steps[0].power}
    assert first[2] == pytest.approx(49.5586, abs=1e-3)


def test_solver_failure_aborts_with_interval(two_anomaly, five_bus):
    scn = replace(two_anomaly, reference=replace(two_anomaly.reference, mode="solve", max_iters=1))
    with pytest.raises(SimulationError) as err:
        run(scn, five_bus)
    assert err.value.interval == 0
