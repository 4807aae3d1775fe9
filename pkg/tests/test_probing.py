import math

import pytest

from gridwatch.dopf import fixed_reference
from gridwatch.grid import neighbors
from gridwatch.probing import (
    IncompleteWindowError,
    MeasurementWindow,
    MessageBus,
    ProbeSample,
    collect_window,
    dead_zone,
    energy_mismatch,
    read_probes,
    write_probes,
)
from gridwatch.sim import synthesize_probes

REF = fixed_reference({1: 23.56, 2: 49.56, 3: 39.04, 4: -44.16, 5: -66.23})


def window_for(profile, target=2, nbrs=(1, 3, 4, 5), interval=1):
    """Window whose neighbor-sum at sample l equals ``profile[l]``, spread unevenly over lines."""
    weights = [0.1, 0.2, 0.3, 0.4][: len(nbrs)]
    total = sum(weights)
    samples = {k: tuple(p * w / total for p in profile) for k, w in zip(nbrs, weights)}
    return MeasurementWindow(interval, target, samples, len(profile))


def bus_for(net, scn, k, drop=None):
    bus = MessageBus(net, scn.seed, drop)
    bus.publish(k, synthesize_probes(scn, net, REF, k))
    bus.deliver(k)
    return bus


def test_probe_sample_index():
    with pytest.raises(ValueError):
        ProbeSample((1, 2), 0, 1.0)


def test_window_must_be_complete():
    with pytest.raises(ValueError):
        MeasurementWindow(1, 2, {1: (1.0, 2.0)}, 3)


def test_mismatch_exact_reference():
    rep = energy_mismatch(window_for([49.56] * 30), REF, 5.0)
    assert rep.d == pytest.approx(0.0, abs=1e-12)


def test_mismatch_fifteen_percent_over():
    rep = energy_mismatch(window_for([1.15 * 49.56] * 30), REF, 5.0)
    assert rep.d == pytest.approx(7.434, abs=1e-9)
    assert rep.raw_energy == pytest.approx(5.0 * 7.434, abs=1e-9)
    assert rep.d == rep.raw_energy / 5.0


def test_mismatch_half_interval_under():
    profile = [0.9 * 49.56] * 15 + [49.56] * 15
    rep = energy_mismatch(window_for(profile), REF, 5.0)
    assert rep.d == pytest.approx(-2.478, abs=1e-9)


def test_mismatch_rejects_bad_tau():
    with pytest.raises(ValueError):
        energy_mismatch(window_for([49.56] * 3), REF, 0.0)


@pytest.mark.parametrize("d,expected", [(0.05, 0.0), (7.434, 7.434), (-0.1, 0.0), (0.1, 0.0),
                                        (0.1000001, 0.1000001), (-3.0, -3.0)])
def test_dead_zone(d, expected):
    assert dead_zone(d, 0.1) == expected


def test_dead_zone_width():
    with pytest.raises(ValueError):
        dead_zone(1.0, 0.0)


def test_window_observer_three_target_two(five_bus, two_anomaly):
    bus = bus_for(five_bus, two_anomaly, 4)
    w = collect_window(bus, 3, 2, 4, two_anomaly.L)
    assert set(w.samples) == set(neighbors(five_bus, 2)) == {1, 3, 4, 5}
    assert all(len(v) == two_anomaly.L for v in w.samples.values())
    # k = 4 carries the +15% injection on prosumer 2
    assert w.neighbor_sum(0) == pytest.approx(1.15 * 49.56, abs=1e-9)
    assert energy_mismatch(w, REF, two_anomaly.tau).d == pytest.approx(7.434, abs=1e-9)


def test_symmetric_observers(five_bus, two_anomaly):
    bus = bus_for(five_bus, two_anomaly, 9)
    ds = {j: energy_mismatch(collect_window(bus, j, 2, 9, two_anomaly.L), REF, 5.0).d
          for j in sorted(neighbors(five_bus, 2))}
    assert len(set(ds.values())) == 1
    assert ds[1] == pytest.approx(-4.956, abs=1e-9)


def test_non_adjacent_observer(five_bus, two_anomaly):
    bus = bus_for(five_bus, two_anomaly, 1)
    with pytest.raises(ValueError):
        collect_window(bus, 1, 5, 1, two_anomaly.L)


def test_dropped_message(five_bus, two_anomaly):
    def drop(msg):
        return msg.sample.line == (2, 4) and msg.sample.sample_index == 7

    bus = bus_for(five_bus, two_anomaly, 3, drop)
    with pytest.raises(IncompleteWindowError) as err:
        collect_window(bus, 3, 2, 3, two_anomaly.L)
    assert err.value.missing == [(4, 7)]
    assert err.value.observer == 3 and err.value.interval == 3
    # other targets are unaffected
    collect_window(bus, 2, 3, 3, two_anomaly.L)


def test_delivery_order_does_not_matter(five_bus, two_anomaly):
    from dataclasses import replace

    windows = []
    for seed in (0, 1, 99):
        bus = bus_for(five_bus, replace(two_anomaly, seed=seed), 4)
        windows.append(collect_window(bus, 4, 2, 4, two_anomaly.L))
    assert windows[0] == windows[1] == windows[2]


def test_bus_barrier(five_bus):
    bus = MessageBus(five_bus)
    bus.publish(1, [ProbeSample((1, 2), 1, 1.0)])
    with pytest.raises(RuntimeError):
        bus.received(1, 1, (1, 2))
    assert len(bus.deliver(1)) == 1
    with pytest.raises(RuntimeError):
        bus.publish(1, [])


def test_relay_beyond_two_hops_not_received(five_bus):
    bus = MessageBus(five_bus)
    bus.publish(1, [ProbeSample((4, 5), 1, 1.0)])
    bus.deliver(1)
    # the (4, 5) sample is relayed by 5, which is two hops from 1 via 2
    assert bus.received(1, 1, (4, 5))
    assert 5 in bus.reachable(1)


def test_probe_file_roundtrip(tmp_path):
    rows = [(1, ProbeSample((1, 2), 1, 0.1 + 0.2)), (2, ProbeSample((2, 1), 3, -1e-17))]
    path = tmp_path / "p.csv"
    write_probes(path, rows)
    back = read_probes(path)
    assert back == {1: [rows[0][1]], 2: [rows[1][1]]}


def test_probe_file_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("interval,from,to\n1,2,3\n")
    with pytest.raises(ValueError):
        read_probes(bad)
    nan = tmp_path / "nan.csv"
    nan.write_text("interval,from,to,sample_index,power_mw\n1,1,2,1,nan\n")
    with pytest.raises(ValueError, match=":2:"):
        read_probes(nan)
