"""Find the range of isolation thresholds that isolate prosumer 2 at a given interval.

Runs the bundled two-anomaly scenario with a varying ``c_th`` and
binary-searches both ends of the interval of thresholds whose first
isolation decision lands on ``--at`` (default 22).

Usage: python tools/calibrate_threshold.py [--at 22]
"""
import argparse
from dataclasses import replace
from importlib.resources import files

from gridwatch.grid import load_case
from gridwatch.sim import load_scenario, run


def first_isolation(scn, net, c_th):
    s = replace(scn, penalty=replace(scn.penalty, c_th=c_th), K=max(scn.K, 40))
    events = run(s, net).isolation_events
    return events[0]["interval"] if events else None


def search(scn, net, at, lo, hi, want_earlier):
    """Bisection on the boundary where the isolation interval changes."""
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        k = first_isolation(scn, net, mid)
        late = k is None or k > at
        if want_earlier:
            lo, hi = (mid, hi) if not late and k < at else (lo, mid)
        else:
            lo, hi = (mid, hi) if not late else (lo, mid)
    return lo, hi


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--at", type=int, default=22)
    args = ap.parse_args()
    data = files("gridwatch") / "data"
    net = load_case(data / "five_bus.yaml")
    scn = load_scenario(data / "two_anomaly.yaml")
    # lower end: below it isolation comes earlier; upper end: above it, later
    lo, _ = search(scn, net, args.at, 1.0, 1e4, want_earlier=True)
    _, hi = search(scn, net, args.at, 1.0, 1e4, want_earlier=False)
    print(f"thresholds in ({lo:.6f}, {hi:.6f}] isolate at k = {args.at}")
    print(f"midpoint: {0.5 * (lo + hi):.1f}")


if __name__ == "__main__":
    main()
