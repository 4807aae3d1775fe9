"""Fit the 5-bus fixture's linear cost terms and load scale to a target dispatch.

Line data and the quadratic/constant cost terms are held fixed. The linear cost
terms of prosumers 2 and 3 and a common scale on the loads at 4 and 5 are tuned
until the centralized AC OPF dispatch matches the target net injections.

Usage: python tools/calibrate_five_bus.py
"""
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import centralized_opf  # noqa: E402

from gridwatch.grid import Prosumer, make_network  # noqa: E402

TARGET = {1: 23.56, 2: 49.56, 3: 39.04}
LINES_RX = [(1, 2, 0.02, 0.06), (1, 3, 0.08, 0.24), (2, 3, 0.06, 0.18), (2, 4, 0.06, 0.18),
            (2, 5, 0.04, 0.12), (3, 4, 0.01, 0.03), (4, 5, 0.08, 0.24)]


def build(c1_2, c1_3, k, digits=None):
    l4 = (40 * k, 5 * k)
    l5 = (60 * k, 10 * k)
    if digits is not None:
        l4 = tuple(round(v, digits) for v in l4)
        l5 = tuple(round(v, digits) for v in l5)
    ps = [
        Prosumer(1, (0.008, 7.0, 200.0), (0, 200), (-100, 150), (0.95, 1.05), (0, 0), True),
        Prosumer(2, (0.009, c1_2, 180.0), (0, 150), (-80, 120), (0.95, 1.05), (20, 10)),
        Prosumer(3, (0.007, c1_3, 140.0), (0, 50), (-60, 80), (0.95, 1.05), (0, 0)),
        Prosumer(4, (0, 0, 0), (0, 0), (0, 0), (0.95, 1.05), l4),
        Prosumer(5, (0, 0, 0), (0, 0), (0, 0), (0.95, 1.05), l5),
    ]
    lines = [(i, j, 1 / complex(r, x)) for i, j, r, x in LINES_RX]
    return make_network(ps, lines), l4, l5


def fit(digits=None, x0=(6.3, 6.8, 1.1), fix_k=None):
    def resid(theta):
        if fix_k is None:
            c2, c3, k = theta
        else:
            (c2, c3), k = theta, fix_k
        net, _, _ = build(c2, c3, k, digits)
        got, _ = centralized_opf(net)
        r = [got[i] - TARGET[i] for i in (2, 3)]
        if fix_k is None:
            r.append(got[1] - TARGET[1])
        return r

    start = x0 if fix_k is None else x0[:2]
    return least_squares(resid, start, xtol=1e-12, ftol=1e-12, diff_step=1e-4)


if __name__ == "__main__":
    sol = fit()
    c2, c3, k = sol.x
    print("continuous fit:", c2, c3, k, "residual", sol.fun)
    sol2 = fit(digits=2, x0=(c2, c3, k), fix_k=k)
    c2, c3 = (round(v, 4) for v in sol2.x)
    net, l4, l5 = build(c2, c3, k, digits=2)
    got, info = centralized_opf(net)
    print(f"c1_2={c2} c1_3={c3} load4={l4} load5={l5}")
    print("dispatch:", {i: round(v, 3) for i, v in got.items()})
