from importlib.resources import files

import pytest

from gridwatch.grid import Prosumer, load_case, make_network
from gridwatch.sim import load_scenario

DATA = files("gridwatch") / "data"


@pytest.fixture(scope="session")
def five_bus():
    return load_case(DATA / "five_bus.yaml")


@pytest.fixture(scope="session")
def two_anomaly():
    return load_scenario(DATA / "two_anomaly.yaml")


def lossless_toy(costs, loads, p_bounds, x=0.1):
    """Chain of prosumers joined by purely reactive lines, voltages pinned at 1 pu."""
    ps = []
    for n, (cost, load, pb) in enumerate(zip(costs, loads, p_bounds), start=1):
        ps.append(Prosumer(n, cost, pb, (-100.0, 100.0), (1.0, 1.0), (load, 0.0), is_slack=(n == 1)))
    lines = [(n, n + 1, 1 / complex(0.0, x)) for n in range(1, len(ps))]
    return make_network(ps, lines)
