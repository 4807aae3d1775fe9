"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from gridwatch.kernels import backends


def cases(rng):
    d = rng.normal(0.0, 5.0, 100_000)
    d[np.abs(d) <= 0.1] = 0.0
    f = np.abs(rng.normal(0.0, 50.0, 100_000))
    n = 6  # prosumer bus plus five auxiliary buses
    v = rng.uniform(0.95, 1.05, n)
    delta = rng.normal(0.0, 0.05, n)
    g = rng.uniform(0, 10, n - 1)
    b = -rng.uniform(1, 30, n - 1)
    return {
        "factor_series (1e5 steps)": lambda k: k.factor_series(d, 3.0, 1.0, 0.1),
        "penalty_series (1e5 values)": lambda k: k.penalty_series(f, 1.06),
        "factor_step (single call)": lambda k: k.factor_step(12.0, 3.0, 4.0, 3.0, 1.0, 0.1),
        "region_flows (5 aux buses)": lambda k: k.region_flows(v, delta, g, b),
        "region_jacobian (5 aux buses)": lambda k: k.region_jacobian(v, delta, g, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = backends()
    if "compiled" not in impls:
        print("compiled extension not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}" + "".join(f"{name:>14}" for name in impls) + ("     speed-up" if len(impls) > 1 else ""))
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in impls.items():
            timer = timeit.Timer(lambda: fn(mod))
            number, _ = timer.autorange()
            times[name] = min(timer.repeat(args.repeat, number)) / number
        row = f"{label:<30}" + "".join(f"{times[n] * 1e6:>12.1f}us" for n in impls)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>12.1f}x"
        print(row)


if __name__ == "__main__":
    main()
