import math

import numpy as np
import pytest

from gridwatch import kernels
from oracles import scalar_recursion

BACKENDS = kernels.backends()


def random_region(rng, m):
    v = rng.uniform(0.9, 1.1, m + 1)
    d = rng.uniform(-0.3, 0.3, m + 1)
    g = rng.uniform(0.0, 10.0, m)
    b = -rng.uniform(1.0, 40.0, m)
    return v, d, g, b


def test_compiled_backend_available():
    # the build ships the extension; the fallback is always importable
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_flows_match_complex_arithmetic(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(1)
    for m in range(0, 5):
        v, d, g, b = random_region(rng, m)
        p, q = mod.region_flows(v, d, g, b)
        u = v * np.exp(1j * d)
        # star: centre 0 attached to each aux bus k with admittance y_k
        s0 = 0j
        for k in range(m):
            y = complex(g[k], b[k])
            s0 += u[0] * np.conj(y * (u[0] - u[k + 1]))
            sk = u[k + 1] * np.conj(y * (u[k + 1] - u[0]))
            assert p[k + 1] == pytest.approx(sk.real, abs=1e-12)
            assert q[k + 1] == pytest.approx(sk.imag, abs=1e-12)
        assert p[0] == pytest.approx(s0.real, abs=1e-12)
        assert q[0] == pytest.approx(s0.imag, abs=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_jacobian_matches_central_differences(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(2)
    h = 1e-6
    for m in range(1, 5):
        v, d, g, b = random_region(rng, m)
        jac = mod.region_jacobian(v, d, g, b)

        def flat(v_, d_):
            p, q = mod.region_flows(v_, d_, g, b)
            out = np.empty(2 * (m + 1))
            out[0::2], out[1::2] = p, q
            return out

        for k in range(m + 1):
            for which in (0, 1):
                vp, vm, dp, dm = v.copy(), v.copy(), d.copy(), d.copy()
                if which == 0:
                    vp[k] += h
                    vm[k] -= h
                else:
                    dp[k] += h
                    dm[k] -= h
                fd = (flat(vp, dp) - flat(vm, dm)) / (2 * h)
                np.testing.assert_allclose(jac[:, 2 * k + which], fd, rtol=1e-5, atol=1e-7)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_backends_agree():
    py, cy = BACKENDS["python"], BACKENDS["compiled"]
    rng = np.random.default_rng(3)
    for m in range(0, 6):
        args = random_region(rng, m)
        for a, b in zip(py.region_flows(*args), cy.region_flows(*args)):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)
        np.testing.assert_allclose(py.region_jacobian(*args), cy.region_jacobian(*args), rtol=1e-13, atol=1e-14)
    d = rng.normal(0, 3, 500) * (rng.random(500) > 0.3)
    for a, b in zip(py.factor_series(d, 3.0, 1.0, 0.1), cy.factor_series(d, 3.0, 1.0, 0.1)):
        np.testing.assert_array_equal(a, b)
    f = rng.uniform(-50, 400, 200)
    np.testing.assert_array_equal(py.penalty_series(f, 1.06), cy.penalty_series(f, 1.06))
    for args in [(0.0, 0.0, 1.0, 3.0, 1.0, 0.1), (5.0, 1.0, 1.0, 3.0, 2.0, 0.1), (1e300, 0, 1e10, 3, 1e10, 0.1)]:
        assert py.factor_step(*args) == cy.factor_step(*args)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_factor_series_matches_oracle(name):
    mod = BACKENDS[name]
    rng = np.random.default_rng(4)
    d = np.where(rng.random(300) < 0.4, 0.0, rng.normal(0, 5, 300))
    f, _, _ = mod.factor_series(d, 3.0, 1.0, 0.1)
    ref, _ = scalar_recursion(d.tolist(), 3.0, 1.0, 0.1, 1.06)
    np.testing.assert_array_equal(f, ref)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_penalty_saturates(name):
    mod = BACKENDS[name]
    assert mod.penalty_raw(0.0, 1.06) == 0.0
    assert mod.penalty_raw(2.0, 1.06) == pytest.approx(0.1236, abs=1e-12)
    assert mod.penalty_raw(1e6, 1.06) == kernels.PENALTY_SENTINEL
    f, _, _, sat = mod.factor_step(1e300, 0.0, 1e200, 3.0, 1.0, 0.1)
    assert sat and f == kernels.FACTOR_CAP and math.isfinite(f)
