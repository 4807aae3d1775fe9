import math

import pytest

from gridwatch.detection import (
    DetectorParams,
    DetectorState,
    decay_factor,
    factor_series,
    rate_term,
    reset,
    update_factor,
)
from oracles import scalar_recursion

P = DetectorParams(n0=3.0, a=1.0, eps_dz=0.1)


def run_stream(ds, state=None):
    st = state or DetectorState(1, 2)
    out = []
    for d in ds:
        st = update_factor(st, d, P)
        out.append(st.F)
    return st, out


@pytest.mark.parametrize("kw", [dict(n0=1.0), dict(a=0.0), dict(eps_dz=0.0), dict(n0=float("nan"))])
def test_params_validated(kw):
    with pytest.raises(ValueError):
        DetectorParams(**kw)


def test_rate_term():
    assert rate_term(7.434, 0.0, 1.0) == 7.434
    assert rate_term(-4.956, -4.956, 1.0) == -1.0
    assert rate_term(4.956, 4.956, 1.0) == 1.0
    assert rate_term(0.0, 0.0, 1.0) == 0.0
    assert rate_term(2.0, 1.0, 0.5) == 0.5


def test_decay_factor():
    assert decay_factor(7.434, P) == 1.0
    assert decay_factor(0.0, P) == 3.0
    assert decay_factor(0.1, P) == 3.0


def test_constant_stream():
    _, fs = run_stream([1.0, 1.0, 1.0])
    assert fs == [1.0, 2.0, 3.0]


def test_spike_then_decay():
    st, fs = run_stream([7.434, 0.0, 0.0, 0.0])
    assert fs[0] == pytest.approx(55.26, abs=5e-3)
    assert fs[0] == 7.434 ** 2
    assert [round(f, 2) for f in fs[1:]] == [18.42, 6.14, 2.05]


def test_rest_is_fixed_point():
    st, fs = run_stream([0.0] * 5)
    assert fs == [0.0] * 5 and st.k == 5


def test_interval_must_advance_by_one():
    st = DetectorState(1, 2, k=3)
    assert update_factor(st, 0.0, P, 4).k == 4
    with pytest.raises(ValueError):
        update_factor(st, 0.0, P, 5)
    with pytest.raises(ValueError):
        update_factor(st, 0.0, P, 3)


def test_unfiltered_input_rejected():
    with pytest.raises(ValueError):
        update_factor(DetectorState(1, 2), 0.05, P)
    with pytest.raises(ValueError):
        update_factor(DetectorState(1, 2), float("inf"), P)


def test_shrinking_mismatch_lowers_factor():
    # a shrinking positive mismatch gives d*D < 0; the term is applied unclamped
    _, fs = run_stream([5.0, 0.5])
    assert fs[1] == 25.0 + 0.5 * (0.5 - 5.0)
    assert fs[1] < fs[0]


def test_saturation_flag():
    st = DetectorState(1, 2, F=1e300)
    st = update_factor(st, 1e200, P)
    assert st.saturated and math.isfinite(st.F)


def test_reset():
    st, _ = run_stream([3.0, 3.0])
    r = reset(st)
    assert (r.F, r.d_prev, r.k) == (0.0, 0.0, st.k)
    assert reset(r) == r


def test_nonfinite_state_rejected():
    with pytest.raises(ValueError):
        DetectorState(1, 2, F=float("nan"))


def test_series_matches_stateful_updates():
    ds = [0.0, 7.434, 0.0, 0.0, -4.956, -4.956, -4.956, 0.0, 1.2, -1.2]
    _, fs = run_stream(ds)
    F, D, N = factor_series(ds, P)
    assert list(F) == fs
    oracle_f, _ = scalar_recursion(ds, 3.0, 1.0, 0.1, 1.06)
    assert list(F) == pytest.approx(oracle_f, rel=1e-12, abs=0)
    assert list(N) == [3.0 if d == 0 else 1.0 for d in ds]


def test_persistent_under_production_grows_linearly():
    ds = [-4.956] * 15
    F, _, _ = factor_series(ds, P)
    assert F[0] == pytest.approx(4.956 ** 2, rel=1e-14)
    steps = [F[m + 1] - F[m] for m in range(14)]
    assert steps == pytest.approx([4.956] * 14, rel=1e-12)
