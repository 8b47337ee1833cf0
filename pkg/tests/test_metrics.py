import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coreaging.metrics import (
    CarbonParams,
    FailedCPUError,
    MetricError,
    MetricSample,
    NoAgingError,
    SampleSeries,
    estimate_yearly_embodied,
    frequency_cv,
    mean_degradation,
    normalized_idle,
    normalized_idle_series,
    oversubscription_integral,
    percentiles,
)


def series(rows, n_total=40):
    s = SampleSeries([n_total])
    for t, idle, running in rows:
        s.append(t, 0, idle, running)
    return s


# -- frequency CV ------------------------------------------------------------


def test_cv_equal_is_zero():
    assert frequency_cv([1.2] * 5) == 0.0


def test_cv_population_statistics():
    assert frequency_cv([1.0, 1.0, 0.8, 1.2]) == pytest.approx(0.1414213562, rel=1e-9)


@given(
    fs=st.lists(st.floats(0.1, 10.0), min_size=2, max_size=50),
    c=st.floats(0.01, 100.0),
)
def test_cv_scale_invariant(fs, c):
    assert frequency_cv([c * f for f in fs]) == pytest.approx(frequency_cv(fs), rel=1e-9, abs=1e-12)


def test_cv_errors():
    with pytest.raises(MetricError):
        frequency_cv([1.0])
    with pytest.raises(FailedCPUError):
        frequency_cv([0.0, 0.0])


# -- degradation -------------------------------------------------------------


def test_degradation_examples():
    assert mean_degradation([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert mean_degradation([1.0, 1.0], [0.9, 0.7]) == pytest.approx(0.2)
    assert mean_degradation([1.0], [0.7]) == pytest.approx(0.3)
    with pytest.raises(MetricError):
        mean_degradation([1.0], [1.0, 2.0])


# -- oversubscription --------------------------------------------------------


def test_oversub_zero_without_excess():
    s = series([(0.0, 0, 10), (1.0, 5, 30), (2.0, 0, 0)])
    assert oversubscription_integral(s, 0, end=3.0) == 0.0


def test_oversub_twelve_on_ten_for_five_seconds():
    s = series([(0.0, 30, 12), (5.0, 30, 0)])
    assert oversubscription_integral(s, 0) == pytest.approx(10.0)


def test_oversub_accepts_sample_objects_and_end():
    samples = [MetricSample(0.0, 0, 4, 0, 5), MetricSample(2.0, 0, 4, 0, 3)]
    assert oversubscription_integral(samples, 0, end=4.0) == pytest.approx(2.0)
    with pytest.raises(MetricError):
        oversubscription_integral(samples, 0, end=1.0)


def test_oversub_rejects_unordered():
    s = series([(1.0, 0, 50), (0.5, 0, 50)])
    with pytest.raises(MetricError):
        oversubscription_integral(s, 0)


steps = st.lists(
    st.tuples(st.integers(0, 50).map(lambda k: k / 8), st.integers(0, 4), st.integers(0, 12)),
    min_size=1,
    max_size=30,
)


@given(steps=steps, cut=st.integers(0, 30))
def test_oversub_additive_over_partitions(steps, cut):
    t = 0.0
    rows = []
    for dt, idle, running in steps:
        rows.append((t, idle, running))
        t += dt
    end = t
    cut = min(cut, len(rows) - 1)
    whole = oversubscription_integral(series(rows, 8), 0, end=end)
    t_cut = rows[cut][0]
    left = oversubscription_integral(series(rows[:cut], 8), 0, end=t_cut) if cut else 0.0
    right = oversubscription_integral(series(rows[cut:], 8), 0, end=end)
    assert whole == pytest.approx(left + right, rel=1e-9, abs=1e-9)
    excess = any(r > 8 - i for (_, i, r), (dt, _, _) in zip(rows, steps) if dt > 0)
    assert (whole > 0) == excess


def test_sample_invariants():
    with pytest.raises(MetricError):
        MetricSample(0.0, 0, 4, 5, 0)
    with pytest.raises(MetricError):
        MetricSample(0.0, 0, 4, 0, -1)


def test_series_csv_roundtrip():
    s = SampleSeries([40, 80])
    s.append(0.0, 0, 3, 4, 0)
    s.append(0.5, 1, 0, 90, 10)
    buf = io.StringIO()
    s.write_csv(buf)
    back = SampleSeries.read_csv(io.StringIO(buf.getvalue()))
    for k, v in s.arrays().items():
        assert np.array_equal(back.arrays()[k], v)


# -- normalized idle ---------------------------------------------------------


def test_normalized_idle_examples():
    assert normalized_idle(40, 0, 0) == 1.0
    assert normalized_idle(40, 10, 30) == 0.0
    assert normalized_idle(40, 0, 44) == pytest.approx(-0.1)
    assert normalized_idle(4, 0, 100) == -1.0


def test_normalized_idle_series_pools_machines():
    s = SampleSeries([4, 4])
    s.append(0.0, 0, 0, 0)
    s.append(0.0, 1, 0, 6)
    values, stats = normalized_idle_series(s)
    assert sorted(values) == [-0.5, 1.0]
    assert stats["min"] == -0.5
    assert set(stats) == {"p1", "p50", "p90", "min"}


@given(
    n=st.integers(1, 80),
    idle=st.integers(0, 80),
    running=st.integers(0, 500),
)
def test_normalized_idle_clamped(n, idle, running):
    v = normalized_idle(n, min(idle, n), running)
    assert -1.0 <= v <= 1.0


# -- carbon ------------------------------------------------------------------


def test_carbon_self_comparison():
    yearly, red = estimate_yearly_embodied(0.05, 0.05)
    assert yearly == pytest.approx(22 * 278.3 / 3)
    assert red == 0.0
    assert CarbonParams().baseline_yearly == 22 * 278.3 / 3


@pytest.mark.parametrize("ratio, reduction", [(0.6233, 0.3767), (0.5099, 0.4901)])
def test_carbon_published_reductions(ratio, reduction):
    _, red = estimate_yearly_embodied(ratio * 0.02, 0.02)
    assert red == pytest.approx(reduction, abs=5e-4)


def test_carbon_lifetime_extension_is_linear():
    yearly, _ = estimate_yearly_embodied(0.01, 0.02)
    assert yearly == pytest.approx(22 * 278.3 / 6)


@given(
    dt=st.floats(1e-6, 1.0),
    dl=st.floats(1e-6, 1.0),
    life=st.floats(0.5, 10.0),
    emb=st.floats(1.0, 1000.0),
    machines=st.integers(1, 100),
)
def test_carbon_reduction_independent_of_params(dt, dl, life, emb, machines):
    p = CarbonParams(life, emb, machines)
    yearly, red = estimate_yearly_embodied(dt, dl, p)
    assert red == pytest.approx(1 - dt / dl, rel=1e-12, abs=1e-12)
    assert red == pytest.approx(estimate_yearly_embodied(dt, dl)[1], rel=1e-12, abs=1e-12)
    assert yearly == pytest.approx(p.baseline_yearly * (1 - red), rel=1e-9)


def test_carbon_no_aging():
    with pytest.raises(NoAgingError):
        estimate_yearly_embodied(0.0, 0.1)
    with pytest.raises(MetricError):
        CarbonParams(base_lifetime=0.0)


def test_percentiles_keys():
    assert set(percentiles(range(100))) == {"p1", "p50", "p90", "p99"}
    assert percentiles([]) == {}
