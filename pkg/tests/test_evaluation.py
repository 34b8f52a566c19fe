from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from factorsearch.errors import InsufficientDataError
from factorsearch.evaluation import (REASON_DAYS, REASON_MEAN_IC, REASON_TSTAT, EvalMetrics, GateConfig,
                                     apply_gate, coverage, daily_ic, evaluate_signal, ls_spread,
                                     signal_ls_sharpe, summarize_ic)
from oracles import naive_daily_ic, one_sample_t


def metrics(mean_ic=0.02, t=3.0, n_days=100):
    return EvalMetrics(mean_ic, t, 1.0, 1.0, n_days)


# -- daily IC ---------------------------------------------------------------------------

def test_ic_perfect_and_flipped(rng):
    y = rng.normal(size=(8, 5))
    np.testing.assert_allclose(daily_ic(y, y, 5), 1.0, atol=1e-15)
    np.testing.assert_allclose(daily_ic(-y, y, 5), -1.0, atol=1e-15)


def test_ic_matches_textbook_formula(rng):
    for _ in range(50):
        s = rng.normal(size=(8, 20))
        r = rng.normal(size=(8, 20))
        s[rng.random(s.shape) < 0.15] = np.nan
        got = daily_ic(s, r, 5)
        want = np.array(naive_daily_ic(s, r, 5))
        np.testing.assert_array_equal(np.isnan(got), np.isnan(want))
        np.testing.assert_allclose(got[~np.isnan(got)], want[~np.isnan(want)], atol=1e-12, rtol=0)


def test_ic_missing_rules():
    s = np.array([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0], [4.0, 1.0]])
    r = np.array([[1.0, 2.0], [3.0, 1.0], [2.0, 4.0], [np.nan, 3.0]])
    ic = daily_ic(s, r, 3)
    assert not np.isnan(ic[0])             # 3 complete pairs
    assert np.isnan(ic[1])                 # constant scores
    assert np.isnan(daily_ic(s, r, 4)[0])  # too few pairs


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_ic_affine_invariance_and_sign(seed, a, b):
    r = np.random.default_rng(seed)
    s, y = r.normal(size=(10, 15)), r.normal(size=(10, 15))
    base = daily_ic(s, y, 5)
    np.testing.assert_allclose(daily_ic(a * s + b, y, 5), base, atol=1e-9)
    np.testing.assert_allclose(daily_ic(-s, y, 5), -base, atol=1e-12)


# -- summarize_ic -------------------------------------------------------------------------------

def test_summarize_constant_series():
    mean, t, flag = summarize_ic(np.array([0.1, 0.1, 0.1]))
    assert mean == pytest.approx(0.1) and t == math.inf and flag


def test_summarize_symmetric():
    mean, t, flag = summarize_ic(np.array([0.2, -0.2]))
    assert mean == 0.0 and t == 0.0 and not flag


def test_summarize_matches_scipy_and_loop(rng):
    ic = rng.normal(0.02, 0.1, 250)
    mean, t, _ = summarize_ic(ic)
    m2, t2 = one_sample_t(list(ic))
    assert abs(mean - m2) < 1e-10 and abs(t - t2) < 1e-10
    assert abs(t - stats.ttest_1samp(ic, 0.0).statistic) < 1e-10


def test_summarize_ignores_missing_and_needs_two():
    mean, t, _ = summarize_ic(np.array([0.1, np.nan, 0.3]))
    assert mean == pytest.approx(0.2)
    with pytest.raises(InsufficientDataError):
        summarize_ic(np.array([0.1, np.nan]))


# -- signal L-S Sharpe ----------------------------------------------------------------------------

def test_ls_sharpe_hand_built(rng):
    T = 50
    r = rng.normal(0, 0.02, (10, T))
    s = r.copy()                                     # perfect ranking every day
    spread = []
    for t in range(T):
        col = np.sort(r[:, t])
        spread.append(col[-2:].mean() - col[:2].mean())
    spread = np.array(spread)
    want = spread.mean() / spread.std(ddof=1) * math.sqrt(365)
    got = signal_ls_sharpe(s, r, 0.2)
    assert got > 0 and got == pytest.approx(want, rel=1e-12)


def test_ls_skips_thin_dates():
    s = np.arange(12.0).reshape(4, 3)
    r = np.ones((4, 3))
    assert np.isnan(ls_spread(s, r, 0.2)).all()       # 4 < 2 / 0.2 = 10 names
    s2 = np.arange(30.0).reshape(10, 3)
    assert not np.isnan(ls_spread(s2, np.ones((10, 3)), 0.2)).any()


def test_ls_null_permutation():
    # independent scores: |Sharpe| sits inside the shuffled distribution most of the time
    inside = 0
    seeds = range(20)
    for seed in seeds:
        r = np.random.default_rng(seed)
        y = r.normal(0, 0.02, (20, 200))
        s = r.normal(size=(20, 200))
        real = abs(signal_ls_sharpe(s, y))
        null = [abs(signal_ls_sharpe(r.permuted(s, axis=0), y)) for _ in range(200)]
        inside += real < np.quantile(null, 0.95)
    assert inside / len(seeds) >= 0.9


# -- coverage -------------------------------------------------------------------------------------

def test_coverage_cases(rng):
    tradable = np.ones((3, 10), bool)
    assert coverage(np.zeros((3, 10)), tradable) == 1.0
    lagged = np.zeros((3, 10))
    lagged[:, :5] = np.nan
    assert coverage(lagged, tradable) == 0.5
    s = rng.normal(size=(6, 30))
    s[rng.random(s.shape) < 0.3] = np.nan
    mask = rng.random(s.shape) < 0.8
    direct = sum(1 for i in range(6) for t in range(30) if mask[i, t] and not math.isnan(s[i, t])) / mask.sum()
    assert coverage(s, mask) == pytest.approx(direct, abs=0)


# -- gate -------------------------------------------------------------------------------------------

def test_gate_boundary_passes():
    g = GateConfig(tau_ic=0.01, tau_t=2.0, min_days=60)
    assert apply_gate(metrics(0.01, 2.5, 60), g).passed
    assert apply_gate(metrics(0.05, 2.0, 60), g).passed


@pytest.mark.parametrize("m, reasons", [
    (metrics(0.02, 1.0, 100), (REASON_TSTAT,)),
    (metrics(0.005, 3.0, 100), (REASON_MEAN_IC,)),
    (metrics(0.02, 3.0, 59), (REASON_DAYS,)),
    (metrics(0.0, 0.0, 100), (REASON_MEAN_IC, REASON_TSTAT)),
    (EvalMetrics(math.nan, math.nan, math.nan, 0.0, 0), (REASON_MEAN_IC, REASON_TSTAT, REASON_DAYS)),
])
def test_gate_reasons(m, reasons):
    v = apply_gate(m, GateConfig())
    assert not v.passed and v.reasons == reasons


@settings(max_examples=200, deadline=None)
@given(ic=st.floats(-1, 1), t=st.floats(-10, 10), d=st.integers(0, 500),
       dic=st.floats(0, 1), dt=st.floats(0, 10))
def test_gate_monotone(ic, t, d, dic, dt):
    g = GateConfig()
    if apply_gate(metrics(ic, t, d), g).passed:
        assert apply_gate(metrics(ic + dic, t, d), g).passed
        assert apply_gate(metrics(ic, t + dt, d), g).passed


def test_gate_config_validation():
    with pytest.raises(ValueError):
        GateConfig(tau_ic=math.inf)
    with pytest.raises(ValueError):
        GateConfig(min_names_per_day=2)


# -- evaluate_signal -------------------------------------------------------------------------------

def test_all_missing_scores_fail_on_days():
    s = np.full((10, 100), np.nan)
    y = np.random.default_rng(0).normal(size=(10, 100))
    m = evaluate_signal(s, y, np.ones((10, 100), bool), np.arange(100))
    assert m.coverage == 0.0 and m.n_days == 0
    assert REASON_DAYS in apply_gate(m, GateConfig()).reasons


def test_evaluation_reads_only_window(rng):
    s = rng.normal(size=(10, 80))
    y = rng.normal(size=(10, 80))
    idx = np.arange(40)
    y2 = y.copy()
    y2[:, 40:] = rng.normal(size=(10, 40)) * 100     # tamper outside the window
    tr = np.ones((10, 80), bool)
    assert evaluate_signal(s, y, tr, idx) == evaluate_signal(s, y2, tr, idx)


def test_metrics_dict_round_trip():
    m = EvalMetrics(0.01, math.inf, math.nan, 0.5, 10, True)
    d = m.to_dict()
    assert d["ic_tstat"] == "Infinity" and d["ls_sharpe"] is None
    back = EvalMetrics.from_dict(d)
    assert back.ic_tstat == math.inf and math.isnan(back.ls_sharpe) and back.tstat_degenerate
