import json
import math

import numpy as np
import pytest
from scipy import stats
from statsmodels.stats.diagnostic import normal_ad
from statsmodels.tsa.stattools import acf as sm_acf
from statsmodels.tsa.stattools import adfuller
from statsmodels.tsa.stattools import pacf as sm_pacf

from ofi_lab.marketdata import counting_process_from_times
from ofi_lab.ofi import (
    OfiSeries,
    acf,
    adf_test,
    anderson_darling,
    compute_ofi,
    diagnostics,
    ks_normality,
    ofi_from_counts,
    ofi_series,
    pacf,
    summary_stats,
)
from oracles import brute_ofi


def test_compute_ofi_small_cases():
    assert compute_ofi(3, 1) == 0.5
    for k in (1, 5, 100):
        assert compute_ofi(k, k) == 0.0
    assert math.isnan(compute_ofi(0, 0))
    np.testing.assert_array_equal(ofi_from_counts([3, 0, 2], [1, 0, 2]), [0.5, np.nan, 0.0])


def test_full_session_has_375_anchors():
    rng = np.random.default_rng(0)
    L = 375 * 60.0
    sell = counting_process_from_times("SELL", rng.uniform(0, L, 5000))
    buy = counting_process_from_times("BUY", rng.uniform(0, L, 5000))
    s = ofi_series(sell, buy, 60.0, 60.0, L)
    assert len(s) == 375
    assert s.anchors[0] == 60.0 and s.anchors[-1] == L


def test_only_buys_gives_minus_one():
    L = 600.0
    buy = counting_process_from_times("BUY", np.linspace(0.5, L - 0.5, 400))
    sell = counting_process_from_times("SELL", [])
    s = ofi_series(sell, buy, 60.0, 60.0, L)
    assert np.all(s.values == -1.0)


def test_ofi_series_matches_recount():
    rng = np.random.default_rng(11)
    for _ in range(5):
        L = float(rng.integers(600, 3600))
        sell = counting_process_from_times("SELL", np.round(rng.uniform(0, L, 800), 3))
        buy = counting_process_from_times("BUY", np.round(rng.uniform(0, L, 800), 3))
        h, step = float(rng.choice([5.0, 30.0, 60.0])), float(rng.choice([10.0, 60.0]))
        s = ofi_series(sell, buy, h, step, L)
        ref = brute_ofi(sell.ns.tolist(), buy.ns.tolist(), int(h * 1e9), int(step * 1e9), int(L * 1e9))
        np.testing.assert_array_equal(s.values, ref)


def test_csv_round_trip():
    s = OfiSeries(60.0, np.array([60.0, 120.0, 180.0]), np.array([0.25, np.nan, -1 / 3]))
    back = OfiSeries.from_csv(s.to_csv())
    np.testing.assert_array_equal(back.anchors, s.anchors)
    np.testing.assert_array_equal(back.values, s.values)


def test_summary_stats():
    r = summary_stats(np.array([-1.0, 0.0, 1.0]))
    assert (r.mean, r.median, r.min, r.max) == (0.0, 0.0, -1.0, 1.0)
    assert summary_stats(np.full(10, 0.3)).std == 0.0
    x = np.random.default_rng(3).uniform(-1, 1, 315)
    r = summary_stats(x)
    xs = np.sort(x)
    assert r.count == 315
    # quantile for p = k / (n - 1) lands exactly on a sorted element
    assert r.median == xs[157]
    assert r.q25 == pytest.approx(np.interp(0.25 * 314, np.arange(315), xs))


def test_acf_pacf_against_statsmodels():
    x = np.random.default_rng(5).standard_normal(400)
    np.testing.assert_allclose(acf(x, 20), sm_acf(x, nlags=20, fft=False), atol=1e-12)
    np.testing.assert_allclose(pacf(x, 20), sm_pacf(x, nlags=20, method="ldb"), atol=1e-12)
    assert acf(x, 5)[0] == 1.0


def test_acf_white_noise_band():
    inside = []
    for seed in range(20):
        r = acf(np.random.default_rng(seed).standard_normal(1000), 20)[1:]
        inside.append(np.mean(np.abs(r) < 3 / math.sqrt(1000)))
    assert np.mean(inside) >= 0.99


def test_ar1_acf_and_pacf():
    rng = np.random.default_rng(2)
    e = rng.standard_normal(5000)
    x = np.empty_like(e)
    x[0] = e[0]
    for t in range(1, len(e)):
        x[t] = 0.8 * x[t - 1] + e[t]
    assert acf(x, 1)[1] == pytest.approx(0.8, abs=0.05)
    assert np.all(np.abs(pacf(x, 10)[2:]) < 0.05)


def test_adf_against_statsmodels():
    rng = np.random.default_rng(9)
    for x in (rng.standard_normal(315), np.cumsum(rng.standard_normal(500))):
        r = adf_test(x)
        ref = adfuller(x, maxlag=r.lag, autolag=None, regression="c")
        assert r.statistic == pytest.approx(ref[0], rel=1e-9)
        assert r.pvalue == pytest.approx(ref[1], rel=1e-9, abs=1e-15)
        assert r.nobs == ref[3]
        for k, v in ref[4].items():
            assert r.critical_values[k] == pytest.approx(v, rel=1e-12)


def test_adf_noise_rejects_and_walk_does_not():
    rng = np.random.default_rng(4)
    assert adf_test(rng.standard_normal(315)).statistic < -3.45
    above = [adf_test(np.cumsum(np.random.default_rng(s).standard_normal(1000))).statistic > -2.87 for s in range(40)]
    assert np.mean(above) >= 0.9


def test_adf_linear_trend_runs():
    r = adf_test(np.arange(100.0) + 0.01 * np.random.default_rng(0).standard_normal(100))
    assert math.isfinite(r.statistic)


def test_normality_tests_against_scipy_and_statsmodels():
    x = np.random.default_rng(8).standard_normal(300)
    k = ks_normality(x)
    ref = stats.kstest(x, "norm", args=(x.mean(), x.std(ddof=1)), method="asymp")
    assert k.statistic == pytest.approx(ref.statistic, rel=1e-12)
    assert k.pvalue == pytest.approx(ref.pvalue, rel=1e-9)
    a = anderson_darling(x)
    a2, p = normal_ad(x)
    n = len(x)
    assert a.statistic == pytest.approx(a2 * (1 + 0.75 / n + 2.25 / n**2), rel=1e-9)
    assert a.pvalue == pytest.approx(p, rel=1e-9)


def test_normality_power_and_size():
    ok_norm, rej_unif = [], []
    for seed in range(30):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(500)
        ok_norm.append(ks_normality(z).pvalue > 0.05 and anderson_darling(z).pvalue > 0.05)
        rej_unif.append(anderson_darling(rng.uniform(-1, 1, 500)).pvalue < 0.01)
    assert np.mean(ok_norm) >= 0.85
    assert np.mean(rej_unif) >= 0.9


def test_zero_variance_rejected():
    with pytest.raises(ValueError, match="zero variance"):
        ks_normality(np.full(50, 0.2))


def test_missing_values_rejected_by_acf():
    with pytest.raises(ValueError):
        acf(np.array([0.1, np.nan, 0.2, 0.3]), 1)


def test_diagnostics_schema():
    x = np.random.default_rng(1).uniform(-1, 1, 315)
    out = json.loads(json.dumps(diagnostics(x, ("adf", "ks", "ad", "acf"), 10)))
    assert set(out["adf"]) == {"ADFStatistic", "PValue", "NoOfSamples", "Lag", "CriticalValues"}
    assert set(out["adf"]["CriticalValues"]) == {"1%", "5%", "10%"}
    assert [m["Method"] for m in out["normality"]] == [
        "Kolmogorov-Smirnov normality test",
        "Anderson-Darling normality test",
    ]
    assert len(out["acf"]) == 11 and len(out["pacf"]) == 11
