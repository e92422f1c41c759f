import json
import math

import numpy as np
import pytest

from ofi_lab.forecasting import (
    EmpiricalDistribution,
    ForecastConfig,
    WindowForecast,
    aligned_loss_arrays,
    anchors_ns,
    bin_index,
    forecasts_csv,
    histograms_json,
    kernel_norms_csv,
    loss_array,
    losses_csv,
    near_term_distributions,
    prob_of_realized,
    rolling_kernel_norms,
    window_history,
)
from ofi_lab.hawkes import HawkesModel, SumExponentialKernel
from ofi_lab.marketdata import counting_process_from_times
from ofi_lab.simulation import SimConfig, simulate_poisson, simulate_thinning
from conftest import exp_generator


def _cps(times):
    return counting_process_from_times("SELL", times[0]), counting_process_from_times("BUY", times[1])


def _wf(w, p, realized=0.0, failed=False, model="m"):
    return WindowForecast(w, model, 60.0 * w, realized, p, None, failed)


def test_bin_index_edges():
    assert bin_index(-1.0, 41) == 0
    assert bin_index(1.0, 41) == 40
    assert bin_index(0.0, 41) == 20
    assert bin_index(0.999, 41) == 40
    np.testing.assert_array_equal(bin_index([-1.0, 1.0], 1), [0, 0])


def test_histogram_tracks_no_trade_atom():
    ed = EmpiricalDistribution(np.array([0.0, 0.0, 1.0, np.nan]), 41)
    counts, atom = ed.histogram()
    assert atom == 1 and counts.sum() + atom == ed.K
    assert counts[20] == 2 and counts[40] == 1
    assert ed.to_dict()["no_trade"] == 1


def test_prob_of_realized_cases():
    ed = EmpiricalDistribution(np.zeros(500), 41)
    assert prob_of_realized(ed, 0.0, 1 / 1000) == 1.0
    assert prob_of_realized(ed, 0.9, 1 / 1000) == 1 / 1000
    # no trades in the realized horizon scores against the atom
    assert prob_of_realized(ed, math.nan, 1 / 1000) == 1 / 1000
    atom = EmpiricalDistribution(np.array([np.nan] * 3 + [0.0]), 41)
    assert prob_of_realized(atom, math.nan, 0.01) == 0.75


def test_single_sample_is_point_mass():
    ed = EmpiricalDistribution(np.array([0.3]), 41)
    assert prob_of_realized(ed, 0.31, 0.5) == 1.0
    assert prob_of_realized(ed, -0.3, 0.5) == 0.5


def test_constructed_uniform_ensemble():
    # 500 draws spread over 41 bins by construction: 8 bins hold 13, the rest 12
    rng = np.random.default_rng(0)
    Kb = np.full(41, 12)
    Kb[rng.choice(41, 8, replace=False)] += 1
    edges = np.linspace(-1, 1, 42)
    samples = np.concatenate([rng.uniform(edges[i], edges[i + 1], n) for i, n in enumerate(Kb)])
    ed = EmpiricalDistribution(samples, 41)
    ps = [prob_of_realized(ed, x, 1e-3) for x in rng.uniform(-1, 1, 200)]
    assert all(p in (12 / 500, 13 / 500) for p in ps)
    assert np.mean(ps) == pytest.approx(1 / 41, abs=0.002)


def test_block_loss_arithmetic():
    assert loss_array([_wf(i, 1.0) for i in range(10)]).values.tolist() == [0.0]
    la = loss_array([_wf(i, math.exp(-1)) for i in range(10)])
    assert la.values[0] == pytest.approx(10.0, rel=1e-14)
    assert len(loss_array([_wf(i, 0.5) for i in range(315)]).values) == 31


def test_failed_block_drops_for_every_model():
    a = [_wf(i, 0.5, model="a") for i in range(30)]
    b = [_wf(i, 0.5, model="b", failed=(i == 14)) for i in range(30)]
    b[14].p = math.nan
    out, rep = aligned_loss_arrays({"a": a, "b": b})
    assert out["a"].blocks.tolist() == out["b"].blocks.tolist() == [0, 2]
    assert rep.dropped_failed_blocks == [1] and rep.n_blocks_total == 3


def test_missing_realized_carries_no_loss():
    fc = [_wf(i, 0.5, realized=math.nan if i < 3 else 0.0) for i in range(15)]
    out, rep = aligned_loss_arrays({"m": fc})
    assert out["m"].values[0] == pytest.approx(-7 * math.log(0.5))
    assert rep.missing_realized_windows == 3 and rep.dropped_trailing_windows == 5


def test_misaligned_forecasts_rejected():
    with pytest.raises(ValueError):
        aligned_loss_arrays({"a": [_wf(0, 1.0)], "b": []})


def test_anchor_count_for_trading_day():
    cfg = ForecastConfig()
    a = anchors_ns(375 * 60.0, cfg)
    assert len(a) == 315 and a[0] == 3600 * 10**9
    assert a[-1] + 60 * 10**9 == 375 * 60 * 10**9
    with pytest.raises(ValueError):
        anchors_ns(3600.0, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ForecastConfig(bins=40)
    with pytest.raises(ValueError):
        ForecastConfig(window=60.0, horizon=60.0)
    with pytest.raises(ValueError):
        ForecastConfig(n_sims=0)
    assert ForecastConfig(n_sims=500).prob_floor == 1 / 1000


def test_window_history_excludes_future():
    s, b = _cps((np.array([10.0, 99.0, 100.0, 101.0]), np.array([50.0, 150.0])))
    h = window_history(s, b, 100 * 10**9, 60 * 10**9)
    np.testing.assert_allclose(h.times[0], [59.0, 60.0])
    np.testing.assert_allclose(h.times[1], [10.0])
    assert h.horizon == 60.0


def test_regime_change_at_anchor_is_not_seen():
    # buys only up to T, sells only after: a fit that peeked would forecast sells
    rng = np.random.default_rng(0)
    buys = np.sort(rng.uniform(0, 600, 600))
    sells = np.sort(rng.uniform(600, 660, 60))
    s, b = _cps((sells, buys))
    cfg = ForecastConfig(window=600.0, n_sims=100, seed=1)
    out = near_term_distributions(["poisson", "hawkes-exp"], s, b, 660.0, cfg)
    for m in ("poisson", "hawkes-exp"):
        (f,) = out[m]
        assert f.realized == 1.0
        assert np.all(f.ed.samples == -1.0)
        assert f.p == cfg.prob_floor


def _poisson_session(seed, rates=(0.5, 0.5), length=375 * 60.0):
    return simulate_poisson(list(rates), length, seed=seed)


def test_true_model_beats_rate_misspecified_model():
    # scores only: every window draws from the generating rates and from a copy with the sell rate tripled
    lam = np.array([0.5, 0.5])
    h = 60.0
    cfg = ForecastConfig()
    wins = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        realized = rng.poisson(lam * h, size=(315, 2))
        r_ofi = (realized[:, 0] - realized[:, 1]) / realized.sum(axis=1)
        p_true, p_bad = [], []
        for x in r_ofi:
            for rates, acc in ((lam, p_true), (lam * [3.0, 1.0], p_bad)):
                c = rng.poisson(rates * h, size=(cfg.n_sims, 2))
                ed = EmpiricalDistribution((c[:, 0] - c[:, 1]) / c.sum(axis=1), cfg.bins)
                acc.append(prob_of_realized(ed, x, cfg.prob_floor))
        assert np.mean(p_true) > np.mean(p_bad)
        block = lambda p: -np.log(np.asarray(p[:310])).reshape(31, 10).sum(axis=1).mean()
        wins.append(block(p_true) <= block(p_bad))
    assert np.mean(wins) >= 0.8


def test_pipeline_shape_and_bounds():
    sim = _poisson_session(3, length=4200.0)
    s, b = _cps(sim.times)
    cfg = ForecastConfig(window=3600.0, n_sims=50, seed=2)
    out = near_term_distributions(["poisson", "var"], s, b, 4200.0, cfg)
    for m, fc in out.items():
        assert len(fc) == 10
        assert all(cfg.prob_floor <= f.p <= 1.0 for f in fc)
        assert all(f.ed.K == 50 for f in fc)
    la, _ = aligned_loss_arrays(out)
    for v in la.values():
        assert len(v.values) == 1
        assert 0.0 <= v.values[0] <= -10 * math.log(cfg.prob_floor)


@pytest.fixture(scope="module")
def small_run_inputs():
    sim = simulate_thinning(exp_generator(), None, SimConfig(horizon=1500.0, seed=7))
    return _cps(sim.times)


def test_pipeline_independent_of_threads(small_run_inputs):
    s, b = small_run_inputs
    cfg = ForecastConfig(window=900.0, n_sims=40, seed=5)
    roster = ["poisson", "hawkes-exp", "hawkes-sumexp", "var"]
    one = near_term_distributions(roster, s, b, 1500.0, cfg, threads=1)
    two = near_term_distributions(roster, s, b, 1500.0, cfg, threads=3)
    assert forecasts_csv(one) == forecasts_csv(two)
    assert histograms_json(one, cfg) == histograms_json(two, cfg)
    again = near_term_distributions(roster[:1], s, b, 1500.0, cfg)
    # the Poisson stream does not depend on which other models ran
    assert forecasts_csv(again) == forecasts_csv({"poisson": one["poisson"]})


def test_fail_fraction_threshold(small_run_inputs):
    s, b = small_run_inputs
    empty = counting_process_from_times("BUY", [])
    cfg = ForecastConfig(window=900.0, n_sims=10, max_fail_fraction=0.5)
    # no trades at all on either side: every exp fit fails
    with pytest.raises(RuntimeError):
        near_term_distributions(["hawkes-exp"], counting_process_from_times("SELL", []), empty, 1500.0, cfg)


def test_unknown_model_rejected(small_run_inputs):
    s, b = small_run_inputs
    with pytest.raises(ValueError):
        near_term_distributions(["garch"], s, b, 1500.0, ForecastConfig(window=900.0))


def test_writers_layout():
    fc = {"a": [_wf(0, 0.5), _wf(1, 0.25, realized=math.nan)]}
    fc["a"][0].ed = EmpiricalDistribution(np.array([0.0, np.nan]), 41)
    text = forecasts_csv(fc).splitlines()
    assert text[0] == "window,model,realized_ofi,p"
    assert text[2] == "1,a,,0.25"
    la, _ = aligned_loss_arrays(fc, group_size=2)
    assert losses_csv(la).splitlines() == ["block,model,loss", f"0,a,{-math.log(0.5)!r}"]
    doc = json.loads(histograms_json(fc, ForecastConfig()))
    assert len(doc["bin_edges"]) == 42
    assert doc["windows"][0]["models"]["a"]["no_trade"] == 1
    assert doc["windows"][1]["realized_ofi"] is None and doc["windows"][1]["models"]["a"] is None


@pytest.fixture(scope="module")
def diag_norm_rows():
    dec = np.array([0.1, 1.0, 10.0])
    alpha = np.stack([d * np.diag([0.3, 0.3]) for d in dec])
    m = HawkesModel([0.5, 0.5], SumExponentialKernel(alpha, dec))
    L = 4 * 3600.0
    sim = simulate_thinning(m, None, SimConfig(horizon=L, seed=1))
    s, b = _cps(sim.times)
    return rolling_kernel_norms(s, b, L, sub_interval=300.0)


def test_zero_cross_kernels_recovered(diag_norm_rows):
    n = np.array([r.norms for r in diag_norm_rows])
    assert len(n) == 37
    assert np.mean((n[:, 0, 1] < 0.05) & (n[:, 1, 0] < 0.05)) >= 0.9


def test_symmetric_generator_gives_matching_self_norms(diag_norm_rows):
    n = np.array([r.norms for r in diag_norm_rows])
    ss, bb = n[:, 0, 0].mean(), n[:, 1, 1].mean()
    assert abs(ss - bb) <= 0.15 * max(ss, bb)


def test_kernel_norm_csv_and_empty_window():
    s, b = _cps((np.array([]), np.array([])))
    rows = rolling_kernel_norms(s, b, 20.0, window=10.0, sub_interval=5.0)
    assert len(rows) == 3 and all(np.all(np.isnan(r.norms)) for r in rows)
    lines = kernel_norms_csv(rows).splitlines()
    assert lines[0] == "window_start,ss,sb,bs,bb" and lines[1] == "0.0,,,,"


def test_kernel_norm_arguments_validated():
    s, b = _cps((np.array([1.0]), np.array([2.0])))
    with pytest.raises(ValueError):
        rolling_kernel_norms(s, b, 100.0, window=10.0, sub_interval=2.0)
    with pytest.raises(ValueError):
        rolling_kernel_norms(s, b, 100.0, window=10.0, sub_interval=20.0)
    with pytest.raises(ValueError):
        rolling_kernel_norms(s, b, 100.0, family="power_law")
