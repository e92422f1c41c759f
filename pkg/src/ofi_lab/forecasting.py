"""Rolling fit-simulate-score pipeline for one-step OFI forecast distributions.

For every anchor ``T`` each model is fitted on trades in ``(T - W, T]``,
``K`` continuations of ``(T, T + h]`` are simulated, and the realized OFI of
that horizon is scored against the simulated histogram.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimation import (
    DEFAULT_DECAYS,
    FitConfig,
    FitDivergedError,
    GridConfig,
    LikelihoodError,
    fit_em_grid,
    fit_exp_fast,
    fit_mle_sgd,
    fit_sumexp,
)
from .hawkes.kernels import EventHistory, HawkesModel
from .marketdata import NS_PER_SECOND, CountingProcess
from .ofi import ofi_from_counts
from .simulation import DEFAULT_EPS, DEFAULT_MAX_EVENTS, simulate_counts
from .var import CountSeries, fit_var, simulate_var

logger = logging.getLogger(__name__)

MODEL_IDS = ("poisson", "hawkes-exp", "hawkes-sumexp", "hawkes-powerlaw", "hawkes-em", "var")
DEFAULT_ROSTER = ("poisson", "hawkes-exp", "hawkes-sumexp", "var")

FIT_ERRORS = (ValueError, FitDivergedError, LikelihoodError, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class ForecastConfig:
    window: float = 3600.0
    horizon: float = 60.0
    step: float = 60.0
    n_sims: int = 500
    bins: int = 41
    floor: float | None = None
    seed: int = 0
    group_size: int = 10
    conditioned: bool = True
    warm_start: bool = True
    decays: tuple = DEFAULT_DECAYS
    var_p_max: int = 10
    var_noise: str = "both"
    em_iters: int = 100
    grid: GridConfig = field(default_factory=GridConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    eps: float = DEFAULT_EPS
    max_events: int = DEFAULT_MAX_EVENTS
    max_fail_fraction: float = 1.0

    def __post_init__(self):
        if not (self.window > self.horizon > 0) or not self.step > 0:
            raise ValueError("need window > horizon > 0 and step > 0")
        if self.n_sims < 1:
            raise ValueError("need at least one simulation per window")
        if self.bins < 1 or self.bins % 2 == 0:
            raise ValueError("histogram bin count must be odd so that 0 is a bin centre")
        if self.group_size < 1:
            raise ValueError("group_size must be positive")

    @property
    def prob_floor(self) -> float:
        return self.floor if self.floor is not None else 1.0 / (2.0 * self.n_sims)


def bin_index(x, bins: int):
    """Bin of ``x`` among ``bins`` equal-width bins on [-1, 1]; ``x = 1`` falls in the last bin."""
    b = np.floor((np.asarray(x, dtype=float) + 1.0) * bins / 2.0).astype(np.int64)
    return np.clip(b, 0, bins - 1)


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """``K`` simulated OFI values; NaN marks a simulation with no trades."""

    samples: np.ndarray
    bins: int = 41

    @property
    def K(self) -> int:
        return len(self.samples)

    def histogram(self) -> tuple[np.ndarray, int]:
        """Counts per bin and the no-trade count; together they sum to ``K``."""
        s = self.samples
        defined = s[~np.isnan(s)]
        counts = np.bincount(bin_index(defined, self.bins), minlength=self.bins)
        return counts, int(self.K - len(defined))

    def to_dict(self) -> dict:
        counts, atom = self.histogram()
        return {"counts": counts.tolist(), "no_trade": atom}


def prob_of_realized(ed: EmpiricalDistribution, realized: float, floor: float) -> float:
    """Simulated mass of the realized value's bin (or of the no-trade atom), floored."""
    counts, atom = ed.histogram()
    hits = atom if (realized is None or math.isnan(realized)) else counts[int(bin_index(realized, ed.bins))]
    return float(min(1.0, max(hits / ed.K, floor)))


@dataclass
class WindowForecast:
    window: int
    model: str
    anchor: float
    realized: float
    p: float
    ed: EmpiricalDistribution | None
    failed: bool = False

    @property
    def missing(self) -> bool:
        return math.isnan(self.realized)


@dataclass
class LossArray:
    model: str
    blocks: np.ndarray
    values: np.ndarray


@dataclass
class LossReport:
    n_windows: int
    n_blocks_total: int
    dropped_trailing_windows: int
    dropped_failed_blocks: list
    missing_realized_windows: int

    def to_dict(self) -> dict:
        return {
            "n_windows": self.n_windows,
            "n_blocks_total": self.n_blocks_total,
            "dropped_trailing_windows": self.dropped_trailing_windows,
            "dropped_failed_blocks": list(self.dropped_failed_blocks),
            "missing_realized_windows": self.missing_realized_windows,
        }


# ----------------------------------------------------------------------------
# window bookkeeping


def anchors_ns(session_length: float, config: ForecastConfig) -> np.ndarray:
    """Anchors ``T = W, W + step, ...`` with ``T + h`` inside the session (integer ns)."""
    W = int(round(config.window * NS_PER_SECOND))
    h = int(round(config.horizon * NS_PER_SECOND))
    d = int(round(config.step * NS_PER_SECOND))
    end = int(round(session_length * NS_PER_SECOND))
    if end < W + h:
        raise ValueError("session is shorter than fit window plus horizon")
    return np.arange(W, end - h + 1, d, dtype=np.int64)


def _slice(cp: CountingProcess, lo_ns: int, hi_ns: int) -> np.ndarray:
    a, b = np.searchsorted(cp.ns, [lo_ns, hi_ns], side="right")
    return cp.times[a:b]


def window_history(sell: CountingProcess, buy: CountingProcess, T_ns: int, W_ns: int) -> EventHistory:
    """Trades in ``(T - W, T]`` re-based to ``[0, W]``; dimension 0 = SELL, 1 = BUY."""
    lo = (T_ns - W_ns) / NS_PER_SECOND
    t = [np.clip(_slice(cp, T_ns - W_ns, T_ns) - lo, 0.0, W_ns / NS_PER_SECOND) for cp in (sell, buy)]
    return EventHistory(tuple(t), W_ns / NS_PER_SECOND)


def realized_counts(sell: CountingProcess, buy: CountingProcess, T_ns: int, h_ns: int) -> tuple[int, int]:
    return tuple(int(np.diff(np.searchsorted(cp.ns, [T_ns, T_ns + h_ns], side="right"))[0]) for cp in (sell, buy))


# ----------------------------------------------------------------------------
# model adapters


class _Adapter:
    """Fit on one window and draw ``(K, 2)`` SELL/BUY counts for the next horizon."""

    def __init__(self, name: str, config: ForecastConfig):
        self.name = name
        self.cfg = config

    def fit(self, hist: EventHistory, sell, buy, T_ns, prev):
        raise NotImplementedError

    def simulate(self, fitted, hist: EventHistory, rng) -> np.ndarray:
        raise NotImplementedError


class _Poisson(_Adapter):
    def fit(self, hist, sell, buy, T_ns, prev):
        return hist.counts() / hist.length

    def simulate(self, fitted, hist, rng):
        return rng.poisson(fitted * self.cfg.horizon, size=(self.cfg.n_sims, 2))


class _Hawkes(_Adapter):
    def fit(self, hist, sell, buy, T_ns, prev):
        cfg = self.cfg
        init = prev if (cfg.warm_start and isinstance(prev, HawkesModel)) else None
        if init is not None:
            # keep the warm start strictly inside the feasible region
            init = init.with_vector(np.maximum(init.to_vector(), 1e-6))
        if self.name == "hawkes-exp":
            return fit_exp_fast(hist, cfg.fit, init=init).model
        if self.name == "hawkes-sumexp":
            return fit_sumexp(hist, cfg.decays, cfg.fit, init=init, method="lbfgsb").model
        if self.name == "hawkes-powerlaw":
            return fit_mle_sgd(init if init is not None else "power_law", hist, cfg.fit).model
        if self.name == "hawkes-em":
            return fit_em_grid(hist, cfg.grid, cfg.em_iters, init=init).model
        raise ValueError(self.name)

    def simulate(self, fitted, hist, rng):
        prefix = hist if self.cfg.conditioned else None
        return simulate_counts(
            fitted, prefix, self.cfg.horizon, self.cfg.n_sims, rng, self.cfg.eps, self.cfg.max_events
        )


class _Var(_Adapter):
    def fit(self, hist, sell, buy, T_ns, prev):
        cfg = self.cfg
        # per-horizon counts over the fit window, columns BUY, SELL
        series = CountSeries.from_times(hist.times[1], hist.times[0], 0.0, hist.length, cfg.horizon)
        p_max = max(1, min(cfg.var_p_max, (len(series.counts) - 11) // 2))
        model = fit_var(series, p_max)
        return model, series.counts[-model.p :]

    def simulate(self, fitted, hist, rng):
        model, last = fitted
        draws = simulate_var(model, last, 1, rng, self.cfg.n_sims, self.cfg.var_noise)[:, 0, :]
        return draws[:, ::-1]


def make_adapter(name: str, config: ForecastConfig) -> _Adapter:
    if name == "poisson":
        return _Poisson(name, config)
    if name == "var":
        return _Var(name, config)
    if name in MODEL_IDS:
        return _Hawkes(name, config)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_IDS}")


def _stream(config: ForecastConfig, model: str, window: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(MODEL_IDS.index(model), window)))


# ----------------------------------------------------------------------------
# pipeline


def near_term_distributions(
    models: Sequence[str],
    sell: CountingProcess,
    buy: CountingProcess,
    session_length: float,
    config: ForecastConfig | None = None,
    threads: int = 1,
) -> dict[str, list[WindowForecast]]:
    """Rolling forecasts for every model in ``models``.

    Fits run as one chain per model (each window may warm-start from the
    previous one); simulations use one random stream per (model, window), so
    results do not depend on ``threads``.
    """
    config = config or ForecastConfig()
    if not models:
        raise ValueError("empty model roster")
    anchors = anchors_ns(session_length, config)
    W_ns = int(round(config.window * NS_PER_SECOND))
    h_ns = int(round(config.horizon * NS_PER_SECOND))
    hists = [window_history(sell, buy, int(T), W_ns) for T in anchors]
    realized = np.array([ofi_from_counts(*realized_counts(sell, buy, int(T), h_ns)) for T in anchors], dtype=float)
    adapters = {m: make_adapter(m, config) for m in models}

    def fit_chain(m):
        out, prev = [], None
        ad = adapters[m]
        for w, T in enumerate(anchors):
            try:
                fitted = ad.fit(hists[w], sell, buy, int(T), prev)
            except FIT_ERRORS as exc:
                logger.info("%s fit failed in window %d: %s", m, w, exc)
                fitted = None
            out.append(fitted)
            if fitted is not None:
                prev = fitted
        return out

    def simulate(task):
        m, w, fitted = task
        if fitted is None:
            return None
        counts = adapters[m].simulate(fitted, hists[w], _stream(config, m, w))
        return ofi_from_counts(counts[:, 0], counts[:, 1])

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        fits = dict(zip(models, pool.map(fit_chain, models)))
        tasks = [(m, w, fits[m][w]) for m in models for w in range(len(anchors))]
        samples = list(pool.map(simulate, tasks))

    floor = config.prob_floor
    result: dict[str, list[WindowForecast]] = {m: [] for m in models}
    for (m, w, _), s in zip(tasks, samples):
        anchor = anchors[w] / NS_PER_SECOND
        if s is None:
            result[m].append(WindowForecast(w, m, anchor, float(realized[w]), math.nan, None, failed=True))
            continue
        ed = EmpiricalDistribution(s, config.bins)
        p = prob_of_realized(ed, float(realized[w]), floor)
        result[m].append(WindowForecast(w, m, anchor, float(realized[w]), p, ed))
    for m in models:
        frac = np.mean([f.failed for f in result[m]])
        if frac > config.max_fail_fraction:
            raise RuntimeError(f"model {m} failed in {frac:.0%} of windows")
    return result


def _block_losses(fc: list[WindowForecast], group_size: int):
    n_blocks = len(fc) // group_size
    losses, failed = np.zeros(n_blocks), np.zeros(n_blocks, bool)
    for b in range(n_blocks):
        block = fc[b * group_size : (b + 1) * group_size]
        failed[b] = any(f.failed for f in block)
        losses[b] = -sum(math.log(f.p) for f in block if not f.failed and not f.missing)
    return losses, failed


def loss_array(forecasts: list[WindowForecast], group_size: int = 10) -> LossArray:
    """Block losses ``-sum(ln p)`` for one model; blocks with a failed fit and the trailing remainder are dropped."""
    losses, failed = _block_losses(forecasts, group_size)
    keep = np.flatnonzero(~failed)
    model = forecasts[0].model if forecasts else ""
    return LossArray(model, keep, losses[keep] + 0.0)


def aligned_loss_arrays(
    forecasts: dict[str, list[WindowForecast]], group_size: int = 10
) -> tuple[dict[str, LossArray], LossReport]:
    """Block losses for all models on a common set of blocks.

    A block in which any model failed to fit is removed for every model.
    Windows whose realized horizon had no trades carry no loss.
    """
    models = list(forecasts)
    n = {len(v) for v in forecasts.values()}
    if len(n) != 1:
        raise ValueError("forecasts are not window-aligned across models")
    n_windows = n.pop()
    per = {m: _block_losses(forecasts[m], group_size) for m in models}
    n_blocks = n_windows // group_size
    bad = np.zeros(n_blocks, bool)
    for _, failed in per.values():
        bad |= failed
    keep = np.flatnonzero(~bad)
    first = forecasts[models[0]] if models else []
    report = LossReport(
        n_windows=n_windows,
        n_blocks_total=n_blocks,
        dropped_trailing_windows=n_windows - n_blocks * group_size,
        dropped_failed_blocks=np.flatnonzero(bad).tolist(),
        missing_realized_windows=int(sum(f.missing for f in first)),
    )
    return {m: LossArray(m, keep, per[m][0][keep] + 0.0) for m in models}, report


# ----------------------------------------------------------------------------
# serialization


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def forecasts_csv(forecasts: dict[str, list[WindowForecast]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window", "model", "realized_ofi", "p"])
    for m, fcs in forecasts.items():
        for f in fcs:
            w.writerow([f.window, m, _num(f.realized), _num(f.p)])
    return buf.getvalue()


def losses_csv(losses: dict[str, LossArray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "model", "loss"])
    for m, la in losses.items():
        for b, v in zip(la.blocks, la.values):
            w.writerow([int(b), m, repr(float(v))])
    return buf.getvalue()


def histograms_json(forecasts: dict[str, list[WindowForecast]], config: ForecastConfig) -> str:
    edges = np.linspace(-1.0, 1.0, config.bins + 1).tolist()
    out = {"bin_edges": edges, "windows": []}
    n = len(next(iter(forecasts.values()))) if forecasts else 0
    for w in range(n):
        row = {"window": w, "anchor": None, "realized_ofi": None, "models": {}}
        for m, fcs in forecasts.items():
            f = fcs[w]
            row["anchor"] = f.anchor
            row["realized_ofi"] = None if f.missing else f.realized
            row["models"][m] = None if f.ed is None else f.ed.to_dict()
        out["windows"].append(row)
    return json.dumps(out, separators=(",", ":"))


# ----------------------------------------------------------------------------
# kernel-norm timelines


@dataclass
class KernelNormRow:
    window_start: float
    norms: np.ndarray  # 2x2, NaN when the fit failed

    def as_tuple(self):
        n = self.norms
        return (self.window_start, n[0, 0], n[0, 1], n[1, 0], n[1, 1])


def rolling_kernel_norms(
    sell: CountingProcess,
    buy: CountingProcess,
    session_length: float,
    family: str = "sum_exponential",
    window: float = 3600.0,
    sub_interval: float = 300.0,
    decays=DEFAULT_DECAYS,
    fit_config: FitConfig | None = None,
    warm_start: bool = True,
) -> list[KernelNormRow]:
    """L1 norms of the fitted kernel on trailing windows advanced every ``sub_interval``.

    Entry ``(i, j)`` uses the SELL = 0, BUY = 1 convention, so the CSV columns
    ``ss, sb, bs, bb`` are ``[0,0], [0,1], [1,0], [1,1]``.
    """
    if not window >= sub_interval:
        raise ValueError("window must be at least sub_interval")
    if not 5.0 <= sub_interval <= 300.0:
        raise ValueError("sub_interval must lie between 5 s and 5 min")
    if family not in ("sum_exponential", "exponential"):
        raise ValueError(f"unsupported family {family!r}")
    W_ns = int(round(window * NS_PER_SECOND))
    d_ns = int(round(sub_interval * NS_PER_SECOND))
    end = int(round(session_length * NS_PER_SECOND))
    rows = []
    prev = None
    for T in range(W_ns, end + 1, d_ns):
        hist = window_history(sell, buy, T, W_ns)
        try:
            init = prev if warm_start else None
            if family == "sum_exponential":
                model = fit_sumexp(hist, decays, fit_config, init=init, method="lbfgsb").model
            else:
                model = fit_exp_fast(hist, fit_config, init=init).model
            norms = model.kernel.l1_matrix()
            prev = model.with_vector(np.maximum(model.to_vector(), 1e-6))
        except FIT_ERRORS as exc:
            logger.info("kernel-norm fit failed at %s: %s", T, exc)
            norms = np.full((2, 2), np.nan)
        rows.append(KernelNormRow((T - W_ns) / NS_PER_SECOND, norms))
    return rows


def kernel_norms_csv(rows: list[KernelNormRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["window_start", "ss", "sb", "bs", "bb"])
    for r in rows:
        w.writerow([_num(x) for x in r.as_tuple()])
    return buf.getvalue()
