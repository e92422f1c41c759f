"""Realized order flow imbalance and its time-series diagnostics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .marketdata import NS_PER_SECOND, CountingProcess

# MacKinnon (2010) response surface, constant-only regression, one I(1) series.
_ADF_CRIT_C = {
    "1%": (-3.43035, -6.5393, -16.786, -79.433),
    "5%": (-2.86154, -2.8903, -4.234, -40.040),
    "10%": (-2.56677, -1.5384, -2.809, 0.0),
}
# MacKinnon (1994) approximate p-value polynomials, constant-only.
_ADF_P_MAX, _ADF_P_MIN, _ADF_P_STAR = 2.74, -18.83, -1.61
_ADF_P_SMALL = (2.1659, 1.4412, 0.038269)
_ADF_P_LARGE = (1.7339, 0.93202, -0.12745, -0.010368)


def compute_ofi(n_sell: int, n_buy: int) -> float:
    """Sell-minus-buy imbalance of trade counts; NaN when the window is empty."""
    total = n_sell + n_buy
    if total == 0:
        return math.nan
    return (n_sell - n_buy) / total


def ofi_from_counts(n_sell: np.ndarray, n_buy: np.ndarray) -> np.ndarray:
    n_sell = np.asarray(n_sell, dtype=float)
    n_buy = np.asarray(n_buy, dtype=float)
    total = n_sell + n_buy
    out = np.full(total.shape, np.nan)
    nz = total > 0
    out[nz] = (n_sell[nz] - n_buy[nz]) / total[nz]
    return out


@dataclass(frozen=True)
class OfiSeries:
    window_h: float
    anchors: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    def defined(self) -> np.ndarray:
        return self.values[~np.isnan(self.values)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["anchor_time", "ofi"])
        for a, v in zip(self.anchors, self.values):
            w.writerow([repr(float(a)), "" if np.isnan(v) else repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, window_h: float = math.nan) -> "OfiSeries":
        rows = list(csv.reader(io.StringIO(text)))
        if rows and rows[0] and rows[0][0] == "anchor_time":
            rows = rows[1:]
        anchors = np.array([float(r[0]) for r in rows if r], dtype=float)
        values = np.array([float(r[1]) if len(r) > 1 and r[1] != "" else np.nan for r in rows if r])
        return cls(window_h=window_h, anchors=anchors, values=values)


def _to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_SECOND))


def ofi_series(
    sell: CountingProcess,
    buy: CountingProcess,
    h: float,
    interval: float,
    session_length: float,
) -> OfiSeries:
    """OFI over ``(T - h, T]`` for anchors ``T = interval, 2*interval, ...`` up to the session end.

    Window membership is decided on integer nanoseconds so results are exact.
    """
    if h <= 0 or interval <= 0:
        raise ValueError("h and interval must be positive")
    if session_length <= 0:
        raise ValueError("empty session")
    h_ns, step_ns, end_ns = _to_ns(h), _to_ns(interval), _to_ns(session_length)
    n = end_ns // step_ns
    if n == 0:
        raise ValueError("empty session: no anchor fits inside the session")
    anchors_ns = step_ns * np.arange(1, n + 1, dtype=np.int64)
    start_ns = anchors_ns - h_ns

    def counts(cp: CountingProcess) -> np.ndarray:
        return np.searchsorted(cp.ns, anchors_ns, side="right") - np.searchsorted(
            cp.ns, start_ns, side="right"
        )

    values = ofi_from_counts(counts(sell), counts(buy))
    return OfiSeries(window_h=h, anchors=anchors_ns / NS_PER_SECOND, values=values)


@dataclass(frozen=True)
class SummaryStats:
    count: int
    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float

    def to_dict(self) -> dict:
        return asdict(self)


def summary_stats(series: OfiSeries | np.ndarray) -> SummaryStats:
    x = series.defined() if isinstance(series, OfiSeries) else np.asarray(series, dtype=float)
    x = x[~np.isnan(x)]
    if len(x) < 2:
        raise ValueError("need at least 2 non-missing values")
    q25, med, q75 = np.quantile(x, [0.25, 0.5, 0.75])
    return SummaryStats(
        count=int(len(x)),
        mean=float(x.mean()),
        std=0.0 if x.min() == x.max() else float(x.std(ddof=1)),
        min=float(x.min()),
        q25=float(q25),
        median=float(med),
        q75=float(q75),
        max=float(x.max()),
    )


def _clean(series) -> np.ndarray:
    x = series.values if isinstance(series, OfiSeries) else series
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any():
        raise ValueError("series contains missing values; drop or fill them first")
    return x


def acf(series, max_lag: int) -> np.ndarray:
    """Sample autocorrelation for lags ``0..max_lag`` (lag-0 autocovariance denominator)."""
    x = _clean(series)
    n = len(x)
    if max_lag >= n:
        raise ValueError("max_lag must be smaller than the series length")
    d = x - x.mean()
    c0 = d @ d
    if c0 == 0:
        raise ValueError("constant series has no autocorrelation")
    return np.array([d[: n - k] @ d[k:] / c0 for k in range(max_lag + 1)])


def pacf(series, max_lag: int) -> np.ndarray:
    """Partial autocorrelation via the Durbin-Levinson recursion on :func:`acf`."""
    r = acf(series, max_lag)
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    phi = np.zeros(max_lag + 1)
    v = 1.0
    for k in range(1, max_lag + 1):
        num = r[k] - phi[1:k] @ r[k - 1 : 0 : -1]
        a = num / v
        new = phi.copy()
        new[k] = a
        new[1:k] = phi[1:k] - a * phi[k - 1 : 0 : -1]
        phi = new
        v *= 1.0 - a * a
        out[k] = a
    return out


def adf_critical_values(nobs: int) -> dict[str, float]:
    return {
        level: b0 + b1 / nobs + b2 / nobs**2 + b3 / nobs**3
        for level, (b0, b1, b2, b3) in _ADF_CRIT_C.items()
    }


def adf_pvalue(stat: float) -> float:
    if stat > _ADF_P_MAX:
        return 1.0
    if stat < _ADF_P_MIN:
        return 0.0
    coef = _ADF_P_SMALL if stat <= _ADF_P_STAR else _ADF_P_LARGE
    return float(stats.norm.cdf(np.polyval(coef[::-1], stat)))


def schwert_lag(n: int) -> int:
    return int(math.floor(12.0 * (n / 100.0) ** 0.25))


@dataclass(frozen=True)
class AdfResult:
    statistic: float
    pvalue: float
    lag: int
    nobs: int
    critical_values: dict[str, float]


def adf_test(series, max_lag: int | None = None) -> AdfResult:
    """Augmented Dickey-Fuller test with a constant and a fixed lag order.

    Regresses ``dy_t`` on ``[1, y_{t-1}, dy_{t-1}, ..., dy_{t-p}]``; the statistic
    is the t-ratio on ``y_{t-1}``.  ``p`` defaults to the Schwert rule.
    """
    y = _clean(series)
    n = len(y)
    if n < 20:
        raise ValueError("ADF needs at least 20 observations")
    p = schwert_lag(n) if max_lag is None else int(max_lag)
    p = min(p, n // 2 - 2)
    dy = np.diff(y)
    rows = len(dy) - p
    X = np.empty((rows, 2 + p))
    X[:, 0] = 1.0
    X[:, 1] = y[p:-1]
    for i in range(1, p + 1):
        X[:, 1 + i] = dy[p - i : len(dy) - i]
    target = dy[p:]
    xtx = X.T @ X
    if np.linalg.matrix_rank(xtx) < X.shape[1]:
        raise np.linalg.LinAlgError("singular ADF regression matrix")
    beta = np.linalg.solve(xtx, X.T @ target)
    resid = target - X @ beta
    s2 = resid @ resid / (rows - X.shape[1])
    se = math.sqrt(s2 * np.linalg.inv(xtx)[1, 1])
    if se == 0:
        stat = -math.inf if beta[1] < 0 else math.inf
    else:
        stat = float(beta[1] / se)
    return AdfResult(
        statistic=stat,
        pvalue=adf_pvalue(stat),
        lag=p,
        nobs=rows,
        critical_values=adf_critical_values(rows),
    )


@dataclass(frozen=True)
class NormalityResult:
    statistic: float
    pvalue: float


def _standardize(series) -> np.ndarray:
    x = _clean(series)
    if len(x) < 8:
        raise ValueError("normality tests need at least 8 observations")
    sd = x.std(ddof=1)
    if x.min() == x.max() or sd == 0:
        raise ValueError("zero variance")
    return np.sort((x - x.mean()) / sd)


def ks_normality(series) -> NormalityResult:
    """Kolmogorov-Smirnov distance to a normal fitted by sample mean/std; asymptotic p."""
    z = _standardize(series)
    n = len(z)
    cdf = stats.norm.cdf(z)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
    return NormalityResult(float(d), float(stats.kstwobign.sf(math.sqrt(n) * d)))


def anderson_darling(series) -> NormalityResult:
    """Anderson-Darling statistic with the estimated-parameter adjustment ``A²(1 + .75/n + 2.25/n²)``."""
    z = _standardize(series)
    n = len(z)
    i = np.arange(1, n + 1)
    logcdf = stats.norm.logcdf(z)
    logsf = stats.norm.logsf(z[::-1])
    a2 = -n - np.sum((2 * i - 1) * (logcdf + logsf)) / n
    a = a2 * (1.0 + 0.75 / n + 2.25 / n**2)
    # D'Agostino & Stephens (1986), Table 4.9
    if a >= 0.6:
        p = math.exp(1.2937 - 5.709 * a + 0.0186 * a * a)
    elif a >= 0.34:
        p = math.exp(0.9177 - 4.279 * a - 1.38 * a * a)
    elif a >= 0.2:
        p = 1.0 - math.exp(-8.318 + 42.796 * a - 59.938 * a * a)
    else:
        p = 1.0 - math.exp(-13.436 + 101.14 * a - 223.73 * a * a)
    return NormalityResult(float(a), float(min(max(p, 0.0), 1.0)))


def diagnostics(series, tests=("adf", "ks", "ad", "acf"), max_lag: int = 20) -> dict:
    """Run the selected diagnostics on the non-missing part of ``series``.

    The returned mapping is JSON-ready and uses the field names of the usual
    ADF and normality-test report tables.
    """
    x = series.defined() if isinstance(series, OfiSeries) else np.asarray(series, dtype=float)
    x = x[~np.isnan(x)]
    out: dict = {"n": int(len(x))}
    if "adf" in tests:
        r = adf_test(x)
        out["adf"] = {
            "ADFStatistic": r.statistic,
            "PValue": r.pvalue,
            "NoOfSamples": r.nobs,
            "Lag": r.lag,
            "CriticalValues": r.critical_values,
        }
    normality = []
    if "ks" in tests:
        r = ks_normality(x)
        normality.append(
            {"Method": "Kolmogorov-Smirnov normality test", "TestStatistic": r.statistic, "PValue": r.pvalue}
        )
    if "ad" in tests:
        r = anderson_darling(x)
        normality.append(
            {"Method": "Anderson-Darling normality test", "TestStatistic": r.statistic, "PValue": r.pvalue}
        )
    if normality:
        out["normality"] = normality
    if "acf" in tests or "pacf" in tests:
        lag = min(max_lag, len(x) - 1)
        out["acf"] = acf(x, lag).tolist()
        out["pacf"] = pacf(x, lag).tolist()
    return out
