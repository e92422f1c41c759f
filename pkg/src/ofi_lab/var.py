"""Vector autoregression on per-interval buy/sell trade counts."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NOISE_MODES = ("both", "coef", "innovation")


@dataclass(frozen=True, eq=False)
class CountSeries:
    """Counts per interval; column 0 = BUY, column 1 = SELL."""

    interval: float
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise ValueError("counts must be a (T, k) matrix")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_times(cls, buy_times, sell_times, start: float, stop: float, interval: float) -> "CountSeries":
        """Bin ``(start + k*interval, start + (k+1)*interval]`` for ``k = 0..``."""
        n = int(round((stop - start) / interval))
        edges = start + interval * np.arange(n + 1)
        cols = [np.diff(np.searchsorted(np.asarray(t), edges, side="right")) for t in (buy_times, sell_times)]
        return cls(interval, np.column_stack(cols))


@dataclass(frozen=True, eq=False)
class VarModel:
    """``y_t = c + sum_i A_i y_{t-i} + u_t`` with ``u_t ~ N(0, sigma_u)``.

    ``coef_cov`` is the covariance of ``vec(B)`` where ``B`` stacks
    ``[c; A_1'; ...; A_p']`` (one column per equation).
    """

    p: int
    A: np.ndarray
    c: np.ndarray
    sigma_u: np.ndarray
    coef_cov: np.ndarray
    nobs: int
    aic: float = math.nan

    @property
    def k(self) -> int:
        return len(self.c)

    @property
    def B(self) -> np.ndarray:
        return np.vstack([self.c[None, :]] + [a.T for a in self.A])

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "A": self.A.tolist(),
            "c": self.c.tolist(),
            "sigma_u": self.sigma_u.tolist(),
            "coef_cov": self.coef_cov.tolist(),
            "T": self.nobs,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "VarModel":
        return cls(
            p=int(d["p"]),
            A=np.array(d["A"], dtype=float),
            c=np.array(d["c"], dtype=float),
            sigma_u=np.array(d["sigma_u"], dtype=float),
            coef_cov=np.array(d["coef_cov"], dtype=float),
            nobs=int(d["T"]),
        )


def _design(y: np.ndarray, p: int, skip: int) -> tuple[np.ndarray, np.ndarray]:
    # rows t = skip..T-1 regress y_t on [1, y_{t-1}, ..., y_{t-p}]
    T, k = y.shape
    X = np.empty((T - skip, 1 + k * p))
    X[:, 0] = 1.0
    for i in range(1, p + 1):
        X[:, 1 + k * (i - 1) : 1 + k * i] = y[skip - i : T - i]
    return X, y[skip:]


def _ols(X, Y):
    xtx = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise np.linalg.LinAlgError("singular VAR design matrix")
    xtx_inv = np.linalg.inv(xtx)
    B = xtx_inv @ (X.T @ Y)
    resid = Y - X @ B
    return B, resid, xtx_inv


def _aic(resid: np.ndarray, p: int) -> float:
    T, k = resid.shape
    sigma_mle = resid.T @ resid / T
    sign, logdet = np.linalg.slogdet(sigma_mle)
    if sign <= 0:
        return math.inf
    return float(logdet + 2.0 * (p * k * k + k) / T)


def fit_var_order(series: CountSeries | np.ndarray, p: int) -> VarModel:
    y = np.asarray(series.counts if isinstance(series, CountSeries) else series, dtype=float)
    X, Y = _design(y, p, p)
    B, resid, xtx_inv = _ols(X, Y)
    T_eff, k = Y.shape
    dof = T_eff - X.shape[1]
    if dof <= 0:
        raise np.linalg.LinAlgError("not enough observations for this VAR order")
    sigma_u = resid.T @ resid / dof
    A = np.stack([B[1 + k * i : 1 + k * (i + 1)].T for i in range(p)])
    return VarModel(
        p=p, A=A, c=B[0].copy(), sigma_u=sigma_u, coef_cov=np.kron(sigma_u, xtx_inv), nobs=T_eff, aic=_aic(resid, p)
    )


def fit_var(series: CountSeries | np.ndarray, p_max: int = 10) -> VarModel:
    """OLS VAR with the lag order chosen by AIC among ``1..p_max``.

    Candidate orders are compared on the common sample that drops the first
    ``p_max`` rows; the chosen order is then refit on all available rows.
    """
    y = np.asarray(series.counts if isinstance(series, CountSeries) else series, dtype=float)
    T = len(y)
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    if T <= 2 * p_max + 10:
        raise ValueError(f"need more than 2*p_max + 10 = {2 * p_max + 10} rows, got {T}")
    best_p, best_aic = 1, math.inf
    for p in range(1, p_max + 1):
        X, Y = _design(y, p, p_max)
        _, resid, _ = _ols(X, Y)
        a = _aic(resid, p)
        if a < best_aic:
            best_p, best_aic = p, a
    return fit_var_order(y, best_p)


def _psd_factor(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Lower factor ``L`` with ``L L' = m``; negative eigenvalues are clipped at 0."""
    m = 0.5 * (m + m.T)
    try:
        return np.linalg.cholesky(m), False
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(m)
    repaired = bool((w < -1e-12 * max(1.0, abs(w).max())).any())
    if repaired:
        logger.warning("covariance not PSD; clipped %d negative eigenvalues", int((w < 0).sum()))
    return v * np.sqrt(np.clip(w, 0.0, None)), repaired


def simulate_var(
    model: VarModel,
    last_obs: np.ndarray,
    steps: int,
    seed=0,
    n_draws: int = 500,
    noise: str = "both",
) -> np.ndarray:
    """Simulated count paths, shape ``(n_draws, steps, k)``.

    Each draw samples ``vec(B)`` from its asymptotic normal law (``noise`` in
    {"both", "coef"}) and runs the recursion forward, adding ``N(0, sigma_u)``
    innovations (``noise`` in {"both", "innovation"}).  The recursion runs on
    the continuous values; the returned counts are clamped at 0 and then
    rounded.
    """
    if noise not in NOISE_MODES:
        raise ValueError(f"noise must be one of {NOISE_MODES}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k, p = model.k, model.p
    hist = np.asarray(last_obs, dtype=float)
    if hist.shape != (p, k):
        raise ValueError(f"need the last {p} observations as a ({p}, {k}) array, oldest first")
    B = model.B
    m = B.shape[0]
    L_s, _ = _psd_factor(model.sigma_u)
    if noise in ("both", "coef"):
        L_full, _ = _psd_factor(model.coef_cov)
        z = rng.standard_normal((n_draws, m * k))
        # vec() stacks equation columns, so reshape in Fortran order per draw
        vecb = B.ravel(order="F")[None, :] + z @ L_full.T
        Bd = vecb.reshape((n_draws, k, m)).transpose(0, 2, 1)
    else:
        Bd = np.broadcast_to(B, (n_draws, m, k))
    innov = rng.standard_normal((n_draws, steps, k)) @ L_s.T if noise in ("both", "innovation") else None
    lags = np.broadcast_to(hist, (n_draws, p, k)).copy()
    out = np.empty((n_draws, steps, k))
    for s in range(steps):
        x = np.concatenate([np.ones((n_draws, 1)), lags[:, ::-1, :].reshape(n_draws, p * k)], axis=1)
        yv = np.einsum("dm,dmk->dk", x, Bd)
        if innov is not None:
            yv = yv + innov[:, s]
        out[:, s] = yv
        lags = np.concatenate([lags[:, 1:], yv[:, None, :]], axis=1)
    return np.rint(np.maximum(out, 0.0)).astype(np.int64)


def var_forecast_mean(model: VarModel, last_obs: np.ndarray) -> np.ndarray:
    """Analytic one-step conditional mean (before clamping)."""
    x = np.concatenate([[1.0], np.asarray(last_obs, dtype=float)[::-1].ravel()])
    return x @ model.B
