"""Maximum-likelihood and EM estimation of multivariate Hawkes models.

All optimizers work on the per-event log-likelihood ``lnL / N`` so that
step sizes and tolerances do not depend on the window length.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .hawkes import _engine
from .hawkes.kernels import (
    EventHistory,
    ExponentialKernel,
    GridKernel,
    HawkesModel,
    Kernel,
    PowerLawKernel,
    SumExponentialKernel,
    log_grid_edges,
)

logger = logging.getLogger(__name__)

DEFAULT_DECAYS = (0.1, 1.0, 10.0)


class LikelihoodError(ValueError):
    """The intensity is not strictly positive at some event."""


class FitDivergedError(RuntimeError):
    pass


@dataclass
class FitConfig:
    """Settings for the projected gradient-ascent fitters.

    ``learning_rate`` is the first trial step; later steps are picked by the
    Barzilai-Borwein rule and halved until the likelihood does not decrease.
    """

    learning_rate: float = 0.1
    max_iters: int = 3000
    grad_tol: float = 1e-6
    patience: int = 50
    param_floor: float = 1e-8
    seed: int = 0
    init: np.ndarray | str = "default"
    log_param: bool = False
    max_backtracks: int = 40

    def __post_init__(self):
        if not self.learning_rate > 0 or self.max_iters < 1 or not self.param_floor > 0:
            raise ValueError("need learning_rate > 0, max_iters >= 1, param_floor > 0")


@dataclass
class FitResult:
    model: HawkesModel
    neg_log_likelihood: float
    iterations: int
    converged: bool
    grad_norm_final: float
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update(nll=self.neg_log_likelihood, iterations=self.iterations, converged=self.converged)
        return d


# ----------------------------------------------------------------------------
# likelihood and gradient


class Likelihood:
    """``theta -> (lnL, d lnL / d theta)`` for a fixed history and kernel family.

    ``theta`` follows :meth:`HawkesModel.to_vector`.
    """

    def __init__(self, template: HawkesModel, history: EventHistory):
        if template.dim != history.dim:
            raise ValueError("model and history dimensions differ")
        if history.start != 0.0:
            history = history.shifted(history.start)
        self.template = template
        self.history = history
        self.times, self.types = history.merged()
        self.T = float(history.horizon)
        self.n_events = len(self.times)
        self.dim = template.dim
        k = template.kernel
        if isinstance(k, GridKernel):
            self.exposure = _engine.grid_exposure(self.times, self.types, self.T, k.edges, self.dim)

    def __call__(self, theta) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        D = self.dim
        mu = np.ascontiguousarray(theta[:D])
        k = self.template.kernel
        rest = theta[D:]
        if isinstance(k, ExponentialKernel):
            n = D * D
            ci, cj, cu, _, _ = k.components()
            ca, dec = np.ascontiguousarray(rest[:n]), np.ascontiguousarray(rest[n:])
            ll, g_mu, g_a, g_b, ok = _engine.expsum_loglik(
                self.times, self.types, self.T, mu, ci, cj, cu, ca, dec
            )
            grad = np.concatenate([g_mu, g_a, g_b])
        elif isinstance(k, SumExponentialKernel):
            U = len(k.decays)
            n = U * D * D
            ci, cj, cu, _, _ = k.components()
            ca, dec = np.ascontiguousarray(rest[:n]), np.ascontiguousarray(rest[n : n + U])
            ll, g_mu, g_a, g_b, ok = _engine.expsum_loglik(
                self.times, self.types, self.T, mu, ci, cj, cu, ca, dec
            )
            grad = np.concatenate([g_mu, g_a, np.bincount(cu, weights=g_b, minlength=U)])
        elif isinstance(k, PowerLawKernel):
            n = D * D
            A, B, Dl = (np.ascontiguousarray(rest[q * n : (q + 1) * n]).reshape(D, D) for q in range(3))
            ll, g_mu, gA, gB, gD, ok = _engine.powerlaw_loglik(self.times, self.types, self.T, mu, A, B, Dl)
            grad = np.concatenate([g_mu, gA.ravel(), gB.ravel(), gD.ravel()])
        elif isinstance(k, GridKernel):
            V = np.ascontiguousarray(rest).reshape(k.values.shape)
            ll, g_mu, gV, _, _, ok = _engine.grid_sweep(
                self.times, self.types, self.T, mu, k.edges, V, self.exposure, False
            )
            grad = np.concatenate([g_mu, gV.ravel()])
        else:
            raise TypeError(f"unsupported kernel {type(k).__name__}")
        if not ok:
            return -math.inf, grad
        return float(ll), grad


def log_likelihood(model: HawkesModel, history: EventHistory) -> float:
    """Exact log-likelihood on ``[0, T]``; raises if the intensity vanishes at an event."""
    ll, _ = Likelihood(model, history)(model.to_vector())
    if not math.isfinite(ll):
        raise LikelihoodError("intensity is not strictly positive at some event")
    return ll


def grad_log_likelihood(model: HawkesModel, history: EventHistory) -> np.ndarray:
    ll, g = Likelihood(model, history)(model.to_vector())
    if not math.isfinite(ll):
        raise LikelihoodError("intensity is not strictly positive at some event")
    return g


def compensator_path(model: HawkesModel, history: EventHistory) -> np.ndarray:
    """``Lambda_i(t_k)`` for every merged event ``k`` (exponential families only)."""
    k = model.kernel
    if not isinstance(k, (ExponentialKernel, SumExponentialKernel)):
        raise TypeError("compensator path is implemented for exponential-type kernels")
    t, y = history.merged()
    ci, cj, cu, ca, dec = k.components()
    return _engine.expsum_compensator_path(t - history.start, y, model.mu, ci, cj, cu, ca, dec)


def rescaled_interarrivals(model: HawkesModel, history: EventHistory) -> list[np.ndarray]:
    """Per-dimension compensator increments between consecutive events (Exp(1) under the true model)."""
    t, y = history.merged()
    lam = compensator_path(model, history)
    out = []
    for i in range(model.dim):
        c = lam[y == i, i]
        out.append(np.diff(np.concatenate([[0.0], c])))
    return out


# ----------------------------------------------------------------------------
# initial values


def default_init(family: str | Kernel, history: EventHistory, decays=DEFAULT_DECAYS) -> HawkesModel:
    """``mu_i = n_i / (2T)`` plus a small kernel with branching well below one."""
    D = history.dim
    T = history.length
    mu = np.maximum(history.counts() / (2.0 * T), 1e-6)
    if isinstance(family, Kernel):
        return HawkesModel(mu, family)
    if family == "exponential":
        k: Kernel = ExponentialKernel(np.full((D, D), 0.1), np.ones((D, D)))
    elif family == "sum_exponential":
        dec = np.asarray(decays, dtype=float)
        k = SumExponentialKernel(np.full((len(dec), D, D), 0.1 / len(dec)) * dec[:, None, None], dec)
    elif family == "power_law":
        k = PowerLawKernel(np.full((D, D), 0.1), np.full((D, D), 1.5), np.full((D, D), 0.01))
    else:
        raise ValueError(f"unknown family {family!r}")
    return HawkesModel(mu, k)


def _init_model(family, history, config: FitConfig, decays=DEFAULT_DECAYS) -> HawkesModel:
    if isinstance(family, HawkesModel):
        template = family
    else:
        template = default_init(family, history, decays)
    if isinstance(config.init, str):
        if config.init != "default":
            raise ValueError(f"unknown init {config.init!r}")
        return template
    return template.with_vector(np.asarray(config.init, dtype=float))


def _check_nonempty(history: EventHistory, dims=None):
    counts = history.counts()
    dims = range(history.dim) if dims is None else dims
    if history.length <= 0:
        raise ValueError("empty observation window")
    if all(counts[d] == 0 for d in dims):
        raise ValueError("history has no events")


# ----------------------------------------------------------------------------
# projected gradient ascent


def _projected_grad(theta, g, lb, free):
    pg = np.where(free, g, 0.0)
    at_floor = theta <= lb
    pg[at_floor & (pg < 0)] = 0.0
    return pg


def projected_ascent(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta0: np.ndarray,
    lb: np.ndarray,
    config: FitConfig,
    free: np.ndarray | None = None,
    scale: float = 1.0,
):
    """Maximize ``f`` over ``theta >= lb`` by projected gradient steps.

    The step length starts at ``config.learning_rate`` and is re-selected
    every iteration with the Barzilai-Borwein rule, then halved until the
    objective does not decrease.  Coordinates are preconditioned by the
    magnitude of the starting point.  The best point seen is returned.

    Returns ``(theta, value, iterations, converged, grad_norm, trace)``.
    """
    free = np.ones(theta0.shape, bool) if free is None else free
    theta = np.maximum(np.asarray(theta0, dtype=float), lb)
    d = np.maximum(np.abs(theta), 1e-2)
    val, g = f(theta)
    val *= scale
    g = g * scale
    if not math.isfinite(val):
        raise FitDivergedError("log-likelihood is not finite at the initial point")
    trace = [val]
    best, best_theta = val, theta.copy()
    step = config.learning_rate
    stall = 0
    converged = False
    pg = _projected_grad(theta, g, lb, free)
    gnorm = float(np.linalg.norm(pg))
    it = 0
    for it in range(1, config.max_iters + 1):
        if gnorm < config.grad_tol:
            converged = True
            it -= 1
            break
        direction = np.where(free, d * d * g, 0.0)
        accepted = False
        for _ in range(config.max_backtracks):
            cand = np.maximum(theta + step * direction, lb)
            cand = np.where(free, cand, theta)
            cval, cg = f(cand)
            cval *= scale
            if math.isfinite(cval) and cval >= val - 1e-14 * abs(val):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if it == 1 and not math.isfinite(cval):
                raise FitDivergedError("step-size backtracking failed to find a finite likelihood")
            converged = gnorm < 10 * config.grad_tol
            break
        cg = cg * scale
        s = (cand - theta) / d
        yv = (g - cg) * d
        theta, val, g = cand, cval, cg
        sy = float(s @ yv)
        step = float(s @ s) / sy if sy > 0 else step * 2.0
        step = min(max(step, 1e-12), 1e12)
        pg = _projected_grad(theta, g, lb, free)
        gnorm = float(np.linalg.norm(pg))
        trace.append(val)
        if val > best + 1e-12 * abs(best):
            best, best_theta = val, theta.copy()
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    else:
        converged = gnorm < config.grad_tol
    if val >= best:
        best, best_theta = val, theta.copy()
    if not converged and gnorm < config.grad_tol:
        converged = True
    # report the gradient at the returned point
    _, gb = f(best_theta)
    gnorm = float(np.linalg.norm(_projected_grad(best_theta, gb * scale, lb, free)))
    return best_theta, best, it, converged, gnorm, trace


def _result(model, lik: Likelihood, theta, ll_scaled, n_scale, it, converged, gnorm, trace):
    return FitResult(
        model=model.with_vector(theta),
        neg_log_likelihood=-ll_scaled * n_scale,
        iterations=it,
        converged=bool(converged),
        grad_norm_final=gnorm,
        history=[-v * n_scale for v in trace],
    )


def fit_mle_sgd(family, history: EventHistory, config: FitConfig | None = None) -> FitResult:
    """Fit a parametric family by full-batch projected gradient ascent.

    Parameters
    ----------
    family : {"exponential", "sum_exponential", "power_law"}, Kernel or HawkesModel
        A name picks the default initialization; a model instance is used as
        the starting point and fixes the family (and, for sum-exp, the decays).
    history : EventHistory
    config : FitConfig, optional

    Returns
    -------
    FitResult
        Best parameters seen.  ``grad_norm_final`` is the norm of the
        projected gradient of ``lnL / N``.
    """
    config = config or FitConfig()
    _check_nonempty(history)
    model0 = _init_model(family, history, config)
    lik = Likelihood(model0, history)
    n = max(lik.n_events, 1)
    lb = model0.lower_bounds(config.param_floor)
    if config.log_param:
        return _fit_log_param(model0, lik, lb, config)
    theta, val, it, conv, gnorm, trace = projected_ascent(lik, model0.to_vector(), lb, config, scale=1.0 / n)
    return _result(model0, lik, theta, val, n, it, conv, gnorm, trace)


def _fit_log_param(model0, lik, lb, config):
    # theta = lb + exp(z); unconstrained quasi-Newton on z
    n = max(lik.n_events, 1)
    z0 = np.log(np.maximum(model0.to_vector() - lb, config.param_floor))

    def obj(z):
        th = lb + np.exp(z)
        v, g = lik(th)
        if not math.isfinite(v):
            return 1e300, np.zeros_like(z)
        return -v / n, -g * np.exp(z) / n

    res = optimize.minimize(obj, z0, jac=True, method="L-BFGS-B", options={"maxiter": config.max_iters})
    theta = lb + np.exp(res.x)
    v, g = lik(theta)
    gnorm = float(np.linalg.norm(_projected_grad(theta, g / n, lb, np.ones(len(theta), bool))))
    return _result(model0, lik, theta, v / n, n, int(res.nit), gnorm < 10 * config.grad_tol, gnorm, [])


def _lbfgsb(lik: Likelihood, theta0, lb, config: FitConfig, free=None):
    n = max(lik.n_events, 1)
    free = np.ones(len(theta0), bool) if free is None else free
    fixed = theta0.copy()
    trace = []

    def full(x):
        th = fixed.copy()
        th[free] = x
        return th

    def obj(x):
        v, g = lik(full(x))
        if not math.isfinite(v):
            return 1e300, np.zeros_like(x)
        trace.append(v / n)
        return -v / n, -g[free] / n

    x0 = np.maximum(theta0, lb)[free]
    bounds = [(b, None) for b in lb[free]]
    res = optimize.minimize(
        obj,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": config.max_iters, "ftol": 1e-15, "gtol": config.grad_tol * 1e-2, "maxcor": 20},
    )
    theta = full(res.x)
    v, g = lik(theta)
    v0, _ = lik(np.maximum(theta0, lb))
    if not math.isfinite(v) or (math.isfinite(v0) and v < v0):
        theta, v = np.maximum(theta0, lb), v0
        _, g = lik(theta)
    if not math.isfinite(v):
        raise FitDivergedError("optimizer did not reach a finite likelihood")
    gnorm = float(np.linalg.norm(_projected_grad(theta, g / n, lb, free)))
    return theta, v / n, int(res.nit), gnorm < 10 * config.grad_tol, gnorm, trace


def fit_exp_fast(history: EventHistory, config: FitConfig | None = None, init: HawkesModel | None = None) -> FitResult:
    """Exponential-kernel MLE by bounded quasi-Newton on the O(n) recursive likelihood."""
    config = config or FitConfig()
    _check_nonempty(history)
    model0 = init if init is not None else _init_model("exponential", history, config)
    if not isinstance(model0.kernel, ExponentialKernel):
        raise TypeError("fit_exp_fast needs an exponential kernel")
    lik = Likelihood(model0, history)
    lb = model0.lower_bounds(config.param_floor)
    theta, val, it, conv, gnorm, trace = _lbfgsb(lik, model0.to_vector(), lb, config)
    return _result(model0, lik, theta, val, max(lik.n_events, 1), it, conv, gnorm, trace)


def fit_sumexp(
    history: EventHistory,
    decays=DEFAULT_DECAYS,
    config: FitConfig | None = None,
    init: HawkesModel | None = None,
    method: str = "projected",
) -> FitResult:
    """MLE of ``mu`` and the ``alpha^u_ij`` with the shared decays held fixed.

    ``method="projected"`` uses :func:`projected_ascent`; ``"lbfgsb"`` uses the
    bounded quasi-Newton solver on the same concave objective.
    """
    config = config or FitConfig()
    dec = np.asarray(decays, dtype=float)
    if (dec <= 0).any() or len(np.unique(dec)) != len(dec):
        raise ValueError("decays must be positive and distinct")
    _check_nonempty(history)
    if init is None:
        model0 = _init_model("sum_exponential", history, config, dec)
    else:
        model0 = init
    if not isinstance(model0.kernel, SumExponentialKernel) or not np.array_equal(model0.kernel.decays, dec):
        raise ValueError("init must be a sum-exponential model with the requested decays")
    lik = Likelihood(model0, history)
    n = max(lik.n_events, 1)
    theta0 = model0.to_vector()
    lb = model0.lower_bounds(config.param_floor)
    lb[model0.dim :] = 0.0
    free = np.ones(len(theta0), bool)
    free[-len(dec) :] = False
    if method == "lbfgsb":
        theta, val, it, conv, gnorm, trace = _lbfgsb(lik, theta0, lb, config, free)
    elif method == "projected":
        theta, val, it, conv, gnorm, trace = projected_ascent(lik, theta0, lb, config, free=free, scale=1.0 / n)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _result(model0, lik, theta, val, n, it, conv, gnorm, trace)


# ----------------------------------------------------------------------------
# non-parametric EM


@dataclass
class GridConfig:
    support: float = 60.0
    bins: int = 60
    first_edge: float | None = None

    def edges(self) -> np.ndarray:
        return log_grid_edges(self.support, self.bins, self.first_edge)


class EMMonotonicityError(AssertionError):
    pass


def fit_em_grid(
    history: EventHistory,
    grid: GridConfig | None = None,
    max_em_iters: int = 500,
    tol: float = 1e-8,
    init: HawkesModel | None = None,
) -> FitResult:
    """Histogram-kernel estimation by expectation-maximization.

    Each event is split between the baseline and every earlier event within
    the kernel support in proportion to their intensity contributions; the
    M-step divides the attributed mass by the corresponding exposure time.
    ``tol`` applies to the per-event log-likelihood gain.
    """
    grid = grid or GridConfig()
    _check_nonempty(history)
    if history.start != 0.0:
        history = history.shifted(history.start)
    edges = grid.edges()
    D = history.dim
    T = history.length
    counts = history.counts()
    if init is None:
        mu = np.maximum(counts / (2.0 * T), 1e-6)
        # half of the events attributed to the kernel, spread evenly over the support
        vals = np.full((D, D, len(edges) - 1), 0.5 / (D * edges[-1]))
        model = HawkesModel(mu, GridKernel(edges, vals))
    else:
        model = init
    t, y = history.merged()
    n = max(len(t), 1)
    exposure = _engine.grid_exposure(t, y, T, edges, D)
    mu = model.mu.copy()
    V = np.ascontiguousarray(model.kernel.values.copy())
    trace = []
    converged = False
    it = 0
    prev = -math.inf
    for it in range(1, max_em_iters + 1):
        ll, _, _, base, num, ok = _engine.grid_sweep(t, y, T, mu, edges, V, exposure, True)
        if not ok:
            raise LikelihoodError("intensity vanished at an event during EM")
        ll /= n
        if ll < prev - 1e-10 * max(1.0, abs(prev)):
            raise EMMonotonicityError(f"EM log-likelihood decreased: {prev} -> {ll}")
        trace.append(ll)
        if ll - prev < tol:
            converged = True
            break
        prev = ll
        mu = base / T
        with np.errstate(divide="ignore", invalid="ignore"):
            V = np.where(exposure[None, :, :] > 0, num / exposure[None, :, :], 0.0)
        V = np.ascontiguousarray(V)
    final, g_mu, gV, _, _, _ = _engine.grid_sweep(t, y, T, mu, edges, V, exposure, False)
    gnorm = float(np.linalg.norm(np.concatenate([g_mu, gV.ravel()])) / n)
    return FitResult(
        model=HawkesModel(mu, GridKernel(edges, V)),
        neg_log_likelihood=-final,
        iterations=it,
        converged=converged,
        grad_norm_final=gnorm,
        history=[-v * n for v in trace],
    )


def fit_family(family: str, history: EventHistory, config: FitConfig | None = None, **kw) -> FitResult:
    """Dispatch by family name (CLI and forecasting use this entry point)."""
    if family == "exponential":
        return fit_exp_fast(history, config, init=kw.get("init"))
    if family == "sum_exponential":
        return fit_sumexp(history, kw.get("decays", DEFAULT_DECAYS), config, init=kw.get("init"))
    if family == "power_law":
        return fit_mle_sgd("power_law", history, config)
    if family == "grid":
        return fit_em_grid(history, kw.get("grid"), kw.get("max_em_iters", 500), kw.get("tol", 1e-8))
    raise ValueError(f"unknown family {family!r}")
