"""Kernel matrices, Hawkes models and exact intensity / compensator evaluation.

Dimension ordering used throughout the pipeline is ``0 = SELL``, ``1 = BUY``.
Kernel entry ``(i, j)`` is the effect of a past type-``j`` event on the
type-``i`` intensity.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import ClassVar, Sequence

import numpy as np

SELL, BUY = 0, 1


class NonIntegrableKernelError(ValueError):
    pass


def _arr(x, ndim: int | None = None) -> np.ndarray:
    a = np.array(x, dtype=float)
    if ndim is not None and a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


class Kernel:
    """Base class; subclasses are frozen dataclasses holding numpy arrays."""

    variant: ClassVar[str]

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def evaluate(self, i: int, j: int, t):
        """phi_ij(t); zero for negative lags."""
        raise NotImplementedError

    def integral(self, i: int, j: int, x):
        """Closed-form ``int_0^x phi_ij``; ``x`` is clipped below at 0."""
        raise NotImplementedError

    def l1(self, i: int, j: int) -> float:
        raise NotImplementedError

    def l1_matrix(self) -> np.ndarray:
        d = self.dim
        return np.array([[self.l1(i, j) for j in range(d)] for i in range(d)])

    def params_dict(self) -> dict:
        raise NotImplementedError

    def to_vector(self) -> np.ndarray:
        raise NotImplementedError

    def with_vector(self, vec: np.ndarray) -> "Kernel":
        raise NotImplementedError

    def lower_bounds(self, floor: float) -> np.ndarray:
        return np.full(self.to_vector().shape, floor)

    def to_dict(self) -> dict:
        return {"variant": self.variant, **self.params_dict()}


@dataclass(frozen=True, eq=False)
class ExponentialKernel(Kernel):
    """``phi_ij(t) = alpha_ij * exp(-beta_ij * t)``."""

    alpha: np.ndarray
    beta: np.ndarray
    variant: ClassVar[str] = "exponential"

    def __post_init__(self):
        object.__setattr__(self, "alpha", _arr(self.alpha, 2))
        object.__setattr__(self, "beta", _arr(self.beta, 2))
        if self.alpha.shape != self.beta.shape or self.alpha.shape[0] != self.alpha.shape[1]:
            raise ValueError("alpha and beta must be matching square matrices")
        if (self.alpha < 0).any() or (self.beta <= 0).any():
            raise ValueError("need alpha >= 0 and beta > 0")

    @property
    def dim(self) -> int:
        return self.alpha.shape[0]

    def evaluate(self, i, j, t):
        t = np.asarray(t, dtype=float)
        out = self.alpha[i, j] * np.exp(-self.beta[i, j] * np.maximum(t, 0.0))
        return np.where(t < 0, 0.0, out)

    def integral(self, i, j, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        a, b = self.alpha[i, j], self.beta[i, j]
        return a / b * -np.expm1(-b * x)

    def l1(self, i, j):
        return float(self.alpha[i, j] / self.beta[i, j])

    def components(self):
        """Flat ``(ci, cj, cu, ca, dec)`` component layout used by the compiled engine."""
        d = self.dim
        ii, jj = np.divmod(np.arange(d * d), d)
        return ii, jj, np.arange(d * d), self.alpha.ravel().copy(), self.beta.ravel().copy()

    def params_dict(self):
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    def to_vector(self):
        return np.concatenate([self.alpha.ravel(), self.beta.ravel()])

    def with_vector(self, vec):
        n = self.alpha.size
        return ExponentialKernel(vec[:n].reshape(self.alpha.shape), vec[n : 2 * n].reshape(self.beta.shape))


@dataclass(frozen=True, eq=False)
class SumExponentialKernel(Kernel):
    """``phi_ij(t) = sum_u alpha[u, i, j] * exp(-decays[u] * t)`` with decays shared by all pairs."""

    alpha: np.ndarray
    decays: np.ndarray
    variant: ClassVar[str] = "sum_exponential"

    def __post_init__(self):
        object.__setattr__(self, "alpha", _arr(self.alpha, 3))
        object.__setattr__(self, "decays", _arr(self.decays, 1))
        u, d, d2 = self.alpha.shape
        if d != d2 or u != len(self.decays):
            raise ValueError("alpha must have shape (U, D, D) matching len(decays)")
        if (self.alpha < 0).any() or (self.decays <= 0).any():
            raise ValueError("need alpha >= 0 and decays > 0")

    @property
    def dim(self):
        return self.alpha.shape[1]

    def evaluate(self, i, j, t):
        t = np.asarray(t, dtype=float)
        tt = np.maximum(t, 0.0)[..., None]
        out = np.sum(self.alpha[:, i, j] * np.exp(-self.decays * tt), axis=-1)
        return np.where(t < 0, 0.0, out)

    def integral(self, i, j, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)[..., None]
        return np.sum(self.alpha[:, i, j] / self.decays * -np.expm1(-self.decays * x), axis=-1)

    def l1(self, i, j):
        return float(np.sum(self.alpha[:, i, j] / self.decays))

    def components(self):
        """Flat ``(ci, cj, cu, ca, dec)`` layout; all pairs share the decay vector."""
        u, d, _ = self.alpha.shape
        uu, rest = np.divmod(np.arange(u * d * d), d * d)
        ii, jj = np.divmod(rest, d)
        return ii, jj, uu, self.alpha.ravel().copy(), self.decays.copy()

    def params_dict(self):
        return {"alpha": self.alpha.tolist(), "decays": self.decays.tolist()}

    def to_vector(self):
        return np.concatenate([self.alpha.ravel(), self.decays])

    def with_vector(self, vec):
        n = self.alpha.size
        return SumExponentialKernel(vec[:n].reshape(self.alpha.shape), vec[n : n + len(self.decays)])


@dataclass(frozen=True, eq=False)
class PowerLawKernel(Kernel):
    """``phi_ij(t) = alpha_ij / (delta_ij + t) ** beta_ij``; integrable only for ``beta > 1``."""

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    variant: ClassVar[str] = "power_law"

    def __post_init__(self):
        for name in ("alpha", "beta", "delta"):
            object.__setattr__(self, name, _arr(getattr(self, name), 2))
        if not (self.alpha.shape == self.beta.shape == self.delta.shape):
            raise ValueError("alpha, beta, delta must share a shape")
        if (self.alpha < 0).any() or (self.delta <= 0).any() or (self.beta <= 0).any():
            raise ValueError("need alpha >= 0, beta > 0, delta > 0")

    @property
    def dim(self):
        return self.alpha.shape[0]

    def evaluate(self, i, j, t):
        t = np.asarray(t, dtype=float)
        out = self.alpha[i, j] * (self.delta[i, j] + np.maximum(t, 0.0)) ** -self.beta[i, j]
        return np.where(t < 0, 0.0, out)

    def integral(self, i, j, x):
        a, b, d = self.alpha[i, j], self.beta[i, j], self.delta[i, j]
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        if b == 1.0:
            return a * np.log1p(x / d)
        return a / (b - 1.0) * (d ** (1.0 - b) - (d + x) ** (1.0 - b))

    def l1(self, i, j):
        b = self.beta[i, j]
        if b <= 1.0:
            raise NonIntegrableKernelError(f"power-law kernel ({i},{j}) has beta={b} <= 1")
        return float(self.alpha[i, j] * self.delta[i, j] ** (1.0 - b) / (b - 1.0))

    def params_dict(self):
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "delta": self.delta.tolist()}

    def to_vector(self):
        return np.concatenate([self.alpha.ravel(), self.beta.ravel(), self.delta.ravel()])

    def with_vector(self, vec):
        n = self.alpha.size
        s = self.alpha.shape
        return PowerLawKernel(vec[:n].reshape(s), vec[n : 2 * n].reshape(s), vec[2 * n : 3 * n].reshape(s))

    def lower_bounds(self, floor):
        n = self.alpha.size
        lb = np.full(3 * n, floor)
        lb[n : 2 * n] = 1.0 + floor
        return lb


def log_grid_edges(support: float = 60.0, bins: int = 60, first_edge: float | None = None) -> np.ndarray:
    """``[0, e_1, ..., e_bins = support]`` with geometrically spaced interior edges."""
    if first_edge is None:
        first_edge = support / 1000.0
    return np.concatenate([[0.0], np.geomspace(first_edge, support, bins)])


@dataclass(frozen=True, eq=False)
class GridKernel(Kernel):
    """Piecewise-constant kernel: ``values[i, j, b]`` on ``[edges[b], edges[b+1])``, zero past the support."""

    edges: np.ndarray
    values: np.ndarray
    variant: ClassVar[str] = "grid"

    def __post_init__(self):
        object.__setattr__(self, "edges", _arr(self.edges, 1))
        object.__setattr__(self, "values", _arr(self.values, 3))
        if self.edges[0] != 0.0 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must start at 0 and increase strictly")
        d, d2, b = self.values.shape
        if d != d2 or b != len(self.edges) - 1:
            raise ValueError("values must have shape (D, D, len(edges) - 1)")
        if (self.values < 0).any():
            raise ValueError("grid values must be non-negative")

    @property
    def dim(self):
        return self.values.shape[0]

    @property
    def support(self) -> float:
        return float(self.edges[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def evaluate(self, i, j, t):
        t = np.asarray(t, dtype=float)
        b = np.searchsorted(self.edges, t, side="right") - 1
        inside = (t >= 0) & (t < self.edges[-1])
        return np.where(inside, self.values[i, j][np.clip(b, 0, len(self.edges) - 2)], 0.0)

    def integral(self, i, j, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.edges[-1])
        vals = self.values[i, j]
        cum = np.concatenate([[0.0], np.cumsum(vals * self.widths)])
        b = np.clip(np.searchsorted(self.edges, x, side="right") - 1, 0, len(vals) - 1)
        return cum[b] + vals[b] * (x - self.edges[b])

    def l1(self, i, j):
        return float(np.sum(self.values[i, j] * self.widths))

    def envelope(self) -> np.ndarray:
        """Running maximum from the tail: a non-increasing upper bound of each kernel entry."""
        return np.maximum.accumulate(self.values[..., ::-1], axis=-1)[..., ::-1].copy()

    def params_dict(self):
        return {"edges": self.edges.tolist(), "values": self.values.tolist()}

    def to_vector(self):
        return self.values.ravel().copy()

    def with_vector(self, vec):
        return GridKernel(self.edges, np.asarray(vec).reshape(self.values.shape))

    def lower_bounds(self, floor):
        return np.zeros(self.values.size)


KERNELS = {k.variant: k for k in (ExponentialKernel, SumExponentialKernel, PowerLawKernel, GridKernel)}


def kernel_from_dict(d: dict) -> Kernel:
    d = dict(d)
    cls = KERNELS.get(d.pop("variant", None))
    if cls is None:
        raise ValueError(f"unknown kernel variant in {d!r}")
    return cls(**{k: np.array(v, dtype=float) for k, v in d.items()})


def zero_kernel(dim: int) -> ExponentialKernel:
    return ExponentialKernel(np.zeros((dim, dim)), np.ones((dim, dim)))


@dataclass(frozen=True, eq=False)
class HawkesModel:
    mu: np.ndarray
    kernel: Kernel

    def __post_init__(self):
        object.__setattr__(self, "mu", _arr(self.mu, 1))
        if (self.mu < 0).any():
            raise ValueError("baseline intensities must be non-negative")
        if len(self.mu) != self.kernel.dim:
            raise ValueError("mu length does not match kernel dimension")

    @property
    def dim(self) -> int:
        return len(self.mu)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.kernel.to_vector()])

    def with_vector(self, vec) -> "HawkesModel":
        vec = np.asarray(vec, dtype=float)
        return HawkesModel(vec[: self.dim], self.kernel.with_vector(vec[self.dim :]))

    def lower_bounds(self, floor: float) -> np.ndarray:
        return np.concatenate([np.full(self.dim, floor), self.kernel.lower_bounds(floor)])

    def to_dict(self) -> dict:
        return {"dim": self.dim, "mu": self.mu.tolist(), "kernel": self.kernel.to_dict()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "HawkesModel":
        model = cls(np.array(d["mu"], dtype=float), kernel_from_dict(d["kernel"]))
        if "dim" in d and int(d["dim"]) != model.dim:
            raise ValueError("dim field disagrees with mu")
        return model

    @classmethod
    def from_json(cls, text: str) -> "HawkesModel":
        return cls.from_dict(json.loads(text))


def poisson_model(rates: Sequence[float]) -> HawkesModel:
    rates = np.asarray(rates, dtype=float)
    return HawkesModel(rates, zero_kernel(len(rates)))


@dataclass(frozen=True, eq=False)
class EventHistory:
    """Per-dimension sorted event times observed on ``[start, horizon]``."""

    times: tuple
    horizon: float
    start: float = 0.0

    def __post_init__(self):
        ts = tuple(_arr(np.sort(np.asarray(t, dtype=float)), 1) for t in self.times)
        object.__setattr__(self, "times", ts)
        for t in ts:
            if len(t) and (t[0] < self.start or t[-1] > self.horizon):
                raise ValueError("event outside the observation window")

    @property
    def dim(self) -> int:
        return len(self.times)

    @property
    def length(self) -> float:
        return self.horizon - self.start

    def counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.times])

    def merged(self) -> tuple[np.ndarray, np.ndarray]:
        """All events in time order as ``(times, types)``; ties keep dimension order."""
        t = np.concatenate(self.times) if self.times else np.empty(0)
        y = np.concatenate([np.full(len(x), k, dtype=np.int64) for k, x in enumerate(self.times)])
        order = np.argsort(t, kind="stable")
        return np.ascontiguousarray(t[order]), np.ascontiguousarray(y[order])

    def shifted(self, offset: float) -> "EventHistory":
        return EventHistory(tuple(t - offset for t in self.times), self.horizon - offset, self.start - offset)

    def swapped(self, perm: Sequence[int]) -> "EventHistory":
        return EventHistory(tuple(self.times[p] for p in perm), self.horizon, self.start)

    @classmethod
    def from_window(cls, times: Sequence[np.ndarray], lo: float, hi: float) -> "EventHistory":
        """Events in ``(lo, hi]`` re-based so the window becomes ``[0, hi - lo]``."""
        out = []
        for t in times:
            t = np.asarray(t, dtype=float)
            a, b = np.searchsorted(t, [lo, hi], side="right")
            out.append(t[a:b] - lo)
        return cls(tuple(out), hi - lo)


def kernel_eval(kernel: Kernel, i: int, j: int, t):
    return kernel.evaluate(i, j, t)


def kernel_l1(kernel: Kernel, i: int, j: int) -> float:
    return kernel.l1(i, j)


def intensity(model: HawkesModel, history: EventHistory, t: float, i: int) -> float:
    """``mu_i + sum_j sum_{s < t} phi_ij(t - s)`` (events at ``t`` itself are excluded)."""
    lam = float(model.mu[i])
    for j, ts in enumerate(history.times):
        past = ts[ts < t]
        if len(past):
            lam += float(np.sum(model.kernel.evaluate(i, j, t - past)))
    return lam


def compensator(model: HawkesModel, history: EventHistory, i: int, a: float, b: float) -> float:
    """Integrated intensity of dimension ``i`` over ``[a, b]`` in closed form."""
    if b < a:
        raise ValueError("need a <= b")
    total = float(model.mu[i]) * (b - a)
    for j, ts in enumerate(history.times):
        past = ts[ts < b]
        if len(past):
            k = model.kernel
            total += float(np.sum(k.integral(i, j, b - past) - k.integral(i, j, a - past)))
    return total


def branching_matrix(model_or_kernel) -> np.ndarray:
    kernel = model_or_kernel.kernel if isinstance(model_or_kernel, HawkesModel) else model_or_kernel
    return kernel.l1_matrix()


def spectral_radius(matrix, squarings: int = 64) -> float:
    """Spectral radius of a non-negative matrix from Gelfand's formula.

    ``||A^n||^(1/n)`` is evaluated at ``n = 2**squarings`` by repeated
    squaring, renormalizing each step and accumulating the log scale. Unlike
    power iteration this needs no eigen-gap, so reducible and defective
    matrices converge too (a Jordan block contributes ``n**(1/n) - 1``).
    """
    a = np.asarray(matrix, dtype=float)
    if (a < 0).any():
        raise ValueError("spectral_radius expects a non-negative matrix")
    c = float(a.max(initial=0.0))
    if c == 0.0:
        return 0.0
    b = a / c
    log_norm = math.log(c)  # log ||A^(2^k)||, max-entry norm
    for _ in range(squarings):
        b = b @ b
        c = float(b.max())
        if c == 0.0:
            return 0.0  # nilpotent
        b /= c
        log_norm = 2.0 * log_norm + math.log(c)
    return math.exp(log_norm / 2.0**squarings)
