"""Thinning simulation of Hawkes processes and synthetic tick-day generation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal
from typing import Callable

import numpy as np

from .hawkes import _engine
from .hawkes.kernels import (
    BUY,
    SELL,
    EventHistory,
    ExponentialKernel,
    GridKernel,
    HawkesModel,
    PowerLawKernel,
    SumExponentialKernel,
)
from .marketdata import (
    DEFAULT_SESSION_OPEN,
    HEADER,
    NS_PER_SECOND,
    RawTick,
    TradeEvent,
    parse_time_ns,
)

DEFAULT_EPS = 5e-10
DEFAULT_MAX_EVENTS = 10_000_000
SIDE_NAMES = {SELL: "SELL", BUY: "BUY"}


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    seed: int = 0
    eps: float = DEFAULT_EPS
    max_events: int = DEFAULT_MAX_EVENTS

    def __post_init__(self):
        if not self.horizon > 0 or not self.eps > 0 or self.max_events < 1:
            raise ValueError("need horizon > 0, eps > 0 and max_events >= 1")


@dataclass(frozen=True, eq=False)
class SimResult:
    times: tuple
    horizon: float
    truncated: bool = False

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.times])

    def history(self) -> EventHistory:
        return EventHistory(self.times, self.horizon)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "side"])
        rows = sorted((t, d) for d, ts in enumerate(self.times) for t in ts)
        for t, d in rows:
            w.writerow([repr(float(t)), SIDE_NAMES.get(d, str(d)) if len(self.times) == 2 else d])
        return buf.getvalue()


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _split(t: np.ndarray, y: np.ndarray, dim: int) -> tuple:
    return tuple(np.ascontiguousarray(t[y == d]) for d in range(dim))


def _prefix_arrays(model: HawkesModel, prefix: EventHistory | None):
    """Prefix events as sorted arrays re-based so the prefix ends at time 0."""
    if prefix is None:
        return np.empty(0), np.empty(0, dtype=np.int64)
    if prefix.dim != model.dim:
        raise ValueError("history and model dimensions differ")
    t, y = prefix.merged()
    return np.ascontiguousarray(t - prefix.horizon), y


def _general_args(model: HawkesModel):
    k = model.kernel
    D = model.dim
    dummy2 = np.zeros((D, D))
    if isinstance(k, PowerLawKernel):
        return 0, k.alpha, k.beta, k.delta, np.array([0.0, 1.0]), np.zeros((D, D, 1)), np.zeros((D, D, 1))
    if isinstance(k, GridKernel):
        return 1, dummy2, dummy2, dummy2, k.edges, np.ascontiguousarray(k.values), k.envelope()
    raise TypeError(f"unsupported kernel {type(k).__name__}")


def simulate_thinning(
    model: HawkesModel,
    history_prefix: EventHistory | None = None,
    config: SimConfig | None = None,
    rng=None,
) -> SimResult:
    """Simulate on ``(0, horizon]`` by thinning against the summed intensity.

    The prefix (possibly empty) conditions the intensity; its events are
    placed at non-positive times so that the prefix horizon maps to 0.
    Accepted points go to dimension ``i`` with probability ``lambda_i / sum lambda``.
    """
    config = config or SimConfig(horizon=1.0)
    rng = _rng(config.seed if rng is None else rng)
    ht, hy = _prefix_arrays(model, history_prefix)
    k = model.kernel
    mu = np.ascontiguousarray(model.mu)
    if isinstance(k, (ExponentialKernel, SumExponentialKernel)):
        ci, cj, cu, ca, dec = k.components()
        S0 = _engine.expsum_state(ht, hy, cj, cu, dec, 0.0)
        t, y, trunc = _engine.thin_expsum(rng, mu, ci, cj, cu, ca, dec, S0, config.horizon, config.eps, config.max_events)
    else:
        kind, A, B, Dl, edges, V, env = _general_args(model)
        t, y, trunc = _engine.thin_general(
            rng, kind, mu, A, B, Dl, edges, V, env, ht, hy, config.horizon, config.eps, config.max_events
        )
    return SimResult(_split(t, y, model.dim), config.horizon, bool(trunc))


def simulate_counts(
    model: HawkesModel,
    history_prefix: EventHistory | None,
    horizon: float,
    n_sims: int,
    rng,
    eps: float = DEFAULT_EPS,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> np.ndarray:
    """Per-dimension event counts of ``n_sims`` independent continuations, shape ``(n_sims, D)``."""
    rng = _rng(rng)
    ht, hy = _prefix_arrays(model, history_prefix)
    k = model.kernel
    mu = np.ascontiguousarray(model.mu)
    if isinstance(k, (ExponentialKernel, SumExponentialKernel)):
        ci, cj, cu, ca, dec = k.components()
        S0 = _engine.expsum_state(ht, hy, cj, cu, dec, 0.0)
        counts, _ = _engine.thin_expsum_counts(rng, mu, ci, cj, cu, ca, dec, S0, horizon, eps, max_events, n_sims)
        return counts
    kind, A, B, Dl, edges, V, env = _general_args(model)
    out = np.zeros((n_sims, model.dim), dtype=np.int64)
    for s in range(n_sims):
        _, y, _ = _engine.thin_general(rng, kind, mu, A, B, Dl, edges, V, env, ht, hy, horizon, eps, max_events)
        out[s] = np.bincount(y, minlength=model.dim)
    return out


def simulate_poisson(rates, tau: float, seed=0) -> SimResult:
    """Independent homogeneous Poisson streams on ``(0, tau]``."""
    rates = np.asarray(rates, dtype=float)
    if (rates < 0).any():
        raise ValueError("rates must be non-negative")
    rng = _rng(seed)
    times = []
    for r in rates:
        n = rng.poisson(r * tau)
        times.append(np.sort(tau * (1.0 - rng.random(n))))
    return SimResult(tuple(times), tau, False)


# ----------------------------------------------------------------------------
# synthetic tick days


@dataclass
class TickStyle:
    symbol: str = "NIFTY"
    instrument_type: str = "FUT"
    expiry: str = "20180927"
    base_price: str = "11348.85"
    tick_size: str = "0.05"
    lot_size: int = 75
    max_lots: int = 10
    first_oid: int = 1_100_000_000_000_000
    session_open: str = DEFAULT_SESSION_OPEN
    noise_rate: float = 0.5
    # passive orders rest for an Exp(mean) time before being hit
    passive_lag_mean: float = 2.0


_RANK = {"NEW_TICK": 0, "MODIFY_TICK": 1, "CANCEL_TICK": 2, "TRADE": 3}


def synth_day(
    model: HawkesModel,
    session_length: float,
    seed: int = 0,
    style: TickStyle | None = None,
    qty_fn: Callable[[np.random.Generator], int] | None = None,
    price_fn: Callable[[np.random.Generator, Decimal], Decimal] | None = None,
) -> tuple[bytes, list[TradeEvent]]:
    """Synthesize a tick file whose trades follow ``model`` (dimension 0 = SELL, 1 = BUY).

    Every trade is preceded by a NEW_TICK of its passive order (opposite
    side, fresh ID) and written as a TRADE with ``Oid1`` = passive and
    ``Oid2`` = a fresh aggressor ID.  Unrelated NEW/MODIFY/CANCEL traffic is
    interleaved at ``style.noise_rate`` orders per second.

    Returns the file bytes and the ground-truth trades in time order.
    """
    if model.dim != 2:
        raise ValueError("tick days need a two-dimensional (SELL, BUY) model")
    style = style or TickStyle()
    ss = np.random.SeedSequence(seed)
    sim_ss, tick_ss = ss.spawn(2)
    sim = simulate_thinning(model, None, SimConfig(horizon=session_length), rng=np.random.default_rng(sim_ss))
    rng = np.random.default_rng(tick_ss)
    open_ns = parse_time_ns(style.session_open)
    end_ns = int(round(session_length * NS_PER_SECOND))
    tick = Decimal(style.tick_size)
    base = Decimal(style.base_price)
    next_oid = style.first_oid
    events = []  # (ns, rank, seq, RawTick)

    def emit(ns, ev, side, px, q, o1, o2):
        events.append(
            (ns, _RANK[ev], len(events), RawTick(open_ns + ns, style.instrument_type, style.symbol, style.expiry, ev, side, px, q, o1, o2))
        )

    def qty(n):
        if qty_fn:
            return [int(qty_fn(rng)) for _ in range(n)]
        return (style.lot_size * rng.integers(1, style.max_lots + 1, size=n)).tolist()

    t_all = np.concatenate(sim.times)
    d_all = np.concatenate([np.full(len(t), d) for d, t in enumerate(sim.times)])
    order = np.argsort(t_all, kind="stable")
    t_all, d_all = t_all[order], d_all[order]
    n = len(t_all)
    ns_all = np.minimum(np.round(t_all * NS_PER_SECOND).astype(np.int64), end_ns)
    lags = (rng.exponential(style.passive_lag_mean, size=n) * NS_PER_SECOND).astype(np.int64)
    p_ns_all = np.maximum(ns_all - lags, 0)
    q_all = qty(n)
    if price_fn is None:
        px_ticks = np.cumsum(rng.integers(-1, 2, size=n))
        px_all = [base + tick * int(k) for k in px_ticks]
    else:
        px_all, px = [], base
        for _ in range(n):
            px = price_fn(rng, px)
            px_all.append(px)
    truth: list[TradeEvent] = []
    for k in range(n):
        ns = int(ns_all[k])
        side = SIDE_NAMES[int(d_all[k])]
        passive_side = "BUY" if side == "SELL" else "SELL"
        px, q = px_all[k], q_all[k]
        p_oid, a_oid = next_oid + 1, next_oid + 2
        next_oid += 2
        emit(int(p_ns_all[k]), "NEW_TICK", passive_side, px, q, p_oid, -1)
        emit(ns, "TRADE", side, px, q, p_oid, a_oid)
        truth.append(TradeEvent(t=ns / NS_PER_SECOND, ns=ns, side=side, qty=q, price=px))

    last_px = px_all[-1] if n else base
    n_noise = int(rng.poisson(style.noise_rate * session_length))
    noise_ns = (np.sort(rng.random(n_noise)) * session_length * NS_PER_SECOND).astype(np.int64)
    sides = np.where(rng.random(n_noise) < 0.5, "BUY", "SELL")
    offsets = rng.integers(-20, 21, size=n_noise)
    fate = rng.random(n_noise)
    follow = (rng.exponential(5.0, size=n_noise) * NS_PER_SECOND).astype(np.int64)
    mod = rng.integers(-2, 3, size=n_noise)
    nq = qty(n_noise)
    for k in range(n_noise):
        ns = int(noise_ns[k])
        side = str(sides[k])
        next_oid += 1
        px = last_px + tick * int(offsets[k])
        emit(ns, "NEW_TICK", side, px, nq[k], next_oid, -1)
        later = min(ns + int(follow[k]), end_ns)
        if fate[k] < 0.3:
            emit(later, "MODIFY_TICK", side, px + tick * int(mod[k]), nq[k], next_oid, -1)
        elif fate[k] < 0.8:
            emit(later, "CANCEL_TICK", side, px, nq[k], next_oid, -1)

    events.sort(key=lambda e: (e[0], e[1], e[2]))
    lines = [",".join(HEADER)]
    lines.extend(e[3].to_line(", ") for e in events)
    data = ("\n".join(lines) + "\n").encode("ascii")
    truth.sort(key=lambda tr: tr.ns)
    return data, truth


def ground_truth_csv(trades: list[TradeEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "side"])
    for tr in trades:
        w.writerow([f"{tr.ns // NS_PER_SECOND}.{tr.ns % NS_PER_SECOND:09d}", tr.side])
    return buf.getvalue()
