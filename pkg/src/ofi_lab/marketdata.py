"""Tick-file parsing, order-ID trade classification and per-side counting processes.

Tick files carry one message per line in the exchange dissemination order::

    Time, Type, Symbol, Expiry, Event, Side, Price, Qty, Oid1, Oid2
    09:15:00.077863519, FUT, NIFTY, 20180927, NEW_TICK, BUY, 11348.85, 750, 1100000000000928, -1

A TRADE message names the resting (passive) order in ``Oid1`` and the incoming
(aggressive) order in ``Oid2``.  The trade side is the aggressor side, i.e. the
opposite of the side recorded for ``Oid1`` when it entered the book.
"""
from __future__ import annotations

import io
import logging
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import BinaryIO, Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NS_PER_SECOND = 1_000_000_000
DEFAULT_SESSION_OPEN = "09:15:00"

EVENTS = ("NEW_TICK", "MODIFY_TICK", "CANCEL_TICK", "TRADE")
SIDES = ("BUY", "SELL")
HEADER = ("Time", "Type", "Symbol", "Expiry", "Event", "Side", "Price", "Qty", "Oid1", "Oid2")

_TIME_RE = re.compile(r"^(\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,9}))?$")


class TickParseError(ValueError):
    """The tick source could not be turned into any usable tick."""


class ClassificationError(ValueError):
    """Order-ID index is inconsistent (same order seen with two sides)."""


def parse_time_ns(text: str) -> int:
    """Parse ``HH:MM:SS.fffffffff`` into integer nanoseconds since midnight."""
    m = _TIME_RE.match(text.strip())
    if m is None:
        raise TickParseError(f"timestamp not parseable as HH:MM:SS.fffffffff: {text!r}")
    hh, mm, ss, frac = m.groups()
    frac = (frac or "").ljust(9, "0")
    if int(mm) > 59 or int(ss) > 59:
        raise TickParseError(f"timestamp out of range: {text!r}")
    return ((int(hh) * 60 + int(mm)) * 60 + int(ss)) * NS_PER_SECOND + int(frac)


def format_time_ns(ns: int) -> str:
    secs, frac = divmod(int(ns), NS_PER_SECOND)
    mins, ss = divmod(secs, 60)
    hh, mm = divmod(mins, 60)
    return f"{hh:02d}:{mm:02d}:{ss:02d}.{frac:09d}"


def opposite(side: str) -> str:
    return "SELL" if side == "BUY" else "BUY"


class RawTick(NamedTuple):
    """One tick line; a named tuple because a trading day holds several hundred thousand."""

    time_ns: int
    instrument_type: str
    symbol: str
    expiry: str
    event: str
    side: str
    price: Decimal
    qty: int
    oid1: int
    oid2: int

    def to_line(self, sep: str = ",") -> str:
        return sep.join(
            (
                format_time_ns(self.time_ns),
                self.instrument_type,
                self.symbol,
                self.expiry,
                self.event,
                self.side,
                str(self.price),
                str(self.qty),
                str(self.oid1),
                str(self.oid2),
            )
        )


@dataclass(frozen=True, slots=True)
class TradeEvent:
    """A classified trade; ``t`` is seconds since session open, ``ns`` the exact offset."""

    t: float
    ns: int
    side: str
    qty: int
    price: Decimal


@dataclass
class ParseReport:
    lines: int = 0
    parsed: int = 0
    filtered_out: int = 0
    malformed: int = 0
    first_errors: list[str] = field(default_factory=list)


@dataclass
class ClassificationReport:
    classified: int = 0
    unclassifiable: int = 0
    buy_count: int = 0
    sell_count: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "classified": self.classified,
            "unclassifiable": self.unclassifiable,
            "buy_count": self.buy_count,
            "sell_count": self.sell_count,
        }


def _split_fields(line: str, delimiter: str | None) -> list[str]:
    if delimiter is None:
        delimiter = "," if "," in line else "whitespace"
    if delimiter == "whitespace":
        return line.split()
    return list(map(str.strip, line.split(delimiter)))


def _parse_fields(fields: Sequence[str]) -> RawTick:
    if len(fields) != 10:
        raise ValueError(f"expected 10 fields, got {len(fields)}")
    time_ns = parse_time_ns(fields[0])
    event = fields[4].upper()
    side = fields[5].upper()
    if event not in EVENTS:
        raise ValueError(f"unknown event {fields[4]!r}")
    if side not in SIDES:
        raise ValueError(f"unknown side {fields[5]!r}")
    try:
        price = Decimal(fields[6])
    except InvalidOperation as exc:
        raise ValueError(f"bad price {fields[6]!r}") from exc
    qty = int(fields[7])
    if qty < 0:
        raise ValueError("negative qty")
    return RawTick(
        time_ns=time_ns,
        instrument_type=fields[1],
        symbol=fields[2],
        expiry=fields[3],
        event=event,
        side=side,
        price=price,
        qty=qty,
        oid1=int(fields[8]),
        oid2=int(fields[9]),
    )


def parse_tick_file(
    source: str | os.PathLike | bytes | BinaryIO,
    symbol: str | None = None,
    expiry: str | None = None,
    delimiter: str | None = None,
    report: ParseReport | None = None,
) -> list[RawTick]:
    """Parse a tick file into :class:`RawTick` records in file order.

    Parameters
    ----------
    source : path, bytes or binary stream
        Delimited text, one tick per line; a ``Time,...`` header line is optional.
    symbol, expiry : str, optional
        Keep only ticks for this contract.
    delimiter : {None, ",", "whitespace", ...}
        ``None`` auto-detects comma versus whitespace-aligned columns per line.
    report : ParseReport, optional
        Filled with line counts and the first few malformed-line messages.

    Raises
    ------
    TickParseError
        Unreadable source, or no line could be parsed.
    """
    report = report if report is not None else ParseReport()
    try:
        if isinstance(source, (bytes, bytearray)):
            raw = bytes(source)
        elif hasattr(source, "read"):
            raw = source.read()
        else:
            with open(source, "rb") as fh:
                raw = fh.read()
    except OSError as exc:
        raise TickParseError(f"unreadable source: {exc}") from exc
    text = raw.decode("utf-8", errors="replace") if isinstance(raw, bytes) else str(raw)

    ticks: list[RawTick] = []
    time_errors = 0
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = _split_fields(line, delimiter)
        if fields and fields[0].lower() == "time":
            continue
        report.lines += 1
        try:
            tick = _parse_fields(fields)
        except (ValueError, IndexError) as exc:
            report.malformed += 1
            if isinstance(exc, TickParseError):
                time_errors += 1
            if len(report.first_errors) < 10:
                report.first_errors.append(f"line {lineno}: {exc}")
            continue
        report.parsed += 1
        if (symbol is not None and tick.symbol != symbol) or (
            expiry is not None and tick.expiry != expiry
        ):
            report.filtered_out += 1
            continue
        ticks.append(tick)

    if report.parsed == 0:
        if time_errors and time_errors == report.malformed:
            raise TickParseError(
                "zero parseable lines: timestamp not parseable as HH:MM:SS.fffffffff"
            )
        raise TickParseError("zero parseable lines")
    if report.malformed:
        logger.warning("skipped %d malformed tick lines", report.malformed)
    return ticks


def classify_trades(
    ticks: Iterable[RawTick],
    session_open: str | int = DEFAULT_SESSION_OPEN,
    report: ClassificationReport | None = None,
) -> tuple[list[TradeEvent], ClassificationReport]:
    """Sign every TRADE by looking up the side of its passive order.

    The order-ID index is fed by NEW_TICK and MODIFY_TICK messages and records
    the side at first sight; CANCEL_TICK never touches it.  Trades whose
    passive order was never seen are dropped and counted as unclassifiable.

    Raises
    ------
    ClassificationError
        An order ID reappears with the opposite side.
    """
    report = report if report is not None else ClassificationReport()
    open_ns = parse_time_ns(session_open) if isinstance(session_open, str) else int(session_open)
    side_of: dict[int, str] = {}
    trades: list[TradeEvent] = []
    for tick in ticks:
        if tick.event == "NEW_TICK" or tick.event == "MODIFY_TICK":
            seen = side_of.setdefault(tick.oid1, tick.side)
            if seen != tick.side:
                raise ClassificationError(
                    f"order {tick.oid1} seen as {seen} and later as {tick.side}"
                )
        elif tick.event == "TRADE":
            passive = side_of.get(tick.oid1)
            if passive is None:
                report.unclassifiable += 1
                continue
            side = opposite(passive)
            ns = tick.time_ns - open_ns
            trades.append(TradeEvent(t=ns / NS_PER_SECOND, ns=ns, side=side, qty=tick.qty, price=tick.price))
            report.classified += 1
            if side == "BUY":
                report.buy_count += 1
            else:
                report.sell_count += 1
    if report.unclassifiable:
        logger.warning("%d trades reference unseen passive orders", report.unclassifiable)
    return trades, report


@dataclass(frozen=True)
class CountingProcess:
    """Event times of one trade side; ``N(t)`` counts entries ``<= t``."""

    side: str
    times: np.ndarray
    ns: np.ndarray

    def __post_init__(self) -> None:
        self.times.setflags(write=False)
        self.ns.setflags(write=False)

    def __len__(self) -> int:
        return len(self.times)

    def count(self, t: float) -> int:
        return int(np.searchsorted(self.times, t, side="right"))


def build_counting_process(trades: Sequence[TradeEvent], side: str) -> CountingProcess:
    ns = np.array([tr.ns for tr in trades if tr.side == side], dtype=np.int64)
    order = np.argsort(ns, kind="stable")
    ns = ns[order]
    return CountingProcess(side=side, times=ns / NS_PER_SECOND, ns=ns)


def counting_process_from_times(side: str, times: Sequence[float]) -> CountingProcess:
    t = np.sort(np.asarray(times, dtype=float))
    return CountingProcess(side=side, times=t, ns=np.round(t * NS_PER_SECOND).astype(np.int64))


def window_count(cp: CountingProcess, T: float, h: float) -> int:
    """Number of events in ``(T - h, T]``."""
    if h <= 0:
        raise ValueError("h must be positive")
    return cp.count(T) - cp.count(T - h)
