"""Market data: CSV ingestion, forward-fill alignment, synthetic
generation, the turbulence index, and date splits.

Two input files feed the lab. A price CSV with header ``date,ticker,close``
(one row per day/ticker pair, ISO-8601 dates) and a fundamentals CSV with
``date,ticker`` followed by the fifteen ratio columns of
:data:`RATIO_COLUMNS`, in that order. Fundamentals are sparse in time
(typically quarterly); alignment forward-fills them onto the daily grid.

Only dates present in the price file count as trading days; there is no
exchange-calendar logic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from shufflerl.errors import DataError, InsufficientHistoryError

RATIO_COLUMNS = (
    "current_ratio",
    "cash_ratio",
    "quick_ratio",
    "debt_ratio",
    "debt_to_equity",
    "inventory_turnover",
    "receivables_turnover",
    "payables_turnover",
    "operating_margin",
    "net_profit_margin",
    "return_on_assets",
    "return_on_equity",
    "earnings_per_share",
    "book_per_share",
    "dividend_per_share",
)

RATIO_COUNT = len(RATIO_COLUMNS)

# Typical magnitudes for the synthetic generator, one per ratio column.
_SYNTH_RATIO_BASE = np.array(
    [1.5, 0.6, 1.1, 0.5, 1.2, 6.0, 8.0, 7.0, 0.15, 0.10, 0.07, 0.14, 5.0, 30.0, 1.5]
)


@dataclass(frozen=True)
class PriceTable:
    """Parsed price rows keyed by (date, ticker)."""

    close: dict[tuple[date, str], float]

    @property
    def tickers(self) -> list[str]:
        return sorted({t for _, t in self.close})

    @property
    def days(self) -> list[date]:
        return sorted({d for d, _ in self.close})


@dataclass(frozen=True)
class FundamentalsTable:
    """Sparse ratio observations keyed by (date, ticker); values are
    length-15 arrays in :data:`RATIO_COLUMNS` order."""

    ratios: dict[tuple[date, str], np.ndarray]

    def observations_for(self, ticker: str) -> list[tuple[date, np.ndarray]]:
        obs = [(d, v) for (d, t), v in self.ratios.items() if t == ticker]
        obs.sort(key=lambda pair: pair[0])
        return obs


@dataclass(frozen=True)
class MarketDataset:
    """Dense day-by-ticker grid of closing prices and ratios.

    ``close`` has shape ``(n_days, D)``; ``ratios`` has shape
    ``(n_days, 15, D)`` with the ratio axis in :data:`RATIO_COLUMNS` order.
    Immutable once built; safe to share across threads.
    """

    tickers: tuple[str, ...]
    days: tuple[date, ...]
    close: np.ndarray
    ratios: np.ndarray

    def __post_init__(self):
        close = np.asarray(self.close, dtype=np.float64)
        ratios = np.asarray(self.ratios, dtype=np.float64)
        close.setflags(write=False)
        ratios.setflags(write=False)
        object.__setattr__(self, "close", close)
        object.__setattr__(self, "ratios", ratios)
        n, d = len(self.days), len(self.tickers)
        if d < 1:
            raise DataError("dataset needs at least one ticker")
        if close.shape != (n, d):
            raise DataError(f"close grid shape {close.shape} != ({n}, {d})")
        if ratios.shape != (n, RATIO_COUNT, d):
            raise DataError(f"ratio grid shape {ratios.shape} != ({n}, {RATIO_COUNT}, {d})")
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise DataError("dates must be strictly increasing")
        if not np.all(close > 0):
            raise DataError("all close prices must be strictly positive")
        if not np.all(np.isfinite(ratios)):
            raise DataError("all ratios must be finite")

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def ticker_count(self) -> int:
        return len(self.tickers)

    def day_index(self, day: date) -> int:
        return self.days.index(day)


@dataclass(frozen=True)
class TurbulenceSeries:
    """Per-day turbulence values aligned to a dataset's days.

    Entries before the lookback window fills are NaN; defined entries are
    nonnegative.
    """

    values: np.ndarray
    lookback: int

    def defined_mask(self) -> np.ndarray:
        return np.isfinite(self.values)


def _parse_date(text: str, source: str, line: int) -> date:
    try:
        return date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"bad ISO-8601 date {text!r}", source=source, line=line) from None


def _parse_float(text: str, column: str, source: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} in column {column!r}", source=source, line=line) from None
    if not np.isfinite(value):
        raise DataError(f"non-finite value {text!r} in column {column!r}", source=source, line=line)
    return value


def load_prices(path) -> PriceTable:
    """Parse a ``date,ticker,close`` CSV.

    Rejects nonpositive prices, malformed rows, and duplicate
    (date, ticker) pairs, naming the offending line.
    """
    source = str(path)
    close: dict[tuple[date, str], float] = {}
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open price file: {exc}", source=source) from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "ticker", "close"]:
            raise DataError(f"expected header 'date,ticker,close', got {header}", source=source, line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"expected 3 columns, got {len(row)}", source=source, line=line_no)
            day = _parse_date(row[0], source, line_no)
            ticker = row[1].strip()
            if not ticker:
                raise DataError("empty ticker", source=source, line=line_no)
            price = _parse_float(row[2], "close", source, line_no)
            if price <= 0:
                raise DataError(f"nonpositive close {price} for {ticker}", source=source, line=line_no)
            key = (day, ticker)
            if key in close:
                raise DataError(f"duplicate (date, ticker) pair ({day}, {ticker})", source=source, line=line_no)
            close[key] = price
    if not close:
        raise DataError("price file contains no data rows", source=source)
    return PriceTable(close)


def load_fundamentals(path) -> FundamentalsTable:
    """Parse a fundamentals CSV: ``date,ticker`` plus the 15 ratio columns.

    Observations may be sparse in time. Non-numeric or non-finite cells are
    rejected with their column name and line number.
    """
    source = str(path)
    expected_header = ["date", "ticker", *RATIO_COLUMNS]
    ratios: dict[tuple[date, str], np.ndarray] = {}
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open fundamentals file: {exc}", source=source) from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected_header:
            raise DataError(
                f"expected header {','.join(expected_header)!r}, got {header}",
                source=source,
                line=1,
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 + RATIO_COUNT:
                raise DataError(
                    f"expected {2 + RATIO_COUNT} columns, got {len(row)}", source=source, line=line_no
                )
            day = _parse_date(row[0], source, line_no)
            ticker = row[1].strip()
            if not ticker:
                raise DataError("empty ticker", source=source, line=line_no)
            values = np.array(
                [_parse_float(cell, RATIO_COLUMNS[j], source, line_no) for j, cell in enumerate(row[2:])]
            )
            key = (day, ticker)
            if key in ratios:
                raise DataError(f"duplicate (date, ticker) pair ({day}, {ticker})", source=source, line=line_no)
            ratios[key] = values
    if not ratios:
        raise DataError("fundamentals file contains no data rows", source=source)
    return FundamentalsTable(ratios)


def align_forward_fill(prices: PriceTable, fundamentals: FundamentalsTable) -> MarketDataset:
    """Merge sparse fundamentals onto the daily price grid.

    Each day carries the most recent ratio observation at or before it.
    Days on which any ticker still lacks an observation are dropped from
    the front of the dataset. Every price ticker must appear in the
    fundamentals table.
    """
    tickers = prices.tickers
    days = prices.days
    missing_price = [(d, t) for d in days for t in tickers if (d, t) not in prices.close]
    if missing_price:
        d, t = missing_price[0]
        raise DataError(
            f"price grid incomplete: {len(missing_price)} missing (date, ticker) cells, first ({d}, {t})"
        )

    per_ticker_obs: dict[str, list[tuple[date, np.ndarray]]] = {}
    for t in tickers:
        obs = fundamentals.observations_for(t)
        if not obs:
            raise DataError(f"ticker {t!r} has prices but no fundamentals")
        per_ticker_obs[t] = obs

    # First day on which every ticker has at least one observation.
    coverage_start = max(obs[0][0] for obs in per_ticker_obs.values())
    kept_days = [d for d in days if d >= coverage_start]
    if not kept_days:
        raise DataError(
            f"no price day is covered by fundamentals (first full coverage at {coverage_start})"
        )

    n, d_count = len(kept_days), len(tickers)
    close = np.empty((n, d_count))
    ratios = np.empty((n, RATIO_COUNT, d_count))
    for ti, t in enumerate(tickers):
        obs = per_ticker_obs[t]
        cursor = -1
        for di, day in enumerate(kept_days):
            close[di, ti] = prices.close[(day, t)]
            while cursor + 1 < len(obs) and obs[cursor + 1][0] <= day:
                cursor += 1
            ratios[di, :, ti] = obs[cursor][1]
    return MarketDataset(tuple(tickers), tuple(kept_days), close, ratios)


def _weekdays_from(start: date, count: int) -> list[date]:
    days = []
    current = start
    while len(days) < count:
        if current.weekday() < 5:
            days.append(current)
        current += timedelta(days=1)
    return days


def generate_synthetic_market(
    seed: int,
    tickers: int,
    days: int,
    drift: float = 0.0005,
    volatility: float = 0.01,
    quarter_length: int = 63,
) -> MarketDataset:
    """Geometric-random-walk market, deterministic for a fixed seed.

    Prices start at 100 and evolve as
    ``p[t+1] = p[t] * (1 + drift) * exp(vol * z - vol^2 / 2)`` with standard
    normal ``z``, so a zero-volatility market follows ``100 * (1+drift)^t``
    exactly. Ratios are piecewise-constant, re-drawn every
    ``quarter_length`` trading days.
    """
    if tickers < 1 or days < 1:
        raise DataError(f"tickers and days must be >= 1, got {tickers}, {days}")
    if volatility < 0:
        raise DataError(f"volatility must be >= 0, got {volatility}")
    rng = np.random.default_rng(seed)
    names = tuple(f"SYN{i:02d}" for i in range(tickers))
    calendar = tuple(_weekdays_from(date(2015, 1, 5), days))

    close = np.empty((days, tickers))
    close[0] = 100.0
    if volatility == 0.0:
        for t in range(1, days):
            close[t] = close[t - 1] * (1.0 + drift)
    else:
        shocks = rng.standard_normal((days - 1, tickers)) if days > 1 else np.empty((0, tickers))
        factors = (1.0 + drift) * np.exp(volatility * shocks - 0.5 * volatility**2)
        for t in range(1, days):
            close[t] = close[t - 1] * factors[t - 1]

    n_quarters = (days + quarter_length - 1) // quarter_length
    quarterly = _SYNTH_RATIO_BASE[None, :, None] * rng.lognormal(
        mean=0.0, sigma=0.25, size=(n_quarters, RATIO_COUNT, tickers)
    )
    ratios = np.empty((days, RATIO_COUNT, tickers))
    for t in range(days):
        ratios[t] = quarterly[t // quarter_length]
    return MarketDataset(names, calendar, close, ratios)


def daily_return_matrix(dataset: MarketDataset) -> np.ndarray:
    """Per-ticker simple returns; row t is the return from day t to t+1."""
    return dataset.close[1:] / dataset.close[:-1] - 1.0


def _mahalanobis_sq(deviation: np.ndarray, covariance: np.ndarray) -> float:
    return float(deviation @ np.linalg.solve(covariance, deviation))


def compute_turbulence(
    dataset: MarketDataset, lookback: int = 252, ridge: float = 1e-6
) -> TurbulenceSeries:
    """Squared Mahalanobis distance of each day's return vector from the
    mean of the prior ``lookback`` daily returns, under their
    ridge-regularized sample covariance.

    Day t is defined once t-1 .. t-lookback all have returns, i.e. from day
    index ``lookback + 1`` on. Earlier entries are NaN.
    """
    d = dataset.ticker_count
    if lookback < d + 2:
        raise DataError(f"lookback {lookback} too small for {d} tickers (need >= D + 2)")
    n = dataset.n_days
    first_defined = lookback + 1
    if n <= first_defined:
        raise InsufficientHistoryError(
            f"need more than {first_defined} days for lookback {lookback}, have {n}"
        )
    returns = daily_return_matrix(dataset)  # returns[t-1] is day t's return
    values = np.full(n, np.nan)
    eye = np.eye(d)
    for t in range(first_defined, n):
        window = returns[t - 1 - lookback : t - 1]
        mu = window.mean(axis=0)
        cov = np.cov(window, rowvar=False, ddof=1).reshape(d, d) + ridge * eye
        values[t] = max(_mahalanobis_sq(returns[t - 1] - mu, cov), 0.0)
    return TurbulenceSeries(values, lookback)


def split_by_date(dataset: MarketDataset, boundary: date) -> tuple[MarketDataset, MarketDataset]:
    """Partition days into ``train`` (< boundary) and ``test`` (>= boundary).

    The boundary must lie strictly inside the date range so both halves are
    non-empty; both keep the full ticker set.
    """
    if not dataset.days[0] < boundary <= dataset.days[-1]:
        raise DataError(
            f"boundary {boundary} outside open range ({dataset.days[0]}, {dataset.days[-1]}]"
        )
    cut = next(i for i, d in enumerate(dataset.days) if d >= boundary)
    train = MarketDataset(dataset.tickers, dataset.days[:cut], dataset.close[:cut], dataset.ratios[:cut])
    test = MarketDataset(dataset.tickers, dataset.days[cut:], dataset.close[cut:], dataset.ratios[cut:])
    return train, test
