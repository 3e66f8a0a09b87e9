"""Price ingestion, daily features and sliding-window instances.

Each stock-day is described by 15 numbers::

    open, high, low, close, adj_close          raw prices (z-scored on train)
    return                                     one-day return of adj_close
    open/close-1, high/close-1, low/close-1    price-ratio features
    ma5 ... ma30                               moving average / adj_close - 1

An :class:`InstanceWindow` stacks ``weeks * days_per_week`` consecutive
trading days of these vectors for every stock that traded on all of them,
with the following day's return as the target.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PRICE_HEADER = ["stock_id", "date", "open", "high", "low", "close", "adj_close", "volume"]
SECTOR_HEADER = ["stock_id", "sector_id"]
MA_WINDOWS = (5, 10, 15, 20, 25, 30)
MA_HISTORY = max(MA_WINDOWS)
CALENDAR_COVERAGE = 0.9

RAW_FEATURES = ["open", "high", "low", "close", "adj_close"]
RATIO_FEATURES = (["return", "open_ratio", "high_ratio", "low_ratio"]
                  + [f"ma{w}" for w in MA_WINDOWS])
FEATURE_SETS = {
    "full": RAW_FEATURES + RATIO_FEATURES,
    "ratios": RATIO_FEATURES,
}

CACHE_MAGIC = "fingat-instances"
CACHE_VERSION = 1


class MarketDataError(Exception):
    pass


class ParseError(MarketDataError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


class DataError(MarketDataError):
    pass


class ConfigError(MarketDataError):
    pass


class EligibilityError(MarketDataError):
    pass


@dataclass(frozen=True)
class PriceBar:
    stock_id: str
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float

    def validate(self) -> None:
        prices = (self.open, self.high, self.low, self.close, self.adj_close)
        if any(not (p > 0) or not math.isfinite(p) for p in prices):
            raise DataError(f"{self.stock_id} {self.date}: prices must be positive")
        if not (self.volume >= 0):
            raise DataError(f"{self.stock_id} {self.date}: negative volume")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise DataError(f"{self.stock_id} {self.date}: high/low do not bracket open/close")


@dataclass
class SectorCatalog:
    sector_of: dict

    def __post_init__(self):
        members = defaultdict(list)
        for stock in sorted(self.sector_of):
            members[self.sector_of[stock]].append(stock)
        self.sectors = sorted(members)
        self.members = {s: members[s] for s in self.sectors}

    def restrict(self, stocks: Iterable[str]) -> "SectorCatalog":
        stocks = set(stocks)
        missing = sorted(stocks - set(self.sector_of))
        if missing:
            raise DataError(f"stocks without a sector: {', '.join(missing[:5])}")
        return SectorCatalog({s: self.sector_of[s] for s in stocks})

    def to_dict(self) -> dict:
        return {s: self.sector_of[s] for s in sorted(self.sector_of)}


@dataclass
class InstanceWindow:
    """One prediction day: a feature block per stock and next-day targets."""

    prediction_date: dt.date
    stock_ids: tuple
    features: np.ndarray  # (stocks, weeks * days_per_week, n_features)
    target_return: np.ndarray
    target_move: np.ndarray = field(default=None)

    def __post_init__(self):
        self.target_return = np.asarray(self.target_return, dtype=np.float64)
        if self.target_move is None:
            self.target_move = (self.target_return > 0).astype(np.int64)

    @property
    def n_stocks(self) -> int:
        return len(self.stock_ids)

    def subset(self, rows: Sequence[int]) -> "InstanceWindow":
        rows = list(rows)
        return InstanceWindow(self.prediction_date, tuple(self.stock_ids[r] for r in rows),
                              self.features[rows], self.target_return[rows],
                              self.target_move[rows])


def _parse_float(raw: str, path, line: int, col: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(path, line, f"column {col!r}: not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line, f"column {col!r}: not finite")
    return value


def load_prices(path) -> dict:
    """Read a price CSV into ``{stock_id: [PriceBar, ...]}`` sorted by date."""
    path = Path(path)
    out = defaultdict(list)
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PRICE_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(PRICE_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PRICE_HEADER):
                raise ParseError(path, line, f"expected {len(PRICE_HEADER)} fields, got {len(row)}")
            try:
                date = dt.date.fromisoformat(row[1])
            except ValueError:
                raise ParseError(path, line, f"bad date {row[1]!r}") from None
            nums = [_parse_float(v, path, line, c) for v, c in zip(row[2:], PRICE_HEADER[2:])]
            bar = PriceBar(row[0], date, *nums)
            try:
                bar.validate()
            except DataError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            key = (bar.stock_id, date)
            if key in seen:
                raise DataError(f"{path}:{line}: duplicate row for {bar.stock_id} on {date}")
            seen.add(key)
            out[bar.stock_id].append(bar)
    for bars in out.values():
        bars.sort(key=lambda b: b.date)
    return dict(sorted(out.items()))


def load_sectors(path) -> SectorCatalog:
    path = Path(path)
    mapping = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SECTOR_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(SECTOR_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0] or not row[1]:
                raise ParseError(path, line, "expected stock_id,sector_id")
            if row[0] in mapping and mapping[row[0]] != row[1]:
                raise DataError(f"{path}:{line}: {row[0]} assigned to two sectors")
            mapping[row[0]] = row[1]
    return SectorCatalog(mapping)


def return_ratio(p_prev: float, p_cur: float) -> float:
    if not p_prev > 0:
        raise ValueError(f"previous price must be positive, got {p_prev}")
    return (p_cur - p_prev) / p_prev


def price_ratio_features(bar: PriceBar) -> list:
    if not bar.close > 0:
        raise ValueError("close must be positive")
    return [bar.open / bar.close - 1.0, bar.high / bar.close - 1.0, bar.low / bar.close - 1.0]


def moving_average_features(adj_close: Sequence[float], literal: bool = False,
                            windows: Sequence[int] = MA_WINDOWS) -> list:
    """Moving-average features for the last entry of ``adj_close``.

    Needs at least ``max(windows)`` closes before the current one. With
    ``literal`` the ratio is ``mean / (adj_close - 1)`` instead of
    ``mean / adj_close - 1``.
    """
    hist = np.asarray(adj_close, dtype=np.float64)
    if len(hist) - 1 < max(windows):
        raise EligibilityError(f"need {max(windows)} prior closes, got {len(hist) - 1}")
    cur = hist[-1]
    out = []
    for w in windows:
        mean = hist[-w:].sum() / w
        out.append(mean / (cur - 1.0) if literal else mean / cur - 1.0)
    return out


def trading_calendar(bars: dict, coverage: float = CALENDAR_COVERAGE) -> list:
    """Dates on which at least ``coverage`` of the stocks have a bar."""
    counts = defaultdict(int)
    for series in bars.values():
        for b in series:
            counts[b.date] += 1
    need = coverage * len(bars)
    return sorted(d for d, c in counts.items() if c >= need - 1e-9)


def stock_feature_matrix(series: Sequence[PriceBar], calendar: Sequence[dt.date],
                         ma_literal: bool = False) -> np.ndarray:
    """Calendar-aligned ``(len(calendar), 15)`` features; NaN rows where unavailable.

    A day is available when the stock traded on it and on the previous
    calendar day, and has :data:`MA_HISTORY` earlier bars.
    """
    pos = {d: i for i, d in enumerate(calendar)}
    own = [b for b in series if b.date in pos]
    out = np.full((len(calendar), len(FEATURE_SETS["full"])), np.nan)
    adj = np.array([b.adj_close for b in own])
    for k, bar in enumerate(own):
        if k < MA_HISTORY:
            continue
        prev = own[k - 1]
        if pos[prev.date] != pos[bar.date] - 1:
            continue
        row = [bar.open, bar.high, bar.low, bar.close, bar.adj_close,
               return_ratio(prev.adj_close, bar.adj_close)]
        row += price_ratio_features(bar)
        row += moving_average_features(adj[k - MA_HISTORY:k + 1], literal=ma_literal)
        out[pos[bar.date]] = row
    return out


def build_instances(bars: dict, catalog: SectorCatalog, weeks: int = 3, days_per_week: int = 5,
                    feature_set: str = "full", ma_literal: bool = False,
                    coverage: float = CALENDAR_COVERAGE) -> list:
    """Slide a ``weeks * days_per_week`` window (stride one day) over the calendar."""
    if feature_set not in FEATURE_SETS:
        raise ConfigError(f"unknown feature set {feature_set!r}")
    for stock in bars:
        if stock not in catalog.sector_of:
            raise DataError(f"stock {stock} is not in the sector catalog")
    calendar = trading_calendar(bars, coverage)
    stocks = sorted(bars)
    span = weeks * days_per_week
    cols = [FEATURE_SETS["full"].index(f) for f in FEATURE_SETS[feature_set]]
    feats = np.stack([stock_feature_matrix(bars[s], calendar, ma_literal) for s in stocks])
    # (stocks, days, features) -> per-day availability
    ok = np.isfinite(feats).all(axis=2)

    instances = []
    for start in range(MA_HISTORY, len(calendar) - span):
        target = start + span
        rows = []
        for i, s in enumerate(stocks):
            if ok[i, start:target + 1].all():
                rows.append(i)
            else:
                logger.info("excluding %s from window ending %s: missing bars", s, calendar[target])
        if not rows:
            logger.info("no complete stocks for %s; window skipped", calendar[target])
            continue
        block = feats[rows, start:target][:, :, cols]
        target_ret = feats[rows, target, FEATURE_SETS["full"].index("return")]
        instances.append(InstanceWindow(calendar[target], tuple(stocks[i] for i in rows),
                                        np.ascontiguousarray(block), target_ret))
    return instances


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    mean: np.ndarray
    std: np.ndarray
    feature_names: list

    def normalize(self, inst: InstanceWindow) -> InstanceWindow:
        return normalize_instance(inst, self.mean, self.std)


def normalize_instance(inst: InstanceWindow, mean, std) -> InstanceWindow:
    feats = (inst.features - np.asarray(mean)) / np.asarray(std)
    return InstanceWindow(inst.prediction_date, inst.stock_ids, feats,
                          inst.target_return, inst.target_move)


def normalization_stats(instances: Sequence[InstanceWindow], feature_names: Sequence[str]):
    """Per-feature mean/std over every stock-day row of ``instances``.

    Only raw price columns are scaled; ratio columns get mean 0, std 1.
    """
    rows = np.concatenate([inst.features.reshape(-1, inst.features.shape[-1])
                           for inst in instances])
    mean = np.zeros(rows.shape[1])
    std = np.ones(rows.shape[1])
    for j, name in enumerate(feature_names):
        if name in RAW_FEATURES:
            mean[j] = rows[:, j].mean()
            s = rows[:, j].std()
            std[j] = s if s > 0 else 1.0
    return mean, std


def split_chronological(instances: Sequence[InstanceWindow], ratios=(0.6, 0.2, 0.2),
                        feature_names: Optional[Sequence[str]] = None) -> DatasetSplit:
    """Contiguous train/validation/test split by prediction day, normalised on train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1: {ratios}")
    dates = [inst.prediction_date for inst in instances]
    if dates != sorted(dates) or len(set(dates)) != len(dates):
        raise ConfigError("instances must be sorted by prediction date without repeats")
    n = len(instances)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"empty split for {n} days with ratios {tuple(ratios)}")
    if feature_names is None:
        feature_names = (FEATURE_SETS["full"] if instances[0].features.shape[-1] == 15
                         else FEATURE_SETS["ratios"])
    feature_names = list(feature_names)
    mean, std = normalization_stats(instances[:n_train], feature_names)
    norm = [normalize_instance(inst, mean, std) for inst in instances]
    return DatasetSplit(norm[:n_train], norm[n_train:n_train + n_val], norm[n_train + n_val:],
                        mean, std, feature_names)


# --- instance cache -------------------------------------------------------

def save_instances(path, instances: Sequence[InstanceWindow], catalog: SectorCatalog,
                   meta: dict) -> None:
    """Write a JSON-lines cache; the first line is a header with magic and version."""
    header = {"magic": CACHE_MAGIC, "version": CACHE_VERSION, **meta,
              "sectors": catalog.to_dict(), "n_instances": len(instances)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inst in instances:
            rec = {
                "date": inst.prediction_date.isoformat(),
                "stocks": list(inst.stock_ids),
                "features": inst.features.tolist(),
                "target_return": inst.target_return.tolist(),
                "target_move": inst.target_move.tolist(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_instances(path):
    """Inverse of :func:`save_instances`; returns ``(instances, catalog, header)``."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError:
            raise ParseError(path, 1, "cache header is not JSON") from None
        if header.get("magic") != CACHE_MAGIC:
            raise ParseError(path, 1, "not an instance cache")
        if header.get("version") != CACHE_VERSION:
            raise ParseError(path, 1, f"unsupported cache version {header.get('version')}")
        instances = []
        for line, raw in enumerate(fh, start=2):
            rec = json.loads(raw)
            instances.append(InstanceWindow(
                dt.date.fromisoformat(rec["date"]), tuple(rec["stocks"]),
                np.array(rec["features"], dtype=np.float64),
                np.array(rec["target_return"], dtype=np.float64),
                np.array(rec["target_move"], dtype=np.int64)))
    if len(instances) != header.get("n_instances"):
        raise ParseError(path, len(instances) + 1, "cache is truncated")
    return instances, SectorCatalog(header["sectors"]), header
