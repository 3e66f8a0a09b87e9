"""Seeded synthetic market with learnable momentum structure.

Each stock's daily return mixes its own trailing five-day mean return, a
slowly drifting sector trend shared by its sector mates, and idiosyncratic
noise. Both signals are visible in the trailing price window, so a model
that reads recent history can rank tomorrow's returns better than chance.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .market import PRICE_HEADER, SECTOR_HEADER


@dataclass
class SynthConfig:
    n_stocks: int = 12
    n_sectors: int = 3
    weeks: int = 40
    days_per_week: int = 5
    momentum: float = 0.5
    sector_persistence: float = 0.9
    sector_scale: float = 0.004
    noise_scale: float = 0.01
    seed: int = 0
    start: str = "2020-01-06"

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_sectors < 1 or self.n_sectors > self.n_stocks:
            raise ValueError("need 1 <= n_sectors <= n_stocks")
        if not 0 <= self.momentum < 1 or not 0 <= self.sector_persistence < 1:
            raise ValueError("momentum and sector_persistence must lie in [0, 1)")

    @property
    def n_days(self) -> int:
        return self.weeks * self.days_per_week


def business_days(start: dt.date, n: int) -> list:
    out, day = [], start
    while len(out) < n:
        if day.weekday() < 5:
            out.append(day)
        day += dt.timedelta(days=1)
    return out


def simulate(cfg: SynthConfig) -> tuple:
    """Return ``(dates, stock_ids, sector_of, bars)``; ``bars[s]`` is a list of OHLCV tuples."""
    rng = np.random.default_rng(cfg.seed)
    width = len(str(cfg.n_stocks - 1))
    stocks = [f"S{i:0{width}d}" for i in range(cfg.n_stocks)]
    sectors = [f"sector{c}" for c in range(cfg.n_sectors)]
    sector_idx = np.arange(cfg.n_stocks) % cfg.n_sectors
    dates = business_days(dt.date.fromisoformat(cfg.start), cfg.n_days)

    T, N = cfg.n_days, cfg.n_stocks
    returns = np.zeros((T, N))
    trend = np.zeros(cfg.n_sectors)
    for t in range(1, T):
        trend = cfg.sector_persistence * trend + cfg.sector_scale * rng.standard_normal(cfg.n_sectors)
        recent = returns[max(0, t - 5):t].mean(axis=0)
        returns[t] = (cfg.momentum * recent + trend[sector_idx]
                      + cfg.noise_scale * rng.standard_normal(N))
    close = 20.0 * rng.uniform(1.0, 5.0, size=N) * np.cumprod(1.0 + returns, axis=0)

    gap = 1.0 + 0.002 * rng.standard_normal((T, N))
    open_ = np.vstack([close[:1] * gap[:1], close[:-1] * gap[1:]])
    wick_up = 1.0 + np.abs(0.004 * rng.standard_normal((T, N)))
    wick_dn = 1.0 - np.abs(0.004 * rng.standard_normal((T, N)))
    high = np.maximum(open_, close) * wick_up
    low = np.minimum(open_, close) * wick_dn
    volume = rng.integers(10_000, 1_000_000, size=(T, N))

    bars = {s: [(open_[t, i], high[t, i], low[t, i], close[t, i], close[t, i], int(volume[t, i]))
                for t in range(T)] for i, s in enumerate(stocks)}
    sector_of = {s: sectors[sector_idx[i]] for i, s in enumerate(stocks)}
    return dates, stocks, sector_of, bars


def write_market(out_dir, cfg: SynthConfig) -> dict:
    """Write ``prices.csv``, ``sectors.csv`` and ``synth.json``; returns the file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dates, stocks, sector_of, bars = simulate(cfg)
    paths = {"prices": out / "prices.csv", "sectors": out / "sectors.csv", "config": out / "synth.json"}
    with paths["prices"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_HEADER)
        for s in stocks:
            for d, (o, h, lo, c, adj, v) in zip(dates, bars[s]):
                w.writerow([s, d.isoformat(), f"{o:.6f}", f"{h:.6f}", f"{lo:.6f}", f"{c:.6f}",
                            f"{adj:.6f}", v])
    with paths["sectors"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECTOR_HEADER)
        for s in stocks:
            w.writerow([s, sector_of[s]])
    paths["config"].write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}
