import csv
import datetime as dt

import numpy as np
import pytest

from fingat.market import PRICE_HEADER, SECTOR_HEADER, build_instances, load_prices, load_sectors, \
    split_chronological
from fingat.synth import SynthConfig, business_days, write_market


def write_prices(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_HEADER)
        w.writerows(rows)
    return path


def write_sectors(path, mapping):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECTOR_HEADER)
        w.writerows(sorted(mapping.items()))
    return path


def random_walk_rows(stocks, n_days, seed=0, skip=()):
    """Price rows for ``stocks`` over ``n_days`` business days; ``skip`` holds (stock, day index)."""
    rng = np.random.default_rng(seed)
    dates = business_days(dt.date(2021, 1, 4), n_days)
    rows = []
    for s in stocks:
        p = 50.0
        for k, d in enumerate(dates):
            p *= 1.0 + 0.01 * rng.standard_normal()
            if (s, k) in skip:
                continue
            o = p * (1 + 0.002 * rng.standard_normal())
            hi, lo = max(o, p) * 1.01, min(o, p) * 0.99
            rows.append([s, d.isoformat(), f"{o:.6f}", f"{hi:.6f}", f"{lo:.6f}", f"{p:.6f}", f"{p:.6f}", 1000])
    return rows, dates


@pytest.fixture(scope="session")
def synth_market(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    paths = write_market(out, SynthConfig())
    bars = load_prices(paths["prices"])
    catalog = load_sectors(paths["sectors"])
    instances = build_instances(bars, catalog)
    return {"paths": paths, "bars": bars, "catalog": catalog, "instances": instances,
            "split": split_chronological(instances)}


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
