"""Top-K ranking metrics, movement accuracy and a Monte-Carlo random baseline.

MRR@K here is the mean, over the K stocks ranked highest by predicted
return, of ``1 / true_rank``. That differs from the usual "reciprocal rank of
the first relevant item": a perfect ranking scores ``H_K / K``, not 1.
"""

from __future__ import annotations

import csv
from fractions import Fraction
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import no_grad

logger = logging.getLogger(__name__)

DETAIL_HEADER = ["date", "stock_id", "pred_return", "true_return", "pred_move", "true_move",
                 "pred_rank", "true_rank"]


class MetricError(ValueError):
    pass


def rank_order(values: Sequence[float], ids: Sequence[str]) -> np.ndarray:
    """Indices sorted by descending value, ties broken by ascending id."""
    values = np.asarray(values, dtype=np.float64)
    return np.array(sorted(range(len(ids)), key=lambda i: (-values[i], ids[i])), dtype=np.intp)


@dataclass
class RankedList:
    prediction_date: object
    stock_ids: tuple          # ordered by predicted return, best first
    pred_return: np.ndarray   # aligned with stock_ids
    true_return: np.ndarray
    true_rank: np.ndarray     # 1 = highest true return

    @property
    def n(self) -> int:
        return len(self.stock_ids)


def build_ranked_list(date, stock_ids: Sequence[str], pred_return, true_return) -> RankedList:
    stock_ids = list(stock_ids)
    pred_return = np.asarray(pred_return, dtype=np.float64)
    true_return = np.asarray(true_return, dtype=np.float64)
    if not (len(stock_ids) == len(pred_return) == len(true_return)):
        raise MetricError("stock ids, predictions and targets must align")
    if not stock_ids:
        raise MetricError("empty cross-section")
    true_rank = np.empty(len(stock_ids), dtype=np.int64)
    true_rank[rank_order(true_return, stock_ids)] = np.arange(1, len(stock_ids) + 1)
    order = rank_order(pred_return, stock_ids)
    return RankedList(date, tuple(stock_ids[i] for i in order), pred_return[order],
                      true_return[order], true_rank[order])


def _check_k(ranked: RankedList, k: int) -> None:
    if not 1 <= k <= ranked.n:
        raise MetricError(f"K={k} outside [1, {ranked.n}]")


def mrr_at_k(ranked: RankedList, k: int) -> float:
    _check_k(ranked, k)
    # exact rational sum so the value does not depend on summation order
    return float(sum(Fraction(1, int(r)) for r in ranked.true_rank[:k]) / k)


def precision_at_k(ranked: RankedList, k: int) -> float:
    _check_k(ranked, k)
    return float(np.count_nonzero(ranked.true_rank[:k] <= k) / k)


def accuracy(pred_moves, true_moves, threshold: float = 0.5) -> float:
    """Share of correct up/down calls; probabilities above ``threshold`` mean "up"."""
    pred = np.asarray(pred_moves, dtype=np.float64).reshape(-1)
    true = np.asarray(true_moves).reshape(-1)
    if pred.size == 0 or pred.size != true.size:
        raise MetricError("accuracy needs aligned, non-empty inputs")
    return float(np.mean((pred > threshold).astype(int) == true.astype(int)))


@dataclass
class DayPrediction:
    prediction_date: object
    stock_ids: tuple
    pred_return: np.ndarray
    pred_move: np.ndarray
    true_return: np.ndarray
    true_move: np.ndarray


@dataclass
class EvalReport:
    k_list: list
    mrr: dict
    precision: dict
    acc: float
    n_days: int
    seeds: list = field(default_factory=list)
    days: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = {str(k): {"mrr": self.mrr[k], "precision": self.precision[k]} for k in self.k_list}
        out.update({"acc": self.acc, "n_days": self.n_days, "seeds": list(self.seeds)})
        return out


def evaluate_predictions(days: Sequence[DayPrediction], k_list: Iterable[int]) -> EvalReport:
    """Average per-day MRR@K / Precision@K; ACC is pooled over every stock-day."""
    days = list(days)
    k_list = [int(k) for k in k_list]
    if not days:
        raise MetricError("no days to evaluate")
    mrr = {k: [] for k in k_list}
    prec = {k: [] for k in k_list}
    for day in days:
        ranked = build_ranked_list(day.prediction_date, day.stock_ids, day.pred_return, day.true_return)
        for k in k_list:
            mrr[k].append(mrr_at_k(ranked, k))
            prec[k].append(precision_at_k(ranked, k))
    acc = accuracy(np.concatenate([d.pred_move for d in days]),
                   np.concatenate([d.true_move for d in days]))
    return EvalReport(k_list, {k: float(np.mean(v)) for k, v in mrr.items()},
                      {k: float(np.mean(v)) for k, v in prec.items()}, acc, len(days), days=days)


def chunk_days(instances, max_rows: int) -> list:
    """Split consecutive days into groups of at most ``max_rows`` stacked stocks."""
    groups, cur, rows = [], [], 0
    for inst in instances:
        if cur and rows + inst.n_stocks > max_rows:
            groups.append(cur)
            cur, rows = [], 0
        cur.append(inst)
        rows += inst.n_stocks
    if cur:
        groups.append(cur)
    return groups


def predict_days(model, instances, catalog, max_rows: int = 4096) -> list:
    """Run ``model`` over ``instances`` without recording gradients."""
    out = []
    with no_grad():
        for group in chunk_days(instances, max_rows):
            res = model.forward_days(group, catalog)
            for src, b in zip(group, res.batches):
                out.append(DayPrediction(src.prediction_date, tuple(src.stock_ids), b.pred_return,
                                         b.pred_move, src.target_return, src.target_move))
    return out


def oracle_days(instances) -> list:
    """Predictions equal to the realised returns (harness self-test)."""
    return [DayPrediction(i.prediction_date, tuple(i.stock_ids), i.target_return.copy(),
                          i.target_move.astype(np.float64), i.target_return, i.target_move)
            for i in instances]


def evaluate(model, instances, catalog, k_list=(5, 10, 20)) -> EvalReport:
    instances = list(instances)
    if not instances:
        raise MetricError("empty test set")
    return evaluate_predictions(predict_days(model, instances, catalog), k_list)


def random_baseline(n: int, k: int, trials: int = 100_000, seed: int = 0,
                    chunk: int = 10_000) -> dict:
    """Monte-Carlo MRR@K and Precision@K of a uniformly random ranking of ``n`` stocks."""
    if trials < 1:
        raise MetricError("trials must be >= 1")
    if not 1 <= k <= n:
        raise MetricError(f"K={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    mrr_sum = mrr_sq = prec_sum = prec_sq = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        # stock i has true rank i + 1; the predicted top K is a random K-subset
        picks = np.argsort(rng.random((m, n)), axis=1)[:, :k] + 1
        mrr = (1.0 / picks).sum(axis=1) / k
        prec = (picks <= k).sum(axis=1) / k
        mrr_sum += mrr.sum()
        mrr_sq += (mrr * mrr).sum()
        prec_sum += prec.sum()
        prec_sq += (prec * prec).sum()
        done += m

    def stats(s, sq):
        mean = s / trials
        var = max(sq / trials - mean * mean, 0.0)
        return mean, math.sqrt(var / trials)

    mrr_mean, mrr_se = stats(mrr_sum, mrr_sq)
    prec_mean, prec_se = stats(prec_sum, prec_sq)
    return {"n": n, "k": k, "trials": trials, "mrr": mrr_mean, "mrr_se": mrr_se,
            "precision": prec_mean, "precision_se": prec_se}


def write_detail_csv(path, days: Sequence[DayPrediction]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETAIL_HEADER)
        for day in days:
            ids = list(day.stock_ids)
            pred_rank = np.empty(len(ids), dtype=np.int64)
            pred_rank[rank_order(day.pred_return, ids)] = np.arange(1, len(ids) + 1)
            true_rank = np.empty(len(ids), dtype=np.int64)
            true_rank[rank_order(day.true_return, ids)] = np.arange(1, len(ids) + 1)
            for i in rank_order(day.pred_return, ids):
                w.writerow([str(day.prediction_date), ids[i], repr(float(day.pred_return[i])),
                            repr(float(day.true_return[i])), repr(float(day.pred_move[i])),
                            int(day.true_move[i]), int(pred_rank[i]), int(true_rank[i])])


def read_detail_csv(path) -> list:
    """Rebuild :class:`DayPrediction` records from a detail CSV."""
    by_date = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETAIL_HEADER:
            raise MetricError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            by_date.setdefault(row["date"], []).append(row)
    days = []
    for date, rows in by_date.items():
        days.append(DayPrediction(
            date, tuple(r["stock_id"] for r in rows),
            np.array([float(r["pred_return"]) for r in rows]),
            np.array([float(r["pred_move"]) for r in rows]),
            np.array([float(r["true_return"]) for r in rows]),
            np.array([int(r["true_move"]) for r in rows])))
    return days
