"""Central-difference checks of every layer and of the whole training objective.

Each check builds a tiny random problem from a seed and compares tape
gradients with central differences (step 1e-3). A check passes when the
maximum relative error stays below 1e-4.
"""

from __future__ import annotations

import datetime as dt
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .layers import (GatParams, GruParams, TemporalAttentionParams, block_graph, complete_graph, dense,
                     gat_forward, gru_forward, temporal_attention)
from .market import InstanceWindow, SectorCatalog
from .model import VARIANTS, FinGAT, ModelConfig
from .training import objective_terms

STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class CheckRow:
    name: str
    max_rel_error: float
    n_checked: int
    n_skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection keeps every output coordinate in play
    w = rng.standard_normal(out.shape)
    return ad.tsum(out * w)


def _op_checks(rng) -> dict:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    x = _leaf(rng, 5)
    pos = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
    xs = [_leaf(rng, 4) for _ in range(3)]
    seg = np.array([0, 0, 1, 2, 2, 2])
    y = _leaf(rng, 6, 2)
    w = {k: rng.standard_normal(s) for k, s in
         [("mm", (3, 2)), ("v5", (5,)), ("cat", (12,)), ("v4", (4,)), ("seg", (3, 2)), ("sm6", (6, 2))]}
    return {
        "matmul": (lambda: ad.tsum((a @ b) * w["mm"]), [a, b]),
        "tanh": (lambda: ad.tsum(ad.tanh(x) * w["v5"]), [x]),
        "sigmoid": (lambda: ad.tsum(ad.sigmoid(x) * w["v5"]), [x]),
        "relu": (lambda: ad.tsum(ad.relu(x) * w["v5"]), [x]),
        "leaky_relu": (lambda: ad.tsum(ad.leaky_relu(x, 0.2) * w["v5"]), [x]),
        "exp": (lambda: ad.tsum(ad.exp(x) * w["v5"]), [x]),
        "log": (lambda: ad.tsum(ad.log(pos) * w["v5"]), [pos]),
        "softmax": (lambda: ad.tsum(ad.softmax(x) * w["v5"]), [x]),
        "concat": (lambda: ad.tsum(ad.concat(xs) * w["cat"]), xs),
        "reduce_max_elementwise": (lambda: ad.tsum(ad.reduce_max_elementwise(xs) * w["v4"]), xs),
        "segment_sum": (lambda: ad.tsum(ad.segment_sum(y, seg, 3) * w["seg"]), [y]),
        "segment_softmax": (lambda: ad.tsum(ad.segment_softmax(ad.index(y, (slice(None), 0)), seg, 3)
                                            * w["sm6"][:, 0]), [y]),
        "segment_max": (lambda: ad.tsum(ad.segment_max(y, seg, 3) * w["seg"]), [y]),
    }


def _layer_checks(rng) -> dict:
    n, F, H = 4, 3, 3
    gru = GruParams.init(rng, F, H)
    seq = [Tensor(rng.standard_normal((n, F))) for _ in range(3)]
    att = TemporalAttentionParams.init(rng, H)
    states = [_leaf(rng, n, H) for _ in range(3)]
    gat = GatParams.init(rng, H, H)
    nodes = _leaf(rng, 5, H)
    blocks = block_graph([0, 0, 1, 1, 1])
    W, bias, xin = _leaf(rng, H, 2), _leaf(rng, 2), _leaf(rng, n, H)
    out_w = {k: rng.standard_normal(s) for k, s in [("gru", (n, H)), ("att", (n, H)),
                                                     ("gat", (5, H)), ("dense", (n, 2))]}

    def gru_loss():
        st, last = gru_forward(gru, seq)
        return ad.tsum(last * out_w["gru"]) + ad.tsum(st[0] * out_w["gru"])

    return {
        "gru": (gru_loss, [t for _, t in gru.named()]),
        "temporal_attention": (lambda: ad.tsum(temporal_attention(att, states)[0] * out_w["att"]),
                               [att.w0, att.score] + states),
        "gat_complete": (lambda: ad.tsum(gat_forward(gat, complete_graph(5), nodes)[0] * out_w["gat"]),
                         [gat.w1, gat.w2, gat.r, nodes]),
        "gat_blocks": (lambda: ad.tsum(gat_forward(gat, blocks, nodes)[0] * out_w["gat"]),
                       [gat.w1, gat.w2, gat.r, nodes]),
        "dense": (lambda: ad.tsum(dense(W, xin, bias, "tanh") * out_w["dense"]), [W, bias, xin]),
    }


def tiny_problem(rng, n_stocks: int = 5, weeks: int = 2, days_per_week: int = 2, features: int = 3,
                 n_days: int = 2):
    stocks = [f"S{i}" for i in range(n_stocks)]
    catalog = SectorCatalog({s: f"sector{i % 2}" for i, s in enumerate(stocks)})
    days = []
    for k in range(n_days):
        feats = rng.standard_normal((n_stocks, weeks * days_per_week, features))
        days.append(InstanceWindow(dt.date(2021, 1, 4) + dt.timedelta(days=k), tuple(stocks), feats,
                                   0.02 * rng.standard_normal(n_stocks)))
    return days, catalog


def _model_check(variant: str, seed: int):
    rng = np.random.default_rng(seed)
    days, catalog = tiny_problem(rng)
    cfg = ModelConfig(hidden_dim=3, weeks=2, days_per_week=2, variant=variant, feature_dim=3,
                      seed=seed, baseline_hidden=3)
    model = FinGAT(cfg)
    delta, lam = 0.3, 1e-2  # larger than the defaults so every term moves the check

    def loss():
        out = model.forward_days(days, catalog)
        task, _, _ = objective_terms(model, out, days, delta)
        return task + model.l2_penalty() * lam

    return loss, model.parameters()


def all_checks(seed: int = 0) -> dict:
    """Name -> ``(loss_fn, params)``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    checks = {f"op/{k}": v for k, v in _op_checks(rng).items()}
    checks.update({f"layer/{k}": v for k, v in _layer_checks(rng).items()})
    for i, v in enumerate(VARIANTS):
        checks[f"model/{v}"] = _model_check(v, seed + 1 + i)
    return checks


def run_gradcheck(seed: int = 0, only: Callable[[str], bool] = lambda name: True) -> list:
    rows = []
    for name, (fn, params) in all_checks(seed).items():
        if not only(name):
            continue
        t0 = time.perf_counter()
        res = check_gradients(fn, params, step=STEP)
        rows.append(CheckRow(name, res.max_rel_error, res.n_checked, res.n_skipped,
                             time.perf_counter() - t0))
    return rows


def format_table(rows) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max_rel_err':>11}  {'checked':>7}  {'skipped':>7}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:11.3e}  {r.n_checked:7d}  {r.n_skipped:7d}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
