"""The hierarchical stock/sector model and its variants.

Per prediction day the forward pass runs:

1. a week encoder (GRU + temporal attention) over each week's daily features,
   giving a short-term embedding per stock and week;
2. graph attention inside each sector (complete graph, self-loops) per week;
3. two long-term attentive GRUs over the weekly sequences, one fed with the
   short-term embeddings and one with the graph embeddings;
4. element-wise max pooling of member embeddings into sector embeddings;
5. graph attention across sectors;
6. a ReLU fusion layer over the concatenated streams and two linear heads
   (return, and a sigmoid movement head).

Variants switch streams on and off; see :data:`VARIANTS`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (GatParams, GruParams, TemporalAttentionParams, block_graph,
                     dense, gat_forward, gru_forward, init_uniform,
                     temporal_attention)
from .market import DataError, InstanceWindow, SectorCatalog

logger = logging.getLogger(__name__)

GRAPH_VARIANTS = ("full", "nt", "no_intra", "no_inter", "no_mtl", "mse")
BASELINES = ("mlp", "gru", "gru_att")
VARIANTS = GRAPH_VARIANTS + BASELINES


@dataclass
class ModelConfig:
    hidden_dim: int = 16
    weeks: int = 3
    days_per_week: int = 5
    variant: str = "full"
    feature_dim: int = 15
    seed: int = 0
    baseline_hidden: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if min(self.hidden_dim, self.weeks, self.days_per_week, self.feature_dim) < 1:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PredictionBatch:
    prediction_date: object
    stock_ids: tuple
    pred_return: np.ndarray
    pred_move: np.ndarray
    # name -> (row labels, column labels, weights); each row sums to one
    temporal: dict = field(default_factory=dict)
    intra: dict = field(default_factory=dict)
    inter: dict = field(default_factory=dict)


@dataclass
class ModelOutput:
    """Row-stacked outputs of :meth:`FinGAT.forward_days`."""

    pred_return: Tensor
    move_logit: Optional[Tensor]   # None when the variant has no second head
    aux_return: Optional[Tensor]   # regression head under variant "mse"
    batches: list
    layout: "_Layout"

    @property
    def batch(self) -> PredictionBatch:
        return self.batches[0]


class FinGAT:
    """Parameter container plus forward pass for every variant."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        H, F, v = config.hidden_dim, config.feature_dim, config.variant
        self.week_gru = self.week_att = self.intra_gat = self.inter_gat = None
        self.long_a_gru = self.long_a_att = self.long_g_gru = self.long_g_att = None
        self.w_f = None
        self.mlp = {}

        if v in GRAPH_VARIANTS:
            self.week_gru = GruParams.init(rng, F, H)
            self.week_att = TemporalAttentionParams.init(rng, H)
            if v != "no_intra":
                self.intra_gat = GatParams.init(rng, H, H)
                self.long_g_gru = GruParams.init(rng, H, H)
                self.long_g_att = TemporalAttentionParams.init(rng, H)
            self.long_a_gru = GruParams.init(rng, H, H)
            self.long_a_att = TemporalAttentionParams.init(rng, H)
            if v not in ("nt", "no_inter"):
                self.inter_gat = GatParams.init(rng, H, H)
            n_streams = 2 if v in ("nt", "no_intra", "no_inter") else 3
            self.w_f = init_uniform(rng, (n_streams * H, H), n_streams * H, "w_f")
            rep = H
        else:
            B = config.baseline_hidden
            if v == "mlp":
                span = config.weeks * config.days_per_week * F
                self.mlp = {
                    "w1": init_uniform(rng, (span, B), span, "w1"),
                    "b1": init_uniform(rng, (B,), span, "b1"),
                    "w2": init_uniform(rng, (B, 8), B, "w2"),
                    "b2": init_uniform(rng, (8,), B, "b2"),
                }
                rep = 8
            else:
                self.week_gru = GruParams.init(rng, F, B)
                if v == "gru_att":
                    self.week_att = TemporalAttentionParams.init(rng, B)
                rep = B
        self.e1 = init_uniform(rng, (rep,), rep, "e1")
        self.b1 = Tensor(np.zeros(1), requires_grad=True, name="b1")
        self.e2 = self.b2 = None
        if v != "no_mtl":
            self.e2 = init_uniform(rng, (rep,), rep, "e2")
            self.b2 = Tensor(np.zeros(1), requires_grad=True, name="b2")

    # --- parameter bookkeeping -------------------------------------------

    def named_parameters(self) -> list:
        out = []
        for prefix in ("week_gru", "week_att", "intra_gat", "long_a_gru", "long_a_att",
                       "long_g_gru", "long_g_att", "inter_gat"):
            group = getattr(self, prefix)
            if group is not None:
                out.extend(group.named(prefix + "."))
        for k, t in self.mlp.items():
            out.append(("mlp." + k, t))
        if self.w_f is not None:
            out.append(("fusion.w_f", self.w_f))
        out.append(("head_return.e", self.e1))
        out.append(("head_return.b", self.b1))
        if self.e2 is not None:
            out.append(("head_move.e", self.e2))
            out.append(("head_move.b", self.b2))
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def regularized(self) -> list:
        """Weight matrices and attention vectors; biases are left out of the L2 term."""
        return [t for name, t in self.named_parameters() if not is_bias_name(name)]

    def l2_penalty(self) -> Tensor:
        return ad.tsum(ad.concat([ad.reshape(ad.square(t), (-1,)) for t in self.regularized()]))

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # --- forward ---------------------------------------------------------

    def forward(self, instance: InstanceWindow, catalog: Optional[SectorCatalog] = None,
                capture: bool = True) -> ModelOutput:
        return self.forward_days([instance], catalog, capture)

    __call__ = forward

    def forward_days(self, instances: Sequence[InstanceWindow],
                     catalog: Optional[SectorCatalog] = None, capture: bool = False) -> ModelOutput:
        """Evaluate several prediction days in one graph.

        Stocks of all days are stacked as rows; graph edges, pooling groups and
        attention never cross day boundaries, so the result equals running
        each day on its own.
        """
        v = self.config.variant
        if not instances:
            raise ValueError("no instances to evaluate")
        if catalog is None and v not in ("nt",) + BASELINES:
            raise DataError(f"variant {v} needs a sector catalog")
        t, d, F = self.config.weeks, self.config.days_per_week, self.config.feature_dim
        for inst in instances:
            if catalog is not None:
                for s in inst.stock_ids:
                    if s not in catalog.sector_of:
                        raise DataError(f"stock {s} is not in the sector catalog")
            if inst.features.shape != (len(inst.stock_ids), t * d, F):
                raise ad.ShapeError(f"instance {inst.prediction_date} features {inst.features.shape} "
                                    f"do not match ({len(inst.stock_ids)}, {t * d}, {F})")
        layout = _Layout(instances, catalog if v not in ("nt",) + BASELINES else None)
        feats = np.concatenate([np.asarray(inst.features, dtype=np.float64) for inst in instances])
        batches = [PredictionBatch(inst.prediction_date, tuple(inst.stock_ids), None, None)
                   for inst in instances]
        if v in BASELINES:
            rep = self._baseline(feats, layout, batches if capture else None)
        else:
            rep = self._hierarchy(feats, layout, batches if capture else None)

        with _stage("head_return"):
            pred_return = rep @ self.e1 + self.b1
        move_logit = aux = None
        if self.e2 is not None:
            with _stage("head_move"):
                move_logit = rep @ self.e2 + self.b2
            if v == "mse":
                aux = move_logit
        logit = move_logit if move_logit is not None else pred_return
        prob = ad.sigmoid(Tensor._wrap(logit.data, False)).data
        for k, b in enumerate(batches):
            rows = layout.rows(k)
            b.pred_return = pred_return.data[rows].copy()
            b.pred_move = prob[rows].copy()
        return ModelOutput(pred_return, move_logit, aux, batches, layout)

    def _week_inputs(self, feats: np.ndarray) -> list:
        """(N, t*d, F) -> d step tensors of shape (t*N, F), week-major rows."""
        N = feats.shape[0]
        t, d, F = self.config.weeks, self.config.days_per_week, self.config.feature_dim
        blocks = feats.reshape(N, t, d, F).transpose(1, 0, 2, 3).reshape(t * N, d, F)
        return [Tensor._wrap(np.ascontiguousarray(blocks[:, j, :]), False) for j in range(d)]

    def _hierarchy(self, feats, layout: "_Layout", batches) -> Tensor:
        v = self.config.variant
        N = layout.n_rows
        t, d = self.config.weeks, self.config.days_per_week

        with _stage("week_encoder"):
            states, _ = gru_forward(self.week_gru, self._week_inputs(feats))
            a_all, alpha = temporal_attention(self.week_att, states)
        a_weeks = [ad.index(a_all, slice(w * N, (w + 1) * N)) for w in range(t)]
        if batches is not None:
            days = [f"day{j + 1}" for j in range(d)]
            for w in range(t):
                block = alpha.data[w * N:(w + 1) * N]
                for k, b in enumerate(batches):
                    b.temporal[f"week{w + 1}"] = (list(b.stock_ids), days, block[layout.rows(k)])

        g_weeks = None
        if self.intra_gat is not None:
            # one graph over all weeks: cliques per (week, day, sector) or (week, day)
            group = layout.day_of_row if v == "nt" else layout.sector_of_row
            n_groups = group.max() + 1
            labels = np.concatenate([group + w * n_groups for w in range(t)])
            graph = block_graph(labels)
            with _stage("intra_gat"):
                g_all, beta = gat_forward(self.intra_gat, graph, a_all)
            g_weeks = [ad.index(g_all, slice(w * N, (w + 1) * N)) for w in range(t)]
            if batches is not None:
                self._capture_intra(batches, layout, graph.to_dense(beta.data), N)

        week_labels = [f"week{w + 1}" for w in range(t)]
        with _stage("long_term_a"):
            states, _ = gru_forward(self.long_a_gru, a_weeks)
            tau_a, alpha_a = temporal_attention(self.long_a_att, states)
        streams = [tau_a]
        tau_g = None
        if g_weeks is not None:
            with _stage("long_term_g"):
                states, _ = gru_forward(self.long_g_gru, g_weeks)
                tau_g, alpha_g = temporal_attention(self.long_g_att, states)
            streams.insert(0, tau_g)
        if batches is not None:
            for k, b in enumerate(batches):
                rows = layout.rows(k)
                b.temporal["long_a"] = (list(b.stock_ids), week_labels, alpha_a.data[rows])
                if tau_g is not None:
                    b.temporal["long_g"] = (list(b.stock_ids), week_labels, alpha_g.data[rows])

        if self.inter_gat is not None:
            pooled_from = tau_g if tau_g is not None else tau_a
            with _stage("sector_pooling"):
                z = ad.segment_max(pooled_from, layout.sector_of_row, layout.n_sector_nodes)
            graph = block_graph(layout.day_of_sector)
            with _stage("inter_gat"):
                tau_sec, beta_inter = gat_forward(self.inter_gat, graph, z)
            streams.append(ad.take_rows(tau_sec, layout.sector_of_row))
            if batches is not None:
                dense_beta = graph.to_dense(beta_inter.data)
                for k, b in enumerate(batches):
                    idx = layout.sector_nodes(k)
                    names = layout.sector_names[k]
                    b.inter["sectors"] = (names, names, dense_beta[np.ix_(idx, idx)])

        with _stage("fusion"):
            return dense(self.w_f, ad.concat(streams, axis=1), activation="relu")

    def _capture_intra(self, batches, layout, dense_beta, N):
        for w in range(self.config.weeks):
            off = w * N
            for k, b in enumerate(batches):
                rows = np.arange(*layout.bounds(k))
                if self.config.variant == "nt":
                    ids = list(b.stock_ids)
                    sub = dense_beta[np.ix_(rows + off, rows + off)]
                    b.intra[f"week{w + 1}/all"] = (ids, ids, sub)
                    continue
                for node, name in zip(layout.sector_nodes(k), layout.sector_names[k]):
                    members = rows[layout.sector_of_row[rows] == node]
                    ids = [layout.stock_of_row[i] for i in members]
                    sub = dense_beta[np.ix_(members + off, members + off)]
                    b.intra[f"week{w + 1}/{name}"] = (ids, ids, sub)

    def _baseline(self, feats, layout, batches) -> Tensor:
        v = self.config.variant
        N = feats.shape[0]
        with _stage(v):
            if v == "mlp":
                x = Tensor._wrap(feats.reshape(N, -1), False)
                h = dense(self.mlp["w1"], x, self.mlp["b1"], "relu")
                return dense(self.mlp["w2"], h, self.mlp["b2"], "relu")
            steps = [Tensor._wrap(np.ascontiguousarray(feats[:, j, :]), False)
                     for j in range(feats.shape[1])]
            states, last = gru_forward(self.week_gru, steps)
            if v == "gru":
                return last
            agg, alpha = temporal_attention(self.week_att, states)
            if batches is not None:
                labels = [f"day{j + 1}" for j in range(len(steps))]
                for k, b in enumerate(batches):
                    b.temporal["days"] = (list(b.stock_ids), labels, alpha.data[layout.rows(k)])
            return agg


class _Layout:
    """Row bookkeeping for a stack of prediction days."""

    def __init__(self, instances, catalog: Optional[SectorCatalog]):
        sizes = [len(inst.stock_ids) for inst in instances]
        self.offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.n_rows = int(self.offsets[-1])
        self.day_of_row = np.repeat(np.arange(len(instances)), sizes)
        self.stock_of_row = [s for inst in instances for s in inst.stock_ids]
        self.sector_of_row = self.day_of_row.copy()
        self.sector_names = []
        self._sector_start = [0]
        if catalog is not None:
            seg = []
            base = 0
            for inst in instances:
                names = sorted({catalog.sector_of[s] for s in inst.stock_ids})
                pos = {c: i for i, c in enumerate(names)}
                seg.extend(base + pos[catalog.sector_of[s]] for s in inst.stock_ids)
                self.sector_names.append(names)
                base += len(names)
                self._sector_start.append(base)
            self.sector_of_row = np.array(seg, dtype=np.intp)
        self.n_sector_nodes = self._sector_start[-1]
        self.day_of_sector = np.repeat(np.arange(len(self.sector_names)),
                                       [len(n) for n in self.sector_names]).astype(np.intp)

    def bounds(self, k: int) -> tuple:
        return int(self.offsets[k]), int(self.offsets[k + 1])

    def rows(self, k: int) -> slice:
        return slice(*self.bounds(k))

    def sector_nodes(self, k: int) -> np.ndarray:
        return np.arange(self._sector_start[k], self._sector_start[k + 1])


def is_bias_name(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "b" or leaf.startswith("b_") or (name.startswith("mlp.") and leaf.startswith("b"))


class _stage:
    """Re-raise numeric failures with the name of the layer that produced them."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, ad.NumericError) and not str(exc).startswith("["):
            raise ad.NumericError(f"[{self.name}] {exc}") from exc
        return False


def forward(model: FinGAT, instance: InstanceWindow, catalog: Optional[SectorCatalog] = None) -> PredictionBatch:
    return model.forward(instance, catalog).batch


def forward_nt(model: FinGAT, instance: InstanceWindow) -> PredictionBatch:
    if model.config.variant != "nt":
        raise ValueError("forward_nt needs a model built with variant='nt'")
    return model.forward(instance, None).batch


ATTENTION_HEADER = ["date", "level", "context", "from", "to", "weight"]


def capture_attention(batch: PredictionBatch) -> list:
    """Flatten captured attention into ``(date, level, context, from, to, weight)`` rows.

    Temporal rows use ``context = "<stream>/<stock>"`` with ``from`` the stock
    and ``to`` the day or week attended to. Graph rows have ``from`` the node
    whose neighbourhood is normalised and ``to`` the neighbour.
    """
    date = str(batch.prediction_date)
    rows = []
    for stream, (row_ids, col_ids, w) in batch.temporal.items():
        for i, r in enumerate(row_ids):
            for j, c in enumerate(col_ids):
                rows.append((date, "temporal", f"{stream}/{r}", r, c, float(w[i, j])))
    for level, table in (("intra", batch.intra), ("inter", batch.inter)):
        for context, (row_ids, col_ids, w) in table.items():
            for i, r in enumerate(row_ids):
                for j, c in enumerate(col_ids):
                    rows.append((date, level, context, r, c, float(w[i, j])))
    return rows


def attention_summary(rows) -> dict:
    """Mean and (population) variance of weights per level."""
    by_level = {}
    for _, level, _, _, _, w in rows:
        by_level.setdefault(level, []).append(w)
    return {level: {"count": len(ws), "mean": float(np.mean(ws)), "variance": float(np.var(ws))}
            for level, ws in sorted(by_level.items())}
