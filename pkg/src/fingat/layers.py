"""GRU, temporal attention, graph attention and dense layers.

Embeddings are row vectors: a batch of ``n`` items is an ``(n, dim)`` tensor
and weights multiply from the right. Every function here is a thin
composition of :mod:`fingat.autodiff` ops, so gradients come from the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class GraphError(ValueError):
    pass


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Params:
    """Mixin: iterate tensor fields as ``(name, tensor)`` pairs in declaration order."""

    def named(self, prefix: str = "") -> Iterator[tuple]:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                yield prefix + f.name, value


@dataclass
class GruParams(Params):
    w_z: Tensor
    w_r: Tensor
    w_n: Tensor
    u_z: Tensor
    u_r: Tensor
    u_n: Tensor
    b_z: Tensor
    b_r: Tensor
    b_n: Tensor

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.u_z.shape[0]

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int) -> "GruParams":
        w = {k: init_uniform(rng, (input_dim, hidden_dim), hidden_dim, k) for k in ("w_z", "w_r", "w_n")}
        u = {k: init_uniform(rng, (hidden_dim, hidden_dim), hidden_dim, k) for k in ("u_z", "u_r", "u_n")}
        b = {k: init_uniform(rng, (hidden_dim,), hidden_dim, k) for k in ("b_z", "b_r", "b_n")}
        return cls(**w, **u, **b)


@dataclass
class TemporalAttentionParams(Params):
    w0: Tensor      # hidden -> hidden projection
    score: Tensor   # hidden -> scalar

    @classmethod
    def init(cls, rng, hidden_dim: int) -> "TemporalAttentionParams":
        return cls(init_uniform(rng, (hidden_dim, hidden_dim), hidden_dim, "w0"),
                   init_uniform(rng, (hidden_dim,), hidden_dim, "score"))


@dataclass
class GatParams(Params):
    w1: Tensor   # aggregation transform
    w2: Tensor   # attention transform
    r: Tensor    # length 2 * out_dim

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int) -> "GatParams":
        return cls(init_uniform(rng, (in_dim, out_dim), in_dim, "w1"),
                   init_uniform(rng, (in_dim, out_dim), in_dim, "w2"),
                   init_uniform(rng, (2 * out_dim,), 2 * out_dim, "r"))


def gru_forward(params: GruParams, sequence: Sequence[Tensor], h0: Optional[Tensor] = None):
    """Run a GRU over ``sequence`` (each step ``(batch, input_dim)`` or ``(input_dim,)``).

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    n = tanh(x W_n + (r * h) U_n + b_n), h' = (1 - z) * n + z * h.

    Returns ``(hidden_states, last_state)``.
    """
    if len(sequence) == 0:
        raise ad.ShapeError("GRU needs a non-empty sequence")
    first = sequence[0]
    if first.shape[-1] != params.input_dim:
        raise ad.ShapeError(f"GRU input dim {first.shape[-1]} != {params.input_dim}")
    hid = params.hidden_dim
    if h0 is None:
        h0 = Tensor(np.zeros(first.shape[:-1] + (hid,)))
    elif h0.shape[-1] != hid:
        raise ad.ShapeError(f"GRU h0 dim {h0.shape[-1]} != {hid}")

    h = h0
    states = []
    for x in sequence:
        if x.shape != first.shape:
            raise ad.ShapeError(f"GRU step shape {x.shape} != {first.shape}")
        z = ad.sigmoid(x @ params.w_z + h @ params.u_z + params.b_z)
        r = ad.sigmoid(x @ params.w_r + h @ params.u_r + params.b_r)
        n = ad.tanh(x @ params.w_n + (r * h) @ params.u_n + params.b_n)
        h = n + z * (h - n)
        states.append(h)
    return states, h


def temporal_attention(params: TemporalAttentionParams, H: Sequence[Tensor]):
    """Softmax-weighted sum of hidden states over time.

    Each step is ``(batch, hidden)``; returns ``(aggregate, alpha)`` with
    alpha of shape ``(batch, steps)``.
    """
    if len(H) == 0:
        raise ad.ShapeError("attention over an empty sequence")
    scores = [ad.tanh(h @ params.w0) @ params.score for h in H]
    alpha = ad.softmax(ad.stack(scores, axis=-1), axis=-1)
    if len(H) == 1:
        return H[0] * ad.index(alpha, (..., slice(0, 1))), alpha
    steps = ad.stack(H, axis=-2)  # (batch, steps, hidden)
    weights = ad.reshape(alpha, alpha.shape + (1,))
    return ad.tsum(steps * weights, axis=-2), alpha


@dataclass(frozen=True)
class Graph:
    """Directed edge list; edge ``e`` lets ``target[e]`` attend to ``source[e]``."""

    n_nodes: int
    target: np.ndarray
    source: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency) -> "Graph":
        adjacency = np.asarray(adjacency, dtype=bool)
        q, k = np.nonzero(adjacency)
        return cls(adjacency.shape[0], q, k)

    @classmethod
    def from_neighbors(cls, neighbors: Sequence[Sequence[int]]) -> "Graph":
        q = [i for i, nb in enumerate(neighbors) for _ in nb]
        k = [j for nb in neighbors for j in nb]
        return cls(len(neighbors), np.array(q, dtype=np.intp), np.array(k, dtype=np.intp))

    def to_dense(self, weights) -> np.ndarray:
        out = np.zeros((self.n_nodes, self.n_nodes))
        out[self.target, self.source] = np.asarray(weights)
        return out

    def validate(self) -> None:
        deg = np.bincount(self.target, minlength=self.n_nodes)
        if (deg == 0).any():
            raise GraphError(f"node {int(np.flatnonzero(deg == 0)[0])} has no neighbours")


def complete_graph(n: int) -> Graph:
    """All ordered pairs including self-loops."""
    q, k = np.divmod(np.arange(n * n), n)
    return Graph(n, q, k)


def block_graph(groups: Sequence) -> Graph:
    """Complete graph (with self-loops) inside each group label, no edges across groups."""
    labels = np.unique(np.asarray(groups), return_inverse=True)[1].reshape(-1)
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    # edge e of group g: target slot i, source slot j with i, j < counts[g]
    per_group = counts * counts
    g = np.repeat(np.arange(len(counts)), per_group)
    local = np.arange(per_group.sum()) - np.repeat(np.cumsum(per_group) - per_group, per_group)
    i, j = np.divmod(local, counts[g])
    return Graph(len(labels), order[starts[g] + i], order[starts[g] + j])


def gat_forward(params: GatParams, graph: Graph, features: Tensor):
    """Single-head graph attention.

    Returns node outputs ``ReLU(sum_n beta_qn a_n W1)`` and the per-edge
    attention weights ``beta`` (aligned with ``graph.target``/``graph.source``),
    softmax-normalised over each target's neighbourhood. A dense matrix is
    available through ``graph.to_dense(beta.data)``.
    """
    if not isinstance(graph, Graph):
        graph = Graph.from_adjacency(graph)
    n = features.shape[0]
    if graph.n_nodes != n:
        raise GraphError(f"graph has {graph.n_nodes} nodes but {n} feature rows")
    graph.validate()
    out_dim = params.w2.shape[1]
    proj = features @ params.w2
    # r . [W2 a_q || W2 a_n] splits into a target term and a neighbour term
    own = proj @ ad.index(params.r, slice(0, out_dim))
    other = proj @ ad.index(params.r, slice(out_dim, 2 * out_dim))
    logits = ad.leaky_relu(ad.take_rows(own, graph.target) + ad.take_rows(other, graph.source), 0.2)
    beta = ad.segment_softmax(logits, graph.target, n)
    messages = ad.take_rows(features @ params.w1, graph.source) * ad.reshape(beta, (-1, 1))
    return ad.relu(ad.segment_sum(messages, graph.target, n)), beta


def dense(W: Tensor, x: Tensor, b: Optional[Tensor] = None, activation: Optional[str] = None) -> Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"dense input dim {x.shape[-1]} != {W.shape[0]}")
    y = x @ W
    if b is not None:
        y = y + b
    if activation is None:
        return y
    return ad.elementwise_map(y, activation)
