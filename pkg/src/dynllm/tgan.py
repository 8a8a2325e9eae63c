"""Temporal graph attention over most-recent neighbors, and the graph embeddings built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffmath as dm
from .ctdg_store import TemporalGraph
from .diffmath import ParameterStore, Tensor
from .time_encoding import TimeEncoder

SIDES = ("user", "item")
_OTHER = {"user": "item", "item": "user"}


@dataclass
class TganConfig:
    layers: int = 2
    heads: int = 2
    n_user: int = 5        # neighbors gathered for a user
    n_item: int = 2        # neighbors gathered for an item
    node_dim: int = 128
    item_dynamic_dim: int = 64
    hidden: int = 256

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("TGAN needs at least one layer")
        if self.n_user < 1 or self.n_item < 1:
            raise ValueError("neighbor counts must be >= 1")
        if self.node_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide node_dim={self.node_dim}")


def attention_params(params: ParameterStore, prefix: str, d_q: int, d_k: int, d_a: int, d_out: int) -> tuple:
    return (
        params.uniform(f"{prefix}.Wq", (d_q, d_a)), params.zeros(f"{prefix}.bq", (d_a,)),
        params.uniform(f"{prefix}.Wk", (d_k, d_a)), params.zeros(f"{prefix}.bk", (d_a,)),
        params.uniform(f"{prefix}.Wv", (d_k, d_a)), params.zeros(f"{prefix}.bv", (d_a,)),
        params.uniform(f"{prefix}.Wo", (d_a, d_out)), params.zeros(f"{prefix}.bo", (d_out,)),
    )


def mlp_params(params: ParameterStore, prefix: str, d_in: int, hidden: int, d_out: int) -> tuple:
    return (params.uniform(f"{prefix}.W1", (d_in, hidden)), params.zeros(f"{prefix}.b1", (hidden,)),
            params.uniform(f"{prefix}.W2", (hidden, d_out)), params.zeros(f"{prefix}.b2", (d_out,)))


def mlp(x, p: tuple) -> Tensor:
    W1, b1, W2, b2 = p
    return dm.affine(dm.tanh(dm.affine(x, W1, b1)), W2, b2)


def _scatter_rows(values: Tensor, positions: np.ndarray, total: int) -> Tensor:
    """Rows ``values[k]`` placed at ``positions[k]`` of a (total, d) zero matrix."""
    d = values.shape[-1]
    padded = dm.concat([values, np.zeros((1, d))], axis=0)
    index = np.full(total, len(positions), dtype=np.intp)
    index[positions] = np.arange(len(positions))
    return dm.take_rows(padded, index)


Layer0 = Callable[[str, np.ndarray], Tensor]


class TemporalGraphAttention:
    """Stacked per-side attention layers plus the user/item graph-embedding MLPs.

    Layer ``l`` for a node of a given side attends over that node's temporal
    neighbors' layer ``l-1`` states; each neighbor's state is itself evaluated
    at the neighbor's interaction time. Layer 0 states come from a callback
    (memory plus node features), so this class holds no node state.
    """

    def __init__(self, params: ParameterStore, graph: TemporalGraph, time_encoder: TimeEncoder,
                 cfg: TganConfig):
        cfg.validate()
        self.cfg, self.graph, self.time = cfg, graph, time_encoder
        D, dT = cfg.node_dim, time_encoder.dim
        self.attn = {
            (side, layer): attention_params(params, f"tgan.{side}.l{layer}", D + dT, D + dT, D, D)
            for side in SIDES for layer in range(1, cfg.layers + 1)
        }
        self.user_mlp = mlp_params(params, "tgan.user_mlp", 3 * D, cfg.hidden, D)
        self.item_mlp = mlp_params(params, "tgan.item_mlp", cfg.item_dynamic_dim + D, cfg.hidden,
                                   cfg.item_dynamic_dim)
        self.proj_w = params.zeros("tgan.proj.w", (D,))

    def neighbor_count(self, side: str) -> int:
        return self.cfg.n_user if side == "user" else self.cfg.n_item

    def layer_forward(self, side: str, layer: int, query_state, neighbor_states, neighbor_times,
                      t, mask=None) -> Tensor:
        """One attention layer for a batch of (B) query nodes over (B, n) neighbors.

        Tokens are ``neighbor_state || phi(t - t_k)``; the query is
        ``query_state || phi(0)``. With no valid neighbor the output is zero.
        """
        query_state = dm.as_tensor(query_state)
        B = query_state.shape[0]
        D = self.cfg.node_dim
        neighbor_times = np.asarray(neighbor_times, dtype=np.float64).reshape(B, -1)
        n = neighbor_times.shape[1]
        if mask is None:
            mask = np.ones((B, n), dtype=bool)
        if n == 0 or not mask.any():
            return Tensor(np.zeros((B, D)))
        t = np.asarray(t, dtype=np.float64).reshape(B, 1)
        dt = np.where(mask, t - neighbor_times, 0.0)
        if np.any(dt < 0):
            raise ValueError("neighbor times must precede the query time")
        tokens = dm.concat([neighbor_states, self.time.encode(dt)], axis=-1)
        query = dm.concat([query_state, self.time.zero(B)], axis=-1)
        out, _ = dm.multi_head_attention(query, tokens, tokens, self.attn[(side, layer)],
                                         self.cfg.heads, mask)
        return out

    def neighbor_embedding(self, side: str, nodes, times, layer0: Layer0, layer: int | None = None) -> Tensor:
        """Layer-``layer`` (default: last) output for each (node, time) pair."""
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        if layer is None:
            layer = self.cfg.layers
        if layer == 0:
            return layer0(side, nodes)
        B = len(nodes)
        ids, nt, mask = self.graph.adjacency(side).query(nodes, times, self.neighbor_count(side))
        if not mask.any():
            return Tensor(np.zeros((B, self.cfg.node_dim)))
        n = mask.shape[1]
        flat = np.flatnonzero(mask.ravel())
        inner = self.neighbor_embedding(_OTHER[side], ids.ravel()[flat], nt.ravel()[flat], layer0, layer - 1)
        nb_states = dm.reshape(_scatter_rows(inner, flat, B * n), (B, n, self.cfg.node_dim))
        own = self.neighbor_embedding(side, nodes, times, layer0, layer - 1)
        return self.layer_forward(side, layer, own, nb_states, nt, times, mask)

    def project_user(self, h_prev, elapsed) -> Tensor:
        """``(1 + elapsed * w) * h_prev`` with a learnable vector ``w``."""
        elapsed = np.asarray(elapsed, dtype=np.float64)
        if np.any(elapsed < 0):
            raise ValueError("elapsed time must be >= 0")
        gate = dm.add(1.0, dm.mul(elapsed[..., None], self.proj_w))
        return dm.mul(gate, h_prev)

    def user_graph_embedding(self, h_memory, h_neighbors, h_projection) -> Tensor:
        return mlp(dm.concat([h_memory, h_neighbors, h_projection], axis=-1), self.user_mlp)

    def item_graph_embedding(self, h_dynamic, h_neighbors) -> Tensor:
        return mlp(dm.concat([h_dynamic, h_neighbors], axis=-1), self.item_mlp)
