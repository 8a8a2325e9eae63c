"""The assembled recommender: graph embeddings, profile fusion, scoring and memory updates."""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .config import RunConfig
from .ctdg_store import TemporalGraph
from .diffmath import ParameterStore, Tensor
from .distill_fuse import Distillers, FusionAttention, compose_item
from .llm_augment import FACETS, FacetEncoder, ItemStaticEncoder, ProfileTable
from .memory_scoring import MemoryUpdater, NodeMemory, score
from .tgan import TemporalGraphAttention, TganConfig
from .time_encoding import TimeEncoder


def active_facets(variant: str) -> tuple:
    if variant.startswith("no_") and variant[3:] in FACETS:
        return tuple(f for f in FACETS if f != variant[3:])
    return FACETS


def chunk_bounds(times: np.ndarray, size: int) -> list:
    """Split a time-sorted stream into chunks that never cut an equal-timestamp run.

    ``size == 0`` yields one chunk per distinct timestamp. Events inside a
    chunk are all predicted from the memory state at the chunk start.
    """
    n = len(times)
    starts = np.flatnonzero(np.r_[True, times[1:] != times[:-1]]) if n else np.array([], int)
    bounds = []
    if size == 0:
        ends = np.r_[starts[1:], n]
        return list(zip(starts.tolist(), ends.tolist()))
    run_start = set(starts.tolist())
    lo = 0
    while lo < n:
        hi = min(lo + size, n)
        while hi < n and hi not in run_start:
            hi += 1
        bounds.append((lo, hi))
        lo = hi
    return bounds


class DynLLM:
    """Parameters, memory and forward computations for one configured variant."""

    def __init__(self, cfg: RunConfig, graph: TemporalGraph, item_raw: np.ndarray | None = None,
                 profiles: ProfileTable | None = None, user_features: np.ndarray | None = None,
                 item_features: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        self.graph = graph
        self.variant = cfg.variant
        self.uses_llm = cfg.variant != "no_llm"
        M, N = graph.num_users, graph.num_items
        D, Dd, Ds = cfg.node_dim, cfg.item_dynamic_dim, cfg.item_static_dim
        self.num_users, self.num_items = M, N

        self.params = ParameterStore(np.random.default_rng(cfg.seed))
        p = self.params
        self.time = TimeEncoder(p, cfg.time_freqs)
        self.tgan = TemporalGraphAttention(p, graph, self.time, TganConfig(
            layers=cfg.layers, heads=cfg.heads, n_user=cfg.n_user, n_item=cfg.n_item,
            node_dim=D, item_dynamic_dim=Dd, hidden=cfg.mlp_hidden))
        self.updater = MemoryUpdater(p, self.time, D, Dd)

        if self.uses_llm:
            if item_raw is None or profiles is None:
                raise ValueError(f"variant {cfg.variant!r} needs item title embeddings and profiles")
            self.item_raw = np.asarray(item_raw, dtype=np.float64)
            self.profiles = profiles
            self.facets = active_facets(cfg.variant)
            self.facet_pos = np.array([FACETS.index(f) for f in self.facets])
            self.facet_encoder = FacetEncoder(p, cfg.provider_dim, cfg.facet_dim, cfg.dropout)
            self.item_encoder = ItemStaticEncoder(p, cfg.provider_dim, Ds, cfg.dropout)
            self.distillers = None
            token_dim = cfg.facet_dim
            if cfg.variant != "no_distill":
                self.distillers = Distillers(p, cfg.facet_dim, cfg.r, self.facets)
                token_dim = cfg.r
            self.fusion = FusionAttention(p, D, token_dim, cfg.fusion_layers, cfg.heads)
        else:
            self.item_raw = None
            self.profiles = None
            self.facets = ()
            self.bypass = (p.uniform("nollm.W", (D, D)), p.zeros("nollm.b", (D,)))
            self.item_static = p.uniform("nollm.item_static", (N, Ds), fan_in=Ds)

        self.user_features = np.zeros((M, D)) if user_features is None else user_features
        self.item_features = np.zeros((N, D)) if item_features is None else item_features
        self.memory = NodeMemory(M, N, D, Dd)
        self.training = False
        self.rng = None
        self._static = None
        self.last_fusion_weights = None

    # -- per-chunk context ----------------------------------------------------

    def begin(self, training: bool, rng: np.random.Generator | None = None) -> None:
        """Fix train/eval mode and recompute the static item table for the next chunk."""
        self.training, self.rng = training, rng
        if self.uses_llm:
            self._static = self.item_encoder(self.item_raw, training, rng)
        else:
            self._static = self.item_static

    def _layer0(self, side: str, nodes: np.ndarray) -> Tensor:
        if side == "user":
            h = self.memory.user_rows(nodes)
            f = self.user_features[nodes]
        else:
            h = dm.concat([dm.take_rows(self._static, nodes), self.memory.item_rows(nodes)], axis=-1)
            f = self.item_features[nodes]
        return dm.add(h, f) if f.any() else h

    # -- embeddings -------------------------------------------------------------

    def user_graph(self, users, t) -> Tensor:
        users = np.asarray(users, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        h_mem = self.memory.user_rows(users)
        h_nb = self.tgan.neighbor_embedding("user", users, t, self._layer0)
        elapsed = (t - self.memory.user_time[users]) / self.cfg.time_scale
        h_proj = self.tgan.project_user(h_mem, elapsed)
        return self.tgan.user_graph_embedding(h_mem, h_nb, h_proj)

    def facet_tokens(self, users, t) -> Tensor:
        rows = self.profiles.lookup(users, t)
        raw = self.profiles.raw[rows][:, self.facet_pos, :]
        W = dm.take_rows(self.facet_encoder.W, self.facet_pos)
        b = dm.take_rows(self.facet_encoder.b, self.facet_pos)
        h = dm.dropout(dm.tanh(dm.batched_affine(raw, W, b)), self.cfg.dropout, self.rng, self.training)
        if self.distillers is None:
            return h
        return self.distillers(h)[0]

    def user_embedding(self, users, t) -> tuple:
        """``(h_u(t), h_u^G(t))`` for a batch of (user, time) pairs."""
        h_graph = self.user_graph(users, t)
        if not self.uses_llm:
            W, b = self.bypass
            return dm.affine(h_graph, W, b), h_graph
        tokens = self.facet_tokens(users, t)
        h, weights = self.fusion(h_graph, tokens, expected_tokens=len(self.facets))
        self.last_fusion_weights = weights
        return h, h_graph

    def item_embedding(self, items, t) -> tuple:
        """``(h_i(t), h_i^G(t))``: static half first, dynamic graph half second."""
        items = np.asarray(items, dtype=np.int64)
        h_dyn = self.memory.item_rows(items)
        h_nb = self.tgan.neighbor_embedding("item", items, np.asarray(t, dtype=np.float64), self._layer0)
        h_graph = self.tgan.item_graph_embedding(h_dyn, h_nb)
        return compose_item(dm.take_rows(self._static, items), h_graph), h_graph

    def score(self, h_u, h_i) -> Tensor:
        return score(h_u, h_i)

    # -- memory -----------------------------------------------------------------

    def apply_updates(self, users, items, t, h_u, h_i, h_i_graph) -> None:
        """GRU updates for one chunk of ground-truth events.

        When a node occurs several times in a chunk, its latest event wins.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        new_u = self.updater.update_user(h_u, h_i, t, self.memory.user_time[users])
        new_i, _ = self.updater.update_item(h_i_graph, h_u, t, self.memory.item_time[items])
        self.memory.write_users(users, new_u, t)
        self.memory.write_items(items, new_i, t)

    def reset_memory(self) -> None:
        self.memory.reset()

    # -- persistence ------------------------------------------------------------

    def state(self) -> dict:
        out = dict(self.params.state())
        out.update(self.memory.snapshot())
        return out

    def load(self, arrays: dict) -> None:
        self.params.load_state(arrays)
        self.memory.load(arrays)
