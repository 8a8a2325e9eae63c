"""Top-r facet distillation, facet/graph fusion attention and item composition."""

from __future__ import annotations

import math

import numpy as np

from . import diffmath as dm
from .diffmath import ParameterStore, Tensor, _node, as_tensor
from .llm_augment import FACETS
from .tgan import attention_params

_NORM_FLOOR = 1e-12


def _norm(q: np.ndarray) -> float:
    # correctly rounded sum: results do not depend on summation order
    return math.sqrt(math.fsum((q * q).tolist()))


def top_indices(s: np.ndarray, r: int) -> np.ndarray:
    """Indices of the ``r`` largest scores along the last axis, ascending.

    Ties go to the lower index.
    """
    order = np.argsort(-s, axis=-1, kind="stable")[..., :r]
    return np.sort(order, axis=-1)


def distill_many(h, q, r: int):
    """Distil every facet slot at once.

    ``h`` is (..., F, m), ``q`` is (F, m). Scores are ``s = h * q / ||q||``
    per facet; the ``r`` highest-scoring coordinates of ``h * tanh(s)`` are
    kept in ascending index order. Gradients reach only kept coordinates.
    Returns ``(distilled (..., F, r), selected indices)``.
    """
    h, q = as_tensor(h), as_tensor(q)
    hd, qd = h.data, q.data
    m = qd.shape[-1]
    if not 1 <= r <= m:
        raise ValueError(f"distillation coefficient r={r} outside [1, {m}]")
    if hd.shape[-2:] != qd.shape:
        raise dm.DimensionError(f"distill: h {hd.shape} vs q {qd.shape}")
    norms = np.array([_norm(row) for row in qd])
    if np.any(norms <= _NORM_FLOOR):
        raise FloatingPointError("distillation vector q has (near-)zero norm")
    s = hd * qd / norms[:, None]
    ts = np.tanh(s)
    idx = top_indices(s, r)
    out = np.take_along_axis(hd * ts, idx, axis=-1)

    def bw(g):
        G = np.zeros(hd.shape)
        np.put_along_axis(G, idx, g, axis=-1)
        gs = G * hd * (1.0 - ts * ts)
        gh = G * ts + gs * qd / norms[:, None]
        lead = tuple(range(hd.ndim - 2))
        gsh = (gs * hd).sum(axis=lead) if lead else gs * hd       # (F, m)
        coupling = (gsh * qd).sum(axis=-1, keepdims=True)
        gq = gsh / norms[:, None] - coupling * qd / (norms ** 3)[:, None]
        return gh, gq
    return _node(out, (h, q), bw), idx


def distill(h, q, r: int) -> Tensor:
    """Single-facet form: ``h`` (..., m), ``q`` (m,) -> (..., r)."""
    h, q = as_tensor(h), as_tensor(q)
    hh = dm.reshape(h, h.shape[:-1] + (1, h.shape[-1]))
    qq = dm.reshape(q, (1, q.shape[-1]))
    out, _ = distill_many(hh, qq, r)
    return dm.reshape(out, h.shape[:-1] + (r,))


class Distillers:
    """One learnable score vector per facet (``distill.<facet>.q``)."""

    def __init__(self, params: ParameterStore, facet_dim: int, r: int, facets=FACETS):
        if not 1 <= r <= facet_dim:
            raise ValueError(f"distillation coefficient r={r} outside [1, {facet_dim}]")
        self.r = r
        self.facets = tuple(facets)
        self.q = [params.uniform(f"distill.{f}.q", (facet_dim,), fan_in=facet_dim) for f in self.facets]

    def __call__(self, h) -> tuple:
        q = dm.stack(self.q, axis=0)
        return distill_many(h, q, self.r)


class FusionAttention:
    """``layers`` attention layers: query = graph embedding, keys/values = facet tokens.

    Each layer's output (already projected to the node dimension) is the
    next layer's query.
    """

    def __init__(self, params: ParameterStore, node_dim: int, token_dim: int, layers: int = 2,
                 heads: int = 2):
        if node_dim % heads:
            raise ValueError(f"heads={heads} must divide node_dim={node_dim}")
        self.heads = heads
        self.layers = [attention_params(params, f"fuse.l{k}", node_dim, token_dim, node_dim, node_dim)
                       for k in range(1, layers + 1)]

    def __call__(self, h_graph, tokens, expected_tokens: int | None = None) -> tuple:
        tokens = as_tensor(tokens)
        if expected_tokens is not None and tokens.shape[1] != expected_tokens:
            raise ValueError(f"fusion expects {expected_tokens} facet tokens, got {tokens.shape[1]}")
        h = h_graph
        weights = []
        for p in self.layers:
            h, w = dm.multi_head_attention(h, tokens, tokens, p, self.heads)
            weights.append(w)
        return h, weights


def compose_item(static, dynamic) -> Tensor:
    """Full item embedding: static half first, then the dynamic half."""
    return dm.concat([static, dynamic], axis=-1)
