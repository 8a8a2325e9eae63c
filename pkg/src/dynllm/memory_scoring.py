"""Node memories, interaction scores and GRU memory updaters."""

from __future__ import annotations

import numpy as np

from . import diffmath as dm
from .diffmath import ParameterStore, Tensor
from .time_encoding import TimeEncoder


class CausalityError(ValueError):
    """An update would move a node's memory timestamp backwards."""


def gru_params(params: ParameterStore, prefix: str, input_dim: int, hidden_dim: int) -> tuple:
    W = [params.uniform(f"{prefix}.W{g}", (input_dim, hidden_dim)) for g in "zrn"]
    U = [params.uniform(f"{prefix}.U{g}", (hidden_dim, hidden_dim)) for g in "zrn"]
    b = [params.zeros(f"{prefix}.b{g}", (hidden_dim,)) for g in "zrn"]
    return tuple(W + U + b)


def score(h_u, h_i) -> Tensor:
    """Inner-product preference score along the last axis."""
    return dm.sum(dm.mul(h_u, h_i), axis=-1)


class NodeMemory:
    """User memories ``h_u(t-)``, item dynamic memories and last-interaction times.

    During a training batch, freshly written rows stay on the autodiff tape
    (``live`` rows) so later events in the same batch backpropagate into the
    updaters; :meth:`detach` folds them into the plain arrays.
    """

    def __init__(self, num_users: int, num_items: int, user_dim: int, item_dim: int):
        self.user = np.zeros((num_users, user_dim))
        self.item = np.zeros((num_items, item_dim))
        self.user_time = np.zeros(num_users)
        self.item_time = np.zeros(num_items)
        self._live_user: dict = {}
        self._live_item: dict = {}
        self.absorbed_until = -np.inf   # latest event timestamp folded into memory

    def reset(self) -> None:
        for a in (self.user, self.item, self.user_time, self.item_time):
            a.fill(0.0)
        self._live_user.clear()
        self._live_item.clear()
        self.absorbed_until = -np.inf

    @staticmethod
    def _gather(base: np.ndarray, live: dict, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if not live:
            return Tensor(base[ids])
        flat = ids.ravel()
        groups: dict = {}
        for k, i in enumerate(flat.tolist()):
            hit = live.get(i)
            if hit is not None:
                src, row = hit
                g = groups.setdefault(id(src), (src, [], []))
                g[1].append(k)
                g[2].append(row)
        if not groups:
            return Tensor(base[ids])
        out = dm.overlay_rows(base[flat], [(pos, src, rows) for src, pos, rows in groups.values()])
        return dm.reshape(out, ids.shape + base.shape[1:])

    def user_rows(self, ids) -> Tensor:
        return self._gather(self.user, self._live_user, ids)

    def item_rows(self, ids) -> Tensor:
        return self._gather(self.item, self._live_item, ids)

    def _write(self, base, live, times, ids, values: Tensor, t) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), ids.shape)
        for k, i in enumerate(ids.tolist()):
            if values.requires_grad:
                live[i] = (values, k)
            else:
                live.pop(i, None)
            base[i] = values.data[k]
            times[i] = t[k]
        if len(t):
            self.absorbed_until = max(self.absorbed_until, float(t.max()))

    def write_users(self, ids, values: Tensor, t) -> None:
        self._write(self.user, self._live_user, self.user_time, ids, values, t)

    def write_items(self, ids, values: Tensor, t) -> None:
        self._write(self.item, self._live_item, self.item_time, ids, values, t)

    def detach(self) -> None:
        self._live_user.clear()
        self._live_item.clear()

    def snapshot(self) -> dict:
        return {"memory.user": self.user.copy(), "memory.item": self.item.copy(),
                "memory.user_time": self.user_time.copy(), "memory.item_time": self.item_time.copy()}

    def load(self, arrays: dict) -> None:
        self.detach()
        self.user[...] = arrays["memory.user"]
        self.item[...] = arrays["memory.item"]
        self.user_time[...] = arrays["memory.user_time"]
        self.item_time[...] = arrays["memory.item_time"]
        self.absorbed_until = -np.inf


class MemoryUpdater:
    """GRU updaters for users (hidden = node dim) and items (hidden = dynamic dim)."""

    def __init__(self, params: ParameterStore, time_encoder: TimeEncoder, node_dim: int,
                 item_dynamic_dim: int):
        self.time = time_encoder
        self.user_gru = gru_params(params, "gru.user", node_dim + time_encoder.dim, node_dim)
        self.item_gru = gru_params(params, "gru.item", node_dim + time_encoder.dim, item_dynamic_dim)

    def _elapsed(self, t, t_prev) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        t_prev = np.asarray(t_prev, dtype=np.float64)
        if np.any(t < t_prev):
            raise CausalityError(f"update at t={t} precedes last interaction t'={t_prev}")
        return t - t_prev

    def update_user(self, h_u_t, h_i_t, t, t_prev) -> Tensor:
        """``GRU(h_u(t), h_i(t) || phi(t - t_u'))`` -> ``h_u(t+)``."""
        enc = self.time.encode(self._elapsed(t, t_prev))
        return dm.gru_cell(h_u_t, dm.concat([h_i_t, enc], axis=-1), self.user_gru)

    def update_item(self, h_i_graph, h_u_t, t, t_prev, h_static=None):
        """``GRU(h_i^G(t), h_u(t) || phi(t - t_i'))`` -> ``(h~_i(t+), h_i(t+))``.

        ``h_i(t+)`` is ``None`` when ``h_static`` is not supplied.
        """
        enc = self.time.encode(self._elapsed(t, t_prev))
        dyn = dm.gru_cell(h_i_graph, dm.concat([h_u_t, enc], axis=-1), self.item_gru)
        full = None if h_static is None else dm.concat([h_static, dyn], axis=-1)
        return dyn, full
