"""Interaction event log, temporal neighbor index and chronological splits."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class IngestError(ValueError):
    """A record could not be parsed; ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(IngestError):
    """A record parsed but violates a field constraint."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    timestamp: float
    title: str = ""


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


class EventLog:
    """Events sorted by (timestamp, user_id, item_id) with contiguous id maps.

    Sub-logs produced by slicing share the parent's id maps, so integer ids
    stay valid across train/validation/test.
    """

    def __init__(self, events: Sequence[InteractionEvent], user_index: dict | None = None,
                 item_index: dict | None = None, _sorted: bool = False):
        if not _sorted:
            events = sorted(events, key=lambda e: (e.timestamp, e.user_id, e.item_id))
        self.events: tuple = tuple(events)
        if user_index is None:
            user_index = {u: k for k, u in enumerate(sorted({e.user_id for e in self.events}))}
        if item_index is None:
            item_index = {i: k for k, i in enumerate(sorted({e.item_id for e in self.events}))}
        self.user_index = user_index
        self.item_index = item_index
        self.users = np.fromiter((user_index[e.user_id] for e in self.events), dtype=np.int64,
                                 count=len(self.events))
        self.items = np.fromiter((item_index[e.item_id] for e in self.events), dtype=np.int64,
                                 count=len(self.events))
        self.times = np.fromiter((e.timestamp for e in self.events), dtype=np.float64,
                                 count=len(self.events))

    @classmethod
    def from_events(cls, events: Iterable[InteractionEvent]) -> "EventLog":
        events = list(events)
        for n, e in enumerate(events, start=1):
            _validate(e, n)
        return cls(events)

    def __len__(self) -> int:
        return len(self.events)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return EventLog(self.events[key], self.user_index, self.item_index, _sorted=True)
        return self.events[key]

    def __iter__(self):
        return iter(self.events)

    @property
    def num_users(self) -> int:
        return len(self.user_index)

    @property
    def num_items(self) -> int:
        return len(self.item_index)

    def user_ids(self) -> list:
        return sorted(self.user_index, key=self.user_index.__getitem__)

    def item_ids(self) -> list:
        return sorted(self.item_index, key=self.item_index.__getitem__)

    def item_titles(self) -> list:
        """Title per integer item id; the earliest non-empty title wins."""
        titles = [""] * self.num_items
        for e in self.events:
            k = self.item_index[e.item_id]
            if not titles[k] and e.title:
                titles[k] = e.title
        return titles


def _validate(event: InteractionEvent, line: int) -> None:
    if not event.user_id or not event.item_id:
        raise ValidationError(line, "user_id and item_id must be non-empty")
    if not math.isfinite(event.timestamp):
        raise ValidationError(line, f"timestamp {event.timestamp!r} is not finite")
    if event.timestamp < 0:
        raise ValidationError(line, f"negative timestamp {event.timestamp!r}")


def ingest_events(lines: Iterable[str]) -> EventLog:
    """Parse tab-separated ``user, item, timestamp, title`` lines into an EventLog.

    A first line whose third field is not numeric is treated as a header.
    Duplicate records are kept as distinct events.
    """
    events = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if lineno == 1 and len(fields) == 4 and not _is_number(fields[2]):
            continue
        if len(fields) != 4:
            raise IngestError(lineno, f"expected 4 tab-separated fields, found {len(fields)}")
        user, item, ts, title = fields
        if not _is_number(ts):
            raise IngestError(lineno, f"timestamp {ts!r} is not a number")
        event = InteractionEvent(user.strip(), item.strip(), float(ts), title)
        _validate(event, lineno)
        events.append(event)
    return EventLog(events)


def load_event_file(path) -> EventLog:
    with open(path, encoding="utf-8") as fh:
        return ingest_events(fh)


def write_event_file(log: EventLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id\titem_id\ttimestamp\ttitle\n")
        for e in log:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp!r}\t{e.title}\n")


def split_sizes(n: int, ratios: Sequence[float] = (0.7, 0.15, 0.15)) -> tuple:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if n < 3:
        raise SplitError(f"need at least 3 events to split, got {n}")
    n_train = math.floor(Fraction(str(ratios[0])) * n)
    n_val = math.floor(Fraction(str(ratios[1])) * n)
    return n_train, n_val, n - n_train - n_val


def chronological_split(log: EventLog, ratios: Sequence[float] = (0.7, 0.15, 0.15)) -> tuple:
    """First ``floor(r0 N)`` events to train, next ``floor(r1 N)`` to val, rest to test."""
    n_train, n_val, _ = split_sizes(len(log), ratios)
    return log[:n_train], log[n_train:n_train + n_val], log[n_train + n_val:]


class TemporalAdjacency:
    """Per-node neighbor lists sorted by (timestamp, event index).

    Queries return the most recent neighbors strictly before ``t``; among
    equal timestamps the later event comes first.
    """

    def __init__(self, nodes: np.ndarray, partners: np.ndarray, times: np.ndarray, num_nodes: int):
        nodes = np.asarray(nodes, dtype=np.int64)
        partners = np.asarray(partners, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        order = np.lexsort((np.arange(len(nodes)), times, nodes))
        self.num_nodes = num_nodes
        self.nodes = nodes[order]
        self.partners = partners[order]
        self.times = times[order]
        self.offsets = np.searchsorted(self.nodes, np.arange(num_nodes + 1))
        self._unique_times = np.unique(times)
        # integer keys make the "strictly before" comparison exact
        self._stride = len(self._unique_times) + 1
        self._keys = self.nodes * self._stride + np.searchsorted(self._unique_times, self.times)

    def query(self, nodes, t, n: int):
        """Vectorised lookup: returns ``(ids, times, mask)`` each of shape (B, n)."""
        nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), nodes.shape)
        B = nodes.shape[0]
        if n < 1:
            raise ValueError("neighbor count must be >= 1")
        valid = (nodes >= 0) & (nodes < self.num_nodes)
        safe = np.where(valid, nodes, 0)
        qkey = safe * self._stride + np.searchsorted(self._unique_times, t, side="left")
        end = np.searchsorted(self._keys, qkey, side="left")
        start = self.offsets[safe]
        count = np.where(valid, np.minimum(end - start, n), 0)
        mask = np.arange(n)[None, :] < count[:, None]
        if len(self.partners) == 0:
            return np.zeros((B, n), dtype=np.int64), np.zeros((B, n)), mask
        pos = np.where(mask, end[:, None] - 1 - np.arange(n)[None, :], 0)
        ids = np.where(mask, self.partners[pos], 0)
        tms = np.where(mask, self.times[pos], 0.0)
        return ids, tms, mask

    def neighbors(self, node: int, t: float, n: int) -> list:
        ids, tms, mask = self.query([node], [t], n)
        k = int(mask[0].sum())
        return [(int(ids[0, j]), float(tms[0, j])) for j in range(k)]


class TemporalGraph:
    """Both directions of the bipartite interaction graph."""

    def __init__(self, log: EventLog):
        self.num_users = log.num_users
        self.num_items = log.num_items
        self.user_adj = TemporalAdjacency(log.users, log.items, log.times, log.num_users)
        self.item_adj = TemporalAdjacency(log.items, log.users, log.times, log.num_items)

    def adjacency(self, side: str) -> TemporalAdjacency:
        return self.user_adj if side == "user" else self.item_adj

    def temporal_neighbors(self, node: int, t: float, n: int, side: str = "user") -> list:
        return self.adjacency(side).neighbors(node, t, n)


def dataset_digest(path) -> str:
    h = hashlib.sha256()
    with open(Path(path), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
