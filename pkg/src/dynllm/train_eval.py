"""BPR training with chronological batches, streaming rank-against-all evaluation, early stopping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .config import RunConfig
from .ctdg_store import EventLog
from .diffmath import Adam, ParameterStore, Tensor
from .model import DynLLM, chunk_bounds

log = logging.getLogger(__name__)

SELECTION_K = 10


class SamplingError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# -- negatives and loss -------------------------------------------------------

def sample_negatives(positives, num_items: int, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    """Uniform item ids, re-drawn wherever a draw hits the event's positive."""
    if num_items < 2:
        raise SamplingError("negative sampling needs at least 2 items")
    positives = np.asarray(positives, dtype=np.int64)
    out = rng.integers(0, num_items, size=positives.shape)
    for _ in range(max_tries):
        clash = out == positives
        if not clash.any():
            return out
        out[clash] = rng.integers(0, num_items, size=int(clash.sum()))
    raise SamplingError(f"could not draw a negative in {max_tries} tries")


def sample_negative(positive: int, num_items: int, rng: np.random.Generator) -> int:
    return int(sample_negatives([positive], num_items, rng)[0])


def bpr_loss(pos, neg, params: ParameterStore | None = None, weight_decay: float = 0.0) -> Tensor:
    """``mean(-log sigmoid(pos - neg)) + weight_decay * ||params||^2``."""
    pos, neg = dm.as_tensor(pos), dm.as_tensor(neg)
    if pos.shape != neg.shape:
        raise dm.DimensionError(f"bpr_loss: {pos.shape} positive vs {neg.shape} negative scores")
    bad = ~np.isfinite(pos.data) | ~np.isfinite(neg.data)
    if bad.any():
        raise TrainingDiverged(f"{int(bad.sum())} non-finite scores (first at pair {int(np.argmax(bad))})")
    loss = dm.scale(dm.mean(dm.log_sigmoid(dm.sub(pos, neg))), -1.0)
    if params is not None and weight_decay:
        loss = dm.add(loss, dm.scale(params.squared_norm(), weight_decay))
    return loss


# -- ranking metrics ----------------------------------------------------------

def rank_all(scores) -> np.ndarray:
    """Item ids by descending score; ties by ascending id."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def positive_ranks(scores, positives) -> np.ndarray:
    """1-based rank of each row's positive item under :func:`rank_all` ordering."""
    scores = np.atleast_2d(np.asarray(scores))
    positives = np.asarray(positives, dtype=np.int64)
    s_pos = scores[np.arange(len(positives)), positives][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > s_pos) | ((scores == s_pos) & (ids < positives[:, None]))
    return 1 + ahead.sum(axis=1)


def recall_at_k(rank, k: int):
    return (np.asarray(rank) <= k).astype(np.float64)


def ndcg_at_k(rank, k: int):
    rank = np.asarray(rank, dtype=np.float64)
    return np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)


def summarize(ranks, ks) -> dict:
    """``{K: (mean Recall@K, mean NDCG@K)}``; zeros for an empty split."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return {k: (0.0, 0.0) for k in ks}
    return {k: (float(recall_at_k(ranks, k).mean()), float(ndcg_at_k(ranks, k).mean())) for k in ks}


@dataclass
class MetricsReport:
    splits: dict = field(default_factory=dict)     # split -> {K: (recall, ndcg)}
    events: dict = field(default_factory=dict)     # split -> number of ranked events
    losses: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_epoch: int = 0
    wall_clock: float = 0.0

    def recall(self, split: str, k: int = 10) -> float:
        return self.splits[split][k][0]

    def ndcg(self, split: str, k: int = 10) -> float:
        return self.splits[split][k][1]

    def table(self) -> str:
        """Tab-separated metrics table, one row per split and K."""
        rows = ["split\tK\trecall\tndcg\tevents"]
        for split, by_k in self.splits.items():
            for k, (rec, nd) in sorted(by_k.items()):
                rows.append(f"{split}\t{k}\t{rec!r}\t{nd!r}\t{self.events.get(split, 0)}")
        return "\n".join(rows) + "\n"

    def lines(self) -> list:
        return [f"metric split={s} K={k} recall={rec:.6f} ndcg={nd:.6f}"
                for s, by_k in self.splits.items() for k, (rec, nd) in sorted(by_k.items())]


def parse_table(text: str) -> dict:
    out: dict = {}
    for line in text.splitlines()[1:]:
        split, k, rec, nd, _ = line.split("\t")
        out.setdefault(split, {})[int(k)] = (float(rec), float(nd))
    return out


# -- streaming passes ---------------------------------------------------------

def batches(times: np.ndarray, batch: int, chunk: int) -> list:
    """Chunks grouped into optimizer batches of at least ``batch`` events (except the last)."""
    out, cur, size = [], [], 0
    for lo, hi in chunk_bounds(times, chunk):
        cur.append((lo, hi))
        size += hi - lo
        if size >= batch:
            out.append(cur)
            cur, size = [], 0
    if cur:
        out.append(cur)
    return out


def batch_loss(model: DynLLM, split: EventLog, group, cfg: RunConfig, rng: np.random.Generator) -> Tensor:
    """BPR loss of one optimizer batch; memory rows written here stay on the tape."""
    users, items, times = split.users, split.items, split.times
    pos_scores, neg_scores = [], []
    for lo, hi in group:
        u, i, t = users[lo:hi], items[lo:hi], times[lo:hi]
        c = hi - lo
        model.begin(True, rng)
        neg = sample_negatives(i, model.num_items, rng)
        h_u, _ = model.user_embedding(u, t)
        h_items, g_items = model.item_embedding(np.r_[i, neg], np.r_[t, t])
        h_pos = dm.take_rows(h_items, np.arange(c))
        h_neg = dm.take_rows(h_items, np.arange(c, 2 * c))
        pos_scores.append(model.score(h_u, h_pos))
        neg_scores.append(model.score(h_u, h_neg))
        model.apply_updates(u, i, t, h_u, h_pos, dm.take_rows(g_items, np.arange(c)))
    return bpr_loss(dm.concat(pos_scores, axis=0), dm.concat(neg_scores, axis=0),
                    model.params, cfg.weight_decay)


def train_epoch(model: DynLLM, split: EventLog, cfg: RunConfig, optimizer: Adam,
                rng: np.random.Generator) -> float:
    """One pass over ``split`` in time order; returns the mean batch loss (0 for an empty split)."""
    losses = []
    for group in batches(split.times, cfg.batch, cfg.memory_chunk):
        model.params.zero_grad()
        loss = batch_loss(model, split, group, cfg, rng)
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"loss became {float(loss.data)}")
        dm.backward(loss)
        optimizer.step()
        model.memory.detach()
        losses.append(float(loss.data))
    return float(np.mean(losses)) if losses else 0.0


def stream_split(model: DynLLM, split: EventLog, chunk: int, record: bool = True,
                 on_weights=None) -> np.ndarray:
    """Teacher-forced replay: rank every item before each event, then absorb the event.

    Candidate items are embedded at the chunk start time; users at their own
    event time. Returns the 1-based rank of each event's positive item.
    """
    users, items, times = split.users, split.items, split.times
    ranks = np.zeros(len(split), dtype=np.int64)
    all_items = np.arange(model.num_items)
    with dm.no_grad():
        for lo, hi in chunk_bounds(times, chunk):
            u, i, t = users[lo:hi], items[lo:hi], times[lo:hi]
            model.begin(False)
            h_u, _ = model.user_embedding(u, t)
            if on_weights is not None and model.last_fusion_weights is not None:
                on_weights(model.last_fusion_weights)
            h_all, g_all = model.item_embedding(all_items, np.full(model.num_items, t[0]))
            if record:
                ranks[lo:hi] = positive_ranks(h_u.data @ h_all.data.T, i)
            model.apply_updates(u, i, t, h_u, dm.take_rows(h_all, i), dm.take_rows(g_all, i))
    return ranks


# -- early stopping and fitting ---------------------------------------------

class EarlyStopping:
    """Stop once the monitored value fails to beat the best for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch; True when it is a new best."""
        self.epoch += 1
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, self.epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class Splits:
    log: EventLog
    train: EventLog
    val: EventLog
    test: EventLog


@dataclass
class FitResult:
    state: dict
    best_val_recall: float
    best_epoch: int
    losses: list
    val_history: list


def fit(model: DynLLM, data: Splits, cfg: RunConfig, on_epoch=None) -> FitResult:
    """Train until validation Recall@10 stops improving; the model ends at the best checkpoint.

    The checkpoint holds parameters plus the memory snapshot at the start of
    the validation split.
    """
    optimizer = Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    stopper = EarlyStopping(cfg.patience)
    best_state = None
    losses, history = [], []
    for epoch in range(1, cfg.max_epochs + 1):
        model.reset_memory()
        loss = train_epoch(model, data.train, cfg, optimizer, rng)
        snapshot = model.state()
        r10 = float(recall_at_k(stream_split(model, data.val, cfg.memory_chunk), SELECTION_K).mean()) \
            if len(data.val) else 0.0
        losses.append(loss)
        history.append(r10)
        if stopper.update(r10):
            best_state = snapshot
        if on_epoch is not None:
            on_epoch(epoch, loss, r10)
        log.info("epoch %d loss=%.6f val_recall@10=%.6f", epoch, loss, r10)
        if stopper.should_stop:
            break
    if best_state is None:
        best_state = model.state()
    model.load(best_state)
    return FitResult(best_state, stopper.best, stopper.best_epoch, losses, history)


def evaluate(model: DynLLM, data: Splits, cfg: RunConfig, state: dict | None = None,
             splits=("val", "test"), on_weights=None) -> MetricsReport:
    """Metrics from a checkpoint whose memory sits at the start of validation.

    Test metrics are computed after a teacher-forced replay of validation.
    """
    if state is not None:
        model.load(state)
    report = MetricsReport()
    ranks_val = stream_split(model, data.val, cfg.memory_chunk)
    if "val" in splits:
        report.splits["val"] = summarize(ranks_val, cfg.ks)
        report.events["val"] = len(data.val)
    if "test" in splits:
        ranks_test = stream_split(model, data.test, cfg.memory_chunk, on_weights=on_weights)
        report.splits["test"] = summarize(ranks_test, cfg.ks)
        report.events["test"] = len(data.test)
    if state is not None:
        model.load(state)
    return report


def train_and_evaluate(model: DynLLM, data: Splits, cfg: RunConfig, on_epoch=None,
                       on_weights=None) -> tuple:
    start = time.perf_counter()
    result = fit(model, data, cfg, on_epoch)
    report = evaluate(model, data, cfg, result.state, on_weights=on_weights)
    report.losses = result.losses
    report.val_history = result.val_history
    report.best_epoch = result.best_epoch
    report.wall_clock = time.perf_counter() - start
    return result, report


# -- reference rankers --------------------------------------------------------

def popularity_ranks(log: EventLog, start: int, stop: int) -> np.ndarray:
    """Ranks under a global-popularity model counting every event strictly before each prediction."""
    counts = np.bincount(log.items[:start], minlength=log.num_items).astype(np.float64)
    ranks = np.zeros(stop - start, dtype=np.int64)
    times = log.times[start:stop]
    items = log.items[start:stop]
    for lo, hi in chunk_bounds(times, 0):
        ranks[lo:hi] = positive_ranks(np.broadcast_to(counts, (hi - lo, log.num_items)), items[lo:hi])
        np.add.at(counts, items[lo:hi], 1.0)
    return ranks


class FacetWeights:
    """Running mean of fusion attention weights per layer and facet (averaged over heads)."""

    def __init__(self, facets):
        self.facets = tuple(facets)
        self.total = None
        self.count = 0

    def __call__(self, weights) -> None:
        w = np.stack([lw.mean(axis=1).sum(axis=0) for lw in weights])   # (layers, facets)
        self.total = w if self.total is None else self.total + w
        self.count += weights[0].shape[0]

    def table(self) -> str:
        rows = ["layer\t" + "\t".join(self.facets)]
        if self.count:
            for k, row in enumerate(self.total / self.count, start=1):
                rows.append(f"{k}\t" + "\t".join(f"{x:.6f}" for x in row))
        return "\n".join(rows) + "\n"
