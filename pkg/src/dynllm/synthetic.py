"""Planted-cluster purchase streams for end-to-end checks.

Every user belongs to one of ``clusters`` taste groups and every item to
one cluster. A purchase picks an in-cluster item with probability ``p_in``
(Zipf-weighted by item rank inside the cluster) and otherwise any item
uniformly. Item titles carry the cluster word, so a profile built from a
user's recent titles names the user's cluster.
"""

from __future__ import annotations

import numpy as np

from .ctdg_store import EventLog, InteractionEvent

CLUSTER_WORDS = ("alpine", "coastal", "desert", "urban", "forest", "arctic", "tropic", "prairie")
NOUNS = ("jacket", "lamp", "kettle", "boots", "tent", "scarf", "mug", "blanket", "pack", "stove")


def planted_clusters(users: int = 100, items: int = 200, clusters: int = 4, events: int = 20000,
                     p_in: float = 0.6, zipf: float = 0.8, span: float = 2 * 365 * 86400.0,
                     seed: int = 0) -> EventLog:
    if not 1 <= clusters <= len(CLUSTER_WORDS):
        raise ValueError(f"clusters must lie in [1, {len(CLUSTER_WORDS)}]")
    if items < clusters or users < 1 or events < 1:
        raise ValueError("need at least one user, one event and one item per cluster")
    rng = np.random.default_rng(seed)
    user_cluster = np.arange(users) % clusters
    item_cluster = np.arange(items) % clusters
    members = [np.flatnonzero(item_cluster == c) for c in range(clusters)]
    weights = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** zipf
        weights.append(w / w.sum())

    times = np.sort(rng.uniform(0.0, span, size=events))
    who = rng.integers(0, users, size=events)
    stay = rng.random(events) < p_in
    anywhere = rng.integers(0, items, size=events)
    what = np.empty(events, dtype=np.int64)
    for k in range(events):
        if stay[k]:
            c = user_cluster[who[k]]
            what[k] = members[c][rng.choice(len(members[c]), p=weights[c])]
        else:
            what[k] = anywhere[k]

    titles = [f"{CLUSTER_WORDS[item_cluster[i]]} {NOUNS[(i // clusters) % len(NOUNS)]} {i:03d}"
              for i in range(items)]
    out = [InteractionEvent(f"u{u:04d}", f"i{i:04d}", float(t), titles[i])
           for u, i, t in zip(who.tolist(), what.tolist(), times.tolist())]
    return EventLog(out)


def user_clusters(log: EventLog, clusters: int = 4) -> np.ndarray:
    """Planted cluster of each integer user id (recovered from the id text)."""
    return np.array([int(u[1:]) % clusters for u in log.user_ids()])
