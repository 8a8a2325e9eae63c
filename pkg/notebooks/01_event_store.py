"""
Event store, chronological splits and temporal neighbors
========================================================

Load a tab-separated interaction file, split it by time and ask who a
node interacted with strictly before a given moment.
"""

import tempfile
from pathlib import Path

import numpy as np

from dynllm.ctdg_store import TemporalGraph, chronological_split, load_event_file, split_sizes, write_event_file
from dynllm.synthetic import planted_clusters

# a small synthetic log: 20 shoppers, 40 products in 4 taste clusters
log = planted_clusters(users=20, items=40, clusters=4, events=500, span=1000.0, seed=0)
print(len(log), "events,", log.num_users, "users,", log.num_items, "items")

# the on-disk format is user, item, timestamp, title separated by tabs
path = Path(tempfile.mkdtemp()) / "events.tsv"
write_event_file(log, path)
print("\n".join(path.read_text().splitlines()[:2]))
log = load_event_file(path)

# events are ordered by (time, user, item); the split boundaries use floor arithmetic
print("split sizes for 500:", split_sizes(500))
train, val, test = chronological_split(log)
print("train ends at t=%.2f, test starts at t=%.2f" % (log.times[len(train) - 1], log.times[len(train) + len(val)]))

# neighbor queries only see events strictly earlier than t, newest first
graph = TemporalGraph(log)
u = log.user_index["u0003"]
t = float(log.times[300])
for item, when in graph.temporal_neighbors(u, t, 5, side="user"):
    print("  u0003 saw", log.item_ids()[item], "at %.2f" % when)
assert all(when < t for _, when in graph.temporal_neighbors(u, t, 50, side="user"))

# the batched form returns padded arrays plus a mask
nodes, times, mask = graph.adjacency("user").query(np.array([u, 0]), np.array([t, 1.0]), 4)
print("mask:\n", mask)
