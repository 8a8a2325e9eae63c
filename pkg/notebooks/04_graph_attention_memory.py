"""
Temporal graph attention, memory and scoring
============================================

A model without LLM profiles: the user embedding comes from GRU memory
plus attention over recent temporal neighbors. Scores are inner products
with item embeddings. Memory is written only after a batch is scored.
"""

import numpy as np

from dynllm.config import RunConfig
from dynllm.pipeline import build_model, make_dataset
from dynllm.synthetic import planted_clusters

data = make_dataset(planted_clusters(users=12, items=24, clusters=3, events=400, span=400.0, seed=2))
cfg = RunConfig(variant="no_llm", node_dim=8, item_dynamic_dim=4, time_freqs=4, mlp_hidden=16,
                n_user=5, n_item=5, heads=2, dropout=0.0, time_scale=1.0).validate()
model = build_model(cfg, data)
print(sum(p.data.size for p in model.params), "parameters")

model.begin(False)
users, items, times = data.splits.train.users[:6], data.splits.train.items[:6], data.splits.train.times[:6]
h_u, h_graph = model.user_embedding(users, times)
h_i, g_i = model.item_embedding(items, times)
print("user embeddings", h_u.shape, "item embeddings", h_i.shape)
print("scores of the observed pairs", np.round(model.score(h_u, h_i).data, 4))

# memory starts at zero and changes only through apply_updates
before = model.memory.user[users].copy()
model.apply_updates(users, items, times, h_u, h_i, g_i)
print("memory moved:", not np.allclose(before, model.memory.user[users]))
print("memory has absorbed events up to t=%.2f" % model.memory.absorbed_until)

# rank every item for one user at a later time
t = float(data.splits.val.times[0])
u = np.array([data.splits.val.users[0]])
h_u, _ = model.user_embedding(u, np.array([t]))
h_all, _ = model.item_embedding(np.arange(data.log.num_items), np.full(data.log.num_items, t))
scores = model.score(np.repeat(h_u.data, data.log.num_items, axis=0), h_all).data
print("top five items:", np.argsort(-scores)[:5])
