"""
Facet distillation and fusion
=============================

Each facet embedding is squeezed to its r most relevant coordinates,
scored against a learned query. The graph embedding then attends over
the distilled facet tokens to produce the final user embedding.
"""

import numpy as np

from dynllm import diffmath as dm
from dynllm.distill_fuse import FusionAttention, compose_item, distill, top_indices

h = np.array([0.5, -1.0, 2.0])
q = np.array([2.0, 1.0, -2.0])
print("scores", np.round(h * q / np.linalg.norm(q), 4), "-> keep", top_indices(h * q / np.linalg.norm(q), 2))
print("distilled", np.round(distill(h, q, 2).data, 5))

# equal scores keep the lower index
print("ties:", top_indices(np.array([1.0, 3.0, 3.0, 3.0]), 2))

# only kept coordinates receive gradient
ht = dm.Tensor(h, requires_grad=True)
dm.sum(distill(ht, q, 2)).backward()
print("gradient w.r.t. h", np.round(ht.grad, 4))

# fusion: one graph embedding per user attends over four facet tokens
rng = np.random.default_rng(0)
store = dm.ParameterStore(rng)
fuse = FusionAttention(store, node_dim=8, token_dim=5, layers=2, heads=2)
h_graph = rng.normal(size=(3, 8))
tokens = rng.normal(size=(3, 4, 5))
h_user, weights = fuse(h_graph, tokens, expected_tokens=4)
print("fused", h_user.shape, "| layer-2 weights per head for user 0:\n", np.round(weights[1][0], 3))

# item embeddings are the static title part followed by the dynamic part
print(compose_item(np.array([[1.0, 2.0]]), np.array([[3.0]])).data)
