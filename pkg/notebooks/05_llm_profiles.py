"""
LLM facet profiles and the profile cache
========================================

Every few purchases a shopper's recent titles go into a prompt. The
completion names four facets of the shopper, and each facet text is
embedded. Everything lands in an on-disk cache keyed by user, window end
and facet, so training never calls the provider.
"""

import tempfile
from collections import Counter

from dynllm.llm_augment import (FACETS, MockProvider, ProfileCache, augment, build_prompt, load_profile_table,
                                parse_profile, profile_key, refresh_points)
from dynllm.synthetic import planted_clusters

log = planted_clusters(users=8, items=16, clusters=2, events=200, span=200.0, seed=3)
points = refresh_points(log, refresh_every=10)
print(len(points), "refresh points; first one:", points[0].user_id, points[0].ordinal, points[0].window_end)

prompt = build_prompt(points[0].user_id, points[0].titles, (points[0].window_start, points[0].window_end))
print(prompt)

# the offline provider answers from word counts, so it needs no network
provider = MockProvider(embedding_dim=16)
text = provider.complete(prompt)
print(text)
print(parse_profile(text))

# fill the cache; a second pass finds everything and calls nothing
cache = ProfileCache(tempfile.mkdtemp())
report = augment(log, provider, cache, refresh_every=10)
print("generated", report.generated, "titles embedded", report.embedded_titles, "failures", report.failures)
calls = Counter(provider.calls)
again = augment(log, provider, cache, refresh_every=10)
print("second pass skipped", again.skipped, "new calls", dict(provider.calls - calls))

entry = cache.get(profile_key(points[0].user_id, points[0].window_end, "crd"))
print("cached crd text:", entry.text, "| vector norm %.6f" % (entry.vector @ entry.vector) ** 0.5)

# the model looks profiles up causally: a profile is visible only after its window closed
table = load_profile_table(log, cache, 10, 16)
u = points[0].user
print("row before window end:", table.lookup([u], [points[0].window_end])[0],
      "| row just after:", table.lookup([u], [points[0].window_end + 1e-9])[0])
print("facets:", FACETS)
