"""Small shared builders for model-level tests."""

import numpy as np

from dynllm.config import RunConfig
from dynllm.llm_augment import MockProvider, ProfileCache
from dynllm.pipeline import build_model, make_dataset, run_augment
from dynllm.synthetic import planted_clusters

TINY = dict(node_dim=4, item_dynamic_dim=2, time_freqs=2, mlp_hidden=6, facet_dim=4, r=3,
            provider_dim=6, heads=2, n_user=3, n_item=2, dropout=0.0, refresh_every=3,
            batch=16, memory_chunk=8, max_epochs=2, patience=2, time_scale=1.0)


def tiny_config(cache_dir, **changes) -> RunConfig:
    return RunConfig(cache_dir=str(cache_dir), **{**TINY, **changes}).validate()


def tiny_data(events=120, seed=0, span=None):
    # short spans keep finite differences of the time encoding meaningful
    span = float(events) if span is None else span
    log = planted_clusters(users=6, items=8, clusters=2, events=events, span=span, seed=seed)
    return make_dataset(log)


def tiny_model(tmp_path, variant="full", data=None, **changes):
    data = data if data is not None else tiny_data()
    cfg = tiny_config(tmp_path / "cache", variant=variant, **changes)
    if variant != "no_llm":
        run_augment(cfg, data, MockProvider(cfg.provider_dim))
    return build_model(cfg, data), data, cfg


def cache_for(cfg):
    return ProfileCache(cfg.cache_dir)


def perturb(params, scale=0.5, seed=0):
    """Move every parameter off its (often zero) initial value."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.data += scale * rng.standard_normal(p.data.shape)
