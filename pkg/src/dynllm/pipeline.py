"""Glue between the event store, the profile cache and the trainer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .ctdg_store import EventLog, TemporalGraph, chronological_split, load_event_file
from .llm_augment import (HttpProvider, HttpProviderConfig, MockProvider, ProfileCache, augment,
                          load_item_table, load_profile_table)
from .model import DynLLM
from .train_eval import FacetWeights, Splits, train_and_evaluate


@dataclass
class Dataset:
    log: EventLog
    graph: TemporalGraph
    splits: Splits


def make_dataset(log: EventLog, ratios=(0.7, 0.15, 0.15)) -> Dataset:
    train, val, test = chronological_split(log, ratios)
    return Dataset(log, TemporalGraph(log), Splits(log, train, val, test))


def load_dataset(path, ratios=(0.7, 0.15, 0.15)) -> Dataset:
    return make_dataset(load_event_file(path), ratios)


def make_provider(cfg: RunConfig):
    if cfg.provider == "mock":
        return MockProvider(cfg.provider_dim)
    return HttpProvider(HttpProviderConfig(
        completion_url=cfg.completion_url, embedding_url=cfg.embedding_url,
        completion_model=cfg.completion_model, embedding_model=cfg.embedding_model,
        embedding_dim=cfg.provider_dim, api_key_env=cfg.api_key_env, auth_header=cfg.auth_header,
        rate_per_second=cfg.rate_per_second))


def load_features(path, log: EventLog, dim: int) -> tuple:
    """Optional node features: lines ``user|item <tab> id <tab> comma-separated values``."""
    users = np.zeros((log.num_users, dim))
    items = np.zeros((log.num_items, dim))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            kind, node, values = line.rstrip("\n").split("\t")
            vec = np.array([float(v) for v in values.split(",")])
            if vec.shape != (dim,):
                raise ValueError(f"{path}:{lineno}: feature length {vec.size}, expected {dim}")
            index, table = (log.user_index, users) if kind == "user" else (log.item_index, items)
            if node in index:
                table[index[node]] = vec
    return users, items


def build_model(cfg: RunConfig, data: Dataset) -> DynLLM:
    """Model for ``cfg.variant``; LLM variants read raw embeddings from the cache only."""
    features = (None, None)
    if cfg.features:
        features = load_features(cfg.features, data.log, cfg.node_dim)
    if cfg.variant == "no_llm":
        return DynLLM(cfg, data.graph, user_features=features[0], item_features=features[1])
    cache = ProfileCache(cfg.cache_dir)
    profiles = load_profile_table(data.log, cache, cfg.refresh_every, cfg.provider_dim)
    item_raw = load_item_table(data.log, cache, cfg.provider_dim)
    return DynLLM(cfg, data.graph, item_raw, profiles, features[0], features[1])


def run_augment(cfg: RunConfig, data: Dataset, provider=None):
    provider = provider if provider is not None else make_provider(cfg)
    return augment(data.log, provider, ProfileCache(cfg.cache_dir), cfg.refresh_every,
                   cfg.retries, cfg.max_in_flight)


def run_variant(cfg: RunConfig, data: Dataset, on_epoch=None) -> tuple:
    """Train and evaluate one variant; returns ``(model, fit result, report, facet weights)``."""
    model = build_model(cfg, data)
    weights = FacetWeights(model.facets)
    result, report = train_and_evaluate(model, data.splits, cfg, on_epoch, weights)
    return model, result, report, weights
