"""Continuous-time dynamic-graph recommender with LLM-generated user profiles."""

from .config import ConfigError, RunConfig, desk_config
from .ctdg_store import EventLog, InteractionEvent, TemporalGraph, chronological_split, ingest_events
from .llm_augment import FACETS, MockProvider, ProfileCache
from .model import DynLLM
from .train_eval import MetricsReport, evaluate, fit

__all__ = [
    "ConfigError", "RunConfig", "desk_config",
    "EventLog", "InteractionEvent", "TemporalGraph", "chronological_split", "ingest_events",
    "FACETS", "MockProvider", "ProfileCache", "DynLLM", "MetricsReport", "evaluate", "fit",
]
__version__ = "0.1.0"
