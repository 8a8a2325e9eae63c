"""Flat ``key=value`` run configuration with range validation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

VARIANTS = ("full", "no_llm", "no_distill", "no_crd", "no_int", "no_ctg", "no_brd")
PROVIDERS = ("mock", "live")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data and provider
    dataset: str = ""
    provider: str = "mock"
    cache_dir: str = "cache"
    provider_dim: int = 1536
    refresh_every: int = 20
    retries: int = 2
    max_in_flight: int = 4
    rate_per_second: float = 0.0
    completion_url: str = ""
    embedding_url: str = ""
    completion_model: str = ""
    embedding_model: str = ""
    api_key_env: str = "DYNLLM_API_KEY"
    auth_header: str = "Authorization"
    features: str = ""
    # model
    variant: str = "full"
    node_dim: int = 128
    item_dynamic_dim: int = 64
    time_freqs: int = 64
    mlp_hidden: int = 256
    layers: int = 2
    heads: int = 2
    n_user: int = 5
    n_item: int = 2
    facet_dim: int = 128
    r: int = 112
    fusion_layers: int = 2
    dropout: float = 0.1
    time_scale: float = 86400.0
    # training
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch: int = 2048
    memory_chunk: int = 0
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    ks: tuple = (10, 20, 30)
    split: tuple = (0.7, 0.15, 0.15)

    @property
    def item_static_dim(self) -> int:
        return self.node_dim - self.item_dynamic_dim

    def validate(self) -> "RunConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.provider in PROVIDERS, f"provider must be one of {PROVIDERS}, got {self.provider!r}")
        need(self.variant in VARIANTS, f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("provider_dim", "refresh_every", "max_in_flight", "node_dim", "item_dynamic_dim",
                     "time_freqs", "mlp_hidden", "layers", "heads", "n_user", "n_item", "facet_dim",
                     "fusion_layers", "batch", "patience", "max_epochs"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1, got {getattr(self, name)}")
        need(self.retries >= 0, f"retries must be >= 0, got {self.retries}")
        need(self.memory_chunk >= 0, f"memory_chunk must be >= 0, got {self.memory_chunk}")
        need(self.item_dynamic_dim < self.node_dim,
             f"item_dynamic_dim={self.item_dynamic_dim} must be < node_dim={self.node_dim}")
        need(self.node_dim % self.heads == 0, f"heads={self.heads} must divide node_dim={self.node_dim}")
        need(1 <= self.r <= self.facet_dim, f"r={self.r} outside [1, facet_dim={self.facet_dim}]")
        need(0.0 <= self.dropout < 1.0, f"dropout={self.dropout} outside [0, 1)")
        need(self.lr > 0, f"lr must be > 0, got {self.lr}")
        need(self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}")
        need(self.time_scale > 0, f"time_scale must be > 0, got {self.time_scale}")
        need(self.rate_per_second >= 0, "rate_per_second must be >= 0")
        need(len(self.ks) >= 1 and all(k >= 1 for k in self.ks), f"ks must be positive, got {self.ks}")
        need(len(self.split) == 3 and all(x > 0 for x in self.split) and abs(sum(self.split) - 1) < 1e-9,
             f"split must be three positive ratios summing to 1, got {self.split}")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def digest(self, dataset_digest: str = "") -> str:
        h = hashlib.sha256(self.to_text().encode("utf-8"))
        h.update(dataset_digest.encode("ascii"))
        return h.hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(name: str, text: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown configuration key {name!r}")
    default = getattr(_DEFAULTS, name)
    text = text.strip()
    try:
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(x) for x in text.split(",") if x.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        return type(default)(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} ({exc})") from None


def parse_pairs(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` strings on top of ``base`` and validate the result."""
    changes = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        changes[key.strip()] = _coerce(key.strip(), value)
    return dataclasses.replace(base or RunConfig(), **changes).validate()


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return parse_pairs(pairs, base)


def load_config(path, overrides=(), base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_text(fh.read(), base)
    return parse_pairs(overrides, cfg)


# Small dimensions for laptop-scale runs on the synthetic benchmark.
DESK = dict(node_dim=32, item_dynamic_dim=16, time_freqs=8, mlp_hidden=64, facet_dim=32, r=28,
            provider_dim=256, batch=256, memory_chunk=64, lr=3e-3, max_epochs=12)


def desk_config(**changes) -> RunConfig:
    return dataclasses.replace(RunConfig(), **{**DESK, **changes}).validate()

