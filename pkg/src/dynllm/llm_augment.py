"""Profile prompts, LLM providers, the on-disk profile cache and facet/item encoders.

Providers expose two calls: ``complete(prompt) -> str`` and
``embed(text) -> vector``. :class:`MockProvider` is deterministic and
offline; :class:`HttpProvider` talks to OpenAI-compatible endpoints whose
URLs, model names and auth header are all configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import diffmath as dm
from .ctdg_store import EventLog
from .diffmath import ParameterStore, Tensor

log = logging.getLogger(__name__)

FACETS = ("crd", "int", "ctg", "brd")
FACET_NAMES = {
    "crd": "crowd segments",
    "int": "personal interests",
    "ctg": "preferred categories",
    "brd": "favored brands",
}


class PromptError(ValueError):
    pass


class ProfileParseError(ValueError):
    pass


class ProviderError(RuntimeError):
    def __init__(self, message: str, exhausted: bool = False):
        super().__init__(message)
        self.exhausted = exhausted


class MissingCacheEntry(KeyError):
    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"profile cache has no entry for key {self.key!r}"


# -- prompts ----------------------------------------------------------------

_TITLE_LINE = re.compile(r"^\s*(\d+)\. (.*)$")


def build_prompt(user, titles: Sequence[str], window: tuple) -> str:
    """Deterministic profiling prompt; titles are listed oldest first."""
    if not titles:
        raise PromptError(f"user {user}: no purchases in window, nothing to profile")
    start, end = window
    lines = [
        "You are an e-commerce analyst. From the purchase history below, describe the shopper.",
        f"User: {user}",
        f"Window: {start!r} to {end!r}",
        "Purchased item titles (oldest first, most recent last):",
    ]
    lines += [f"{k}. {t}" for k, t in enumerate(titles, start=1)]
    lines += [
        "",
        "Reply with exactly one block in this format and nothing else:",
        "<profile>",
    ]
    lines += [f"{f}: <{FACET_NAMES[f]}, one short phrase>" for f in FACETS]
    lines += ["</profile>"]
    return "\n".join(lines) + "\n"


def prompt_titles(prompt: str) -> list:
    """Recover the title list from a prompt built by :func:`build_prompt`."""
    body = prompt.split("Purchased item titles", 1)[-1].split("\nReply with", 1)[0]
    return [m.group(2) for m in map(_TITLE_LINE.match, body.splitlines()) if m]


def parse_profile(text: str) -> dict:
    """Extract the four facet fields; any order, case-insensitive labels."""
    m = re.search(r"<profile>(.*?)</profile>", text, flags=re.S | re.I)
    body = m.group(1) if m else text
    found = {}
    for line in body.splitlines():
        key, sep, value = line.partition(":")
        key = key.strip().lower()
        if sep and key in FACETS and value.strip():
            found[key] = value.strip()
    missing = [f for f in FACETS if f not in found]
    if missing:
        raise ProfileParseError(f"completion lacks facet field(s): {', '.join(missing)}")
    return found


@dataclass
class GeneratedProfile:
    facets: dict
    retries: int = 0


def generate_profiles(prompt: str, provider, retries: int = 2) -> GeneratedProfile:
    """Ask the provider for a profile, re-asking up to ``retries`` times on parse failures."""
    last = None
    for attempt in range(retries + 1):
        text = provider.complete(prompt)
        try:
            return GeneratedProfile(parse_profile(text), retries=attempt)
        except ProfileParseError as exc:
            last = exc
            log.warning("unparseable completion (attempt %d/%d): %s", attempt + 1, retries + 1, exc)
    raise last


def embed_text(text: str, provider) -> np.ndarray:
    if not text:
        raise ValueError("cannot embed empty text")
    vec = np.asarray(provider.embed(text), dtype=np.float64)
    if vec.shape != (provider.embedding_dim,):
        raise ProviderError(f"embedding has shape {vec.shape}, expected ({provider.embedding_dim},)")
    return vec


# -- providers --------------------------------------------------------------

class LlmProvider(Protocol):
    embedding_dim: int

    def complete(self, prompt: str) -> str: ...

    def embed(self, text: str) -> np.ndarray: ...


class MockProvider:
    """Offline provider.

    Completions are built from word frequencies in the prompt's titles
    (alphabetic tokens only, ranked by count then alphabetically), so
    shoppers with similar histories get identical facet texts. Embeddings
    are unit-norm Gaussian vectors seeded by SHA-256 of the text.
    """

    def __init__(self, embedding_dim: int = 1536):
        self.embedding_dim = embedding_dim
        self.calls = Counter()
        self._lock = threading.Lock()

    def _count(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1

    def complete(self, prompt: str) -> str:
        self._count("complete")
        words = Counter()
        for title in prompt_titles(prompt):
            words.update(w for w in re.findall(r"[a-z]+", title.lower()))
        ranked = [w for w, _ in sorted(words.items(), key=lambda kv: (-kv[1], kv[0]))]
        w = (ranked + ["general", "assorted", "misc"])[:3]
        return (
            "<profile>\n"
            f"crd: {w[0]} shoppers\n"
            f"int: {w[0]}, {w[1]} and {w[2]}\n"
            f"ctg: {w[1]}\n"
            f"brd: {w[0]}\n"
            "</profile>\n"
        )

    def embed(self, text: str) -> np.ndarray:
        self._count("embed")
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:16], "little")
        v = np.random.default_rng(seed).standard_normal(self.embedding_dim)
        return v / np.linalg.norm(v)


class TokenBucket:
    """Thread-safe token bucket; ``acquire`` blocks until a token is free."""

    def __init__(self, rate: float, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        self.rate, self.burst = rate, burst
        self.tokens = float(burst)
        self.clock, self.sleep = clock, sleep
        self.stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.burst, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


@dataclass
class HttpProviderConfig:
    completion_url: str
    embedding_url: str
    completion_model: str
    embedding_model: str
    embedding_dim: int = 1536
    api_key_env: str = "DYNLLM_API_KEY"
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    timeout: float = 60.0
    max_attempts: int = 5
    backoff: float = 1.0
    rate_per_second: float = 0.0


class HttpProvider:
    """OpenAI-compatible chat-completion and embedding endpoints over HTTP."""

    RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, cfg: HttpProviderConfig, client=None, sleep=time.sleep):
        import httpx

        self.cfg = cfg
        self.embedding_dim = cfg.embedding_dim
        self.client = client if client is not None else httpx.Client(timeout=cfg.timeout)
        self.sleep = sleep
        self.bucket = TokenBucket(cfg.rate_per_second, burst=1, sleep=sleep)
        self._httpx = httpx

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers[self.cfg.auth_header] = f"{self.cfg.auth_scheme} {key}".strip()
        return headers

    def _post(self, url: str, payload: dict) -> dict:
        for attempt in range(self.cfg.max_attempts):
            self.bucket.acquire()
            try:
                resp = self.client.post(url, json=payload, headers=self._headers())
            except self._httpx.TransportError as exc:
                err = f"transport error: {exc}"
            else:
                if resp.status_code < 300:
                    return resp.json()
                if resp.status_code not in self.RETRY_STATUS:
                    raise ProviderError(f"{url} answered {resp.status_code}: {resp.text[:200]}")
                err = f"{url} answered {resp.status_code}"
            if attempt + 1 < self.cfg.max_attempts:
                self.sleep(self.cfg.backoff * 2 ** attempt)
        raise ProviderError(f"giving up after {self.cfg.max_attempts} attempts ({err})", exhausted=True)

    def complete(self, prompt: str) -> str:
        body = self._post(self.cfg.completion_url, {
            "model": self.cfg.completion_model,
            "messages": [{"role": "user", "content": prompt}],
        })
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected completion payload: {str(body)[:200]}") from exc

    def embed(self, text: str) -> np.ndarray:
        body = self._post(self.cfg.embedding_url, {"model": self.cfg.embedding_model, "input": text})
        try:
            return np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected embedding payload: {str(body)[:200]}") from exc


# -- cache ------------------------------------------------------------------

def profile_key(user_id: str, window_end: float, facet: str) -> tuple:
    return ("profile", user_id, repr(float(window_end)), facet)


def title_key(title: str) -> tuple:
    return ("title", hashlib.sha256(title.encode("utf-8")).hexdigest())


@dataclass
class CacheEntry:
    text: str
    vector: np.ndarray


class ProfileCache:
    """Content-addressed store: one JSON document per key, written atomically."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _digest(key) -> str:
        return hashlib.sha256(json.dumps(list(key)).encode("utf-8")).hexdigest()

    def path(self, key) -> Path:
        d = self._digest(key)
        return self.root / d[:2] / f"{d}.json"

    @staticmethod
    def encode(key, text: str, vector: np.ndarray) -> bytes:
        vec = np.asarray(vector, dtype="<f8")
        doc = {"key": list(key), "text": text, "dim": int(vec.size), "vector": vec.tobytes().hex()}
        return (json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n").encode("utf-8")

    def put(self, key, text: str, vector: np.ndarray) -> None:
        path = self.path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.encode(key, text, vector))
        os.replace(tmp, path)

    def get_bytes(self, key) -> bytes | None:
        try:
            return self.path(key).read_bytes()
        except FileNotFoundError:
            return None

    def get(self, key) -> CacheEntry | None:
        """Entry for ``key``, or ``None`` on a miss; corrupt entries are deleted."""
        raw = self.get_bytes(key)
        if raw is None:
            return None
        try:
            doc = json.loads(raw.decode("utf-8"))
            if doc["key"] != list(key):
                raise ValueError("key mismatch")
            vec = np.frombuffer(bytes.fromhex(doc["vector"]), dtype="<f8").astype(np.float64)
            if vec.size != doc["dim"]:
                raise ValueError("vector length mismatch")
            return CacheEntry(doc["text"], vec)
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            log.warning("discarding corrupt cache entry %s (%s)", self.path(key), exc)
            self.path(key).unlink(missing_ok=True)
            return None

    def __contains__(self, key) -> bool:
        return self.get(key) is not None

    def count(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json"))


# -- augmentation schedule --------------------------------------------------

@dataclass
class RefreshPoint:
    user: int
    user_id: str
    ordinal: int          # 1-based index of the triggering event in the user's history
    window_start: float
    window_end: float
    titles: list = field(default_factory=list)


def refresh_points(log: EventLog, refresh_every: int = 20) -> list:
    """Profile refresh schedule: every ``refresh_every``-th event of each user.

    Each window holds the most recent ``min(B, history)`` titles up to and
    including the triggering event.
    """
    if refresh_every < 1:
        raise ValueError("refresh_every must be >= 1")
    history: dict = {}
    points = []
    for e in log:
        h = history.setdefault(e.user_id, [])
        h.append(e)
        if len(h) % refresh_every == 0:
            window = h[-refresh_every:]
            points.append(RefreshPoint(log.user_index[e.user_id], e.user_id, len(h),
                                       window[0].timestamp, e.timestamp, [w.title for w in window]))
    return points


@dataclass
class ProfileBundle:
    user_id: str
    window_end: float
    texts: dict
    raw: dict
    transformed: dict | None = None


@dataclass
class AugmentReport:
    refresh_points: int = 0
    titles: int = 0
    generated: int = 0
    embedded_titles: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _augment_point(p: RefreshPoint, provider, cache: ProfileCache, retries: int) -> ProfileBundle | None:
    keys = {f: profile_key(p.user_id, p.window_end, f) for f in FACETS}
    if all(k in cache for k in keys.values()):
        return None
    prompt = build_prompt(p.user_id, p.titles, (p.window_start, p.window_end))
    gen = generate_profiles(prompt, provider, retries)
    raw = {f: embed_text(gen.facets[f], provider) for f in FACETS}
    for f in FACETS:
        cache.put(keys[f], gen.facets[f], raw[f])
    return ProfileBundle(p.user_id, p.window_end, gen.facets, raw)


def _augment_title(title: str, provider, cache: ProfileCache) -> bool:
    key = title_key(title)
    if key in cache:
        return False
    cache.put(key, title, embed_text(title, provider))
    return True


def augment(log: EventLog, provider, cache: ProfileCache, refresh_every: int = 20,
            retries: int = 2, max_in_flight: int = 4) -> AugmentReport:
    """Fill the cache for every refresh point and every distinct item title.

    Already-cached keys are skipped, so an interrupted run can be resumed.
    Failures are collected rather than raised.
    """
    points = refresh_points(log, refresh_every)
    titles = sorted({t for t in log.item_titles() if t})
    report = AugmentReport(refresh_points=len(points), titles=len(titles))
    lock = threading.Lock()

    def run_point(p):
        try:
            done = _augment_point(p, provider, cache, retries)
        except (ProviderError, ProfileParseError, PromptError, ValueError) as exc:
            with lock:
                report.failures.append({"kind": "profile", "user_id": p.user_id,
                                        "window_end": p.window_end, "error": str(exc)})
            return
        with lock:
            if done is None:
                report.skipped += 1
            else:
                report.generated += 1

    def run_title(t):
        try:
            fetched = _augment_title(t, provider, cache)
        except (ProviderError, ValueError) as exc:
            with lock:
                report.failures.append({"kind": "title", "title": t, "error": str(exc)})
            return
        with lock:
            if fetched:
                report.embedded_titles += 1
            else:
                report.skipped += 1

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        list(pool.map(run_point, points))
        list(pool.map(run_title, titles))
    report.failures.sort(key=lambda f: json.dumps(f, sort_keys=True))
    return report


# -- lookup tables used by the model ----------------------------------------

class ProfileTable:
    """Raw facet embeddings per refresh point, looked up causally by (user, t).

    Row 0 of :attr:`raw` is the all-zero "no profile yet" bundle.
    """

    def __init__(self, num_users: int, dim: int):
        self.dim = dim
        self._rows = [np.zeros((len(FACETS), dim))]
        self._times = [[] for _ in range(num_users)]
        self._index = [[] for _ in range(num_users)]
        self.raw = None
        self.texts = [None]

    def add(self, user: int, window_end: float, raw: np.ndarray, texts=None) -> None:
        self._rows.append(np.asarray(raw, dtype=np.float64))
        self.texts.append(texts)
        self._times[user].append(window_end)
        self._index[user].append(len(self._rows) - 1)
        self.raw = None

    def finalize(self) -> "ProfileTable":
        self.raw = np.stack(self._rows)
        self._times = [np.asarray(t) for t in self._times]
        self._index = [np.asarray(i, dtype=np.int64) for i in self._index]
        return self

    def lookup(self, users, times) -> np.ndarray:
        """Row of the latest bundle with ``window_end < t`` (0 if none)."""
        out = np.zeros(len(users), dtype=np.int64)
        for k, (u, t) in enumerate(zip(np.asarray(users).tolist(), np.asarray(times).tolist())):
            ts = self._times[u]
            j = int(np.searchsorted(ts, t, side="left"))
            if j:
                out[k] = self._index[u][j - 1]
        return out


def load_profile_table(log: EventLog, cache: ProfileCache, refresh_every: int, dim: int) -> ProfileTable:
    table = ProfileTable(log.num_users, dim)
    for p in refresh_points(log, refresh_every):
        vecs, texts = [], {}
        for f in FACETS:
            key = profile_key(p.user_id, p.window_end, f)
            entry = cache.get(key)
            if entry is None:
                raise MissingCacheEntry(key)
            if entry.vector.size != dim:
                raise ProviderError(f"cached vector for {key} has dim {entry.vector.size}, expected {dim}")
            vecs.append(entry.vector)
            texts[f] = entry.text
        table.add(p.user, p.window_end, np.stack(vecs), texts)
    return table.finalize()


def load_item_table(log: EventLog, cache: ProfileCache, dim: int, overrides: dict | None = None) -> np.ndarray:
    """Frozen raw title embeddings, one row per item id.

    ``overrides`` maps item ids to externally supplied raw vectors (required
    for items with empty titles).
    """
    overrides = overrides or {}
    out = np.zeros((log.num_items, dim))
    for k, (item_id, title) in enumerate(zip(log.item_ids(), log.item_titles())):
        if item_id in overrides:
            out[k] = overrides[item_id]
            continue
        if not title:
            raise ValueError(f"item {item_id!r} has no title and no supplied static embedding")
        entry = cache.get(title_key(title))
        if entry is None:
            raise MissingCacheEntry(title_key(title))
        out[k] = entry.vector
    return out


# -- trainable encoders -----------------------------------------------------

class FacetEncoder:
    """Per-facet ``dropout(tanh(raw W_f + b_f))``; the four weight sets are slices of ``llm.facet.W``."""

    def __init__(self, params: ParameterStore, provider_dim: int, facet_dim: int, dropout: float = 0.1):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.dropout = dropout
        self.W = params.uniform("llm.facet.W", (len(FACETS), provider_dim, facet_dim), fan_in=1)
        self.b = params.zeros("llm.facet.b", (len(FACETS), facet_dim))

    def transform(self, raw, facet: str, training: bool = False, rng=None) -> Tensor:
        k = FACETS.index(facet)
        W = dm.take_rows(self.W, k)
        b = dm.take_rows(self.b, k)
        return dm.dropout(dm.tanh(dm.affine(raw, W, b)), self.dropout, rng, training)

    def transform_all(self, raw: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """(B, 4, P) raw embeddings -> (B, 4, facet_dim)."""
        return dm.dropout(dm.tanh(dm.batched_affine(raw, self.W, self.b)), self.dropout, rng, training)


class ItemStaticEncoder:
    """``dropout(tanh(raw W + b))`` from the frozen title embedding to the static half."""

    def __init__(self, params: ParameterStore, provider_dim: int, static_dim: int, dropout: float = 0.1):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.dropout = dropout
        self.W = params.uniform("llm.item.W", (provider_dim, static_dim), fan_in=1)
        self.b = params.zeros("llm.item.b", (static_dim,))

    def __call__(self, raw, training: bool = False, rng=None) -> Tensor:
        return dm.dropout(dm.tanh(dm.affine(raw, self.W, self.b)), self.dropout, rng, training)


def item_static_embedding(title: str, provider, encoder: ItemStaticEncoder) -> Tensor:
    """Embed one title and map it to the static item half (eval mode)."""
    out = encoder(embed_text(title, provider)[None, :])
    return dm.reshape(out, (out.shape[-1],))
