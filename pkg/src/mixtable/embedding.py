"""Text embeddings for descriptions, feature names and category sentences.

Two providers are available: a deterministic hash provider (no model needed,
used for tests and offline work) and an HTTP provider that talks to a batch
embedding endpoint. Both sit behind :class:`Embedder`, which keeps an
append-only binary cache on disk.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, ProviderError

log = logging.getLogger(__name__)

TOKEN_ENV = "MIXTABLE_EMBED_TOKEN"
DEFAULT_DIM = 1024


def category_sentence(feature_name: str, category: str) -> str:
    if not feature_name or not category:
        raise ConfigError("feature name and category must both be nonempty")
    return f"{feature_name} is {category}"


def text_key(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


class HashProvider:
    """Unit vectors drawn from a Philox stream keyed by SHA-256 of the text."""

    name = "hash"

    def __init__(self, dim=DEFAULT_DIM):
        if dim < 1:
            raise ConfigError("embedding dimension must be positive")
        self.dim = dim

    def embed_batch(self, texts):
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            key = int.from_bytes(text_key(text), "little")
            rng = np.random.Generator(np.random.Philox(key=key & ((1 << 128) - 1)))
            v = rng.standard_normal(self.dim)
            out[i] = v / np.linalg.norm(v)
        return out


class RemoteProvider:
    """POST {endpoint}/embed with {"texts": [...]}; expects {"embeddings": [[...]]}."""

    name = "remote"

    def __init__(self, endpoint, dim=DEFAULT_DIM, token=None, retries=3, backoff=0.5, timeout=30.0, transport=None):
        import httpx

        if not endpoint:
            raise ConfigError("remote provider needs an endpoint")
        self.endpoint = endpoint.rstrip("/")
        self.dim = dim
        self.retries = retries
        self.backoff = backoff
        token = token if token is not None else os.environ.get(TOKEN_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)
        self._httpx = httpx

    def embed_batch(self, texts):
        url = f"{self.endpoint}/embed"
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json={"texts": list(texts)})
            except self._httpx.HTTPError as exc:
                last = f"network error: {exc}"
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, last)
                continue
            if resp.status_code in (401, 403):
                raise ProviderError(f"embedding endpoint rejected credentials (HTTP {resp.status_code}); set {TOKEN_ENV}")
            if resp.status_code >= 400:
                last = f"HTTP {resp.status_code}"
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, last)
                continue
            try:
                vectors = np.asarray(resp.json()["embeddings"], dtype=np.float32)
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderError(f"malformed embedding response: {exc}") from exc
            if vectors.shape != (len(texts), self.dim):
                raise ProviderError(
                    f"embedding dimension mismatch: expected {(len(texts), self.dim)}, got {vectors.shape}"
                )
            return vectors
        raise ProviderError(f"embedding endpoint failed after {self.retries + 1} attempts: {last}")


class EmbeddingCache:
    """Append-only file of ``[sha256][u32 dim][dim x f32]`` records, little endian."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._entries.update(read_cache_file(self.path))

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def get(self, key):
        return self._entries.get(key)

    def put_many(self, items):
        """Insert ``(key, vector)`` pairs not already present; returns how many were new."""
        with self._lock:
            fresh = [(k, np.asarray(v, dtype="<f4")) for k, v in items if k not in self._entries]
            if not fresh:
                return 0
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "ab") as fh:
                    for k, v in fresh:
                        fh.write(k)
                        fh.write(struct.pack("<I", v.size))
                        fh.write(v.tobytes())
            for k, v in fresh:
                v = v.astype(np.float32)
                v.setflags(write=False)
                self._entries[k] = v
            return len(fresh)


def read_cache_file(path):
    entries = {}
    raw = Path(path).read_bytes()
    pos = 0
    while pos < len(raw):
        if pos + 36 > len(raw):
            raise ProviderError(f"{path}: truncated cache record at byte {pos}")
        key = raw[pos:pos + 32]
        (dim,) = struct.unpack_from("<I", raw, pos + 32)
        pos += 36
        end = pos + 4 * dim
        if end > len(raw):
            raise ProviderError(f"{path}: truncated cache record at byte {pos}")
        v = np.frombuffer(raw[pos:end], dtype="<f4").astype(np.float32)
        v.setflags(write=False)
        entries.setdefault(key, v)
        pos = end
    return entries


class Embedder:
    """Cached text embedding with a fixed output dimension."""

    def __init__(self, provider, cache: EmbeddingCache | None = None, batch_size=64):
        self.provider = provider
        self.dim = provider.dim
        self.cache = cache if cache is not None else EmbeddingCache()
        self.batch_size = batch_size

    def ensure(self, texts):
        """Embed every uncached text; returns the number of new cache entries."""
        todo, seen = [], set()
        for text in texts:
            if not text:
                raise ConfigError("cannot embed an empty string")
            key = text_key(text)
            if key not in self.cache and key not in seen:
                seen.add(key)
                todo.append(text)
        added = 0
        for lo in range(0, len(todo), self.batch_size):
            chunk = todo[lo:lo + self.batch_size]
            vectors = self.provider.embed_batch(chunk)
            if vectors.shape[1] != self.dim:
                raise ProviderError(f"provider returned dimension {vectors.shape[1]}, expected {self.dim}")
            added += self.cache.put_many(zip((text_key(t) for t in chunk), vectors))
        return added

    def embed(self, text) -> np.ndarray:
        key = text_key(text)
        v = self.cache.get(key)
        if v is None:
            self.ensure([text])
            v = self.cache.get(key)
        if v.size != self.dim:
            raise ProviderError(f"cached embedding for {text!r} has dimension {v.size}, expected {self.dim}")
        return v

    def embed_many(self, texts):
        texts = list(texts)
        self.ensure(texts)
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.embed(t) for t in texts])


def build_category_matrix(feature, embedder: Embedder) -> np.ndarray:
    """Rows are embeddings of "<name> is <category>" in schema category order."""
    if not feature.is_categorical:
        raise ConfigError(f"feature {feature.name!r} is not categorical")
    return embedder.embed_many(category_sentence(feature.name, c) for c in feature.categories)


def bundle_texts(bundle):
    texts = [bundle.description] if bundle.description else []
    for f in bundle.features:
        texts.append(f.name)
        if f.is_categorical:
            texts.extend(category_sentence(f.name, c) for c in f.categories)
    return texts


def cache_warm(meta, embedder: Embedder) -> int:
    """Embed every description, feature name and category sentence in ``meta``."""
    texts = []
    for bundle in meta:
        texts.extend(bundle_texts(bundle))
    try:
        return embedder.ensure(texts)
    except ProviderError as exc:
        missing = [t for t in texts if text_key(t) not in embedder.cache]
        raise ProviderError(f"{exc}; {len(missing)} text(s) still uncached, e.g. {missing[:5]}") from exc


def make_provider(kind="hash", dim=DEFAULT_DIM, endpoint=None, **kwargs):
    if kind == "hash":
        return HashProvider(dim)
    if kind == "remote":
        return RemoteProvider(endpoint, dim=dim, **kwargs)
    raise ConfigError(f"unknown embedding provider {kind!r}")
