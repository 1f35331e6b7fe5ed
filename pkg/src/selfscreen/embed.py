"""Sentence embeddings for descriptions (384-d).

Three interchangeable providers:

* ``PrecomputedEmbeddings``: lookup by sample_id in a JSONL embedding file
  (e.g. produced offline with a MiniLM sentence encoder).
* ``RemoteEmbedder``: an embeddings-style HTTP endpoint.
* ``HashEmbedder``: signed feature hashing, deterministic and offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import numpy as np

from selfscreen.errors import (
    DuplicateIdError,
    MissingEmbeddingError,
    NumericError,
    ProtocolError,
    ValidationError,
)
from selfscreen.vlm import JsonHttpClient

logger = logging.getLogger(__name__)

DIM = 384


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise NumericError(f"cannot normalize a vector with norm {norm}")
    return v / norm


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    sample_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.shape != (DIM,):
            raise ProtocolError(
                f"embedding for {self.sample_id!r} has shape {arr.shape}, expected ({DIM},)"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"embedding for {self.sample_id!r} has non-finite components")
        if self.normalized and abs(np.linalg.norm(arr) - 1.0) > 1e-6:
            raise ValidationError(f"embedding for {self.sample_id!r} flagged normalized but norm != 1")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.sample_id == other.sample_id and np.array_equal(self.values, other.values)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _bucket_and_sign(token: str) -> tuple[int, float]:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    n = int.from_bytes(h, "little")
    return (n >> 1) % DIM, (1.0 if n & 1 else -1.0)


def hash_embed(text: str, sample_id: str = "") -> EmbeddingVector:
    """Signed feature hashing of lowercase whitespace tokens, L2-normalized."""
    tokens = tokenize(text or "")
    if not tokens:
        raise ValidationError("text has no tokens to embed")
    v = np.zeros(DIM)
    for tok in tokens:
        bucket, sign = _bucket_and_sign(tok)
        v[bucket] += sign
    return EmbeddingVector(l2_normalize(v), sample_id, normalized=True)


class EmbeddingProvider(Protocol):
    name: str

    def embed(self, text: str | None, sample_id: str = "") -> np.ndarray: ...


class HashEmbedder:
    name = "hash"

    def embed(self, text, sample_id=""):
        return hash_embed(text, sample_id).values


class PrecomputedEmbeddings:
    def __init__(self, vectors: Mapping[str, EmbeddingVector], source: str = ""):
        self.vectors = dict(vectors)
        self.name = f"precomputed:{source}" if source else "precomputed"

    @classmethod
    def from_file(cls, path: str | Path) -> "PrecomputedEmbeddings":
        return cls(load_embeddings(path), Path(path).name)

    def embed(self, text, sample_id=""):
        try:
            return self.vectors[sample_id].values
        except KeyError:
            raise MissingEmbeddingError(sample_id) from None


class RemoteEmbedder:
    """Embeddings endpoint: POST {model, input} -> {data: [{embedding: [...]}]}."""

    def __init__(self, model: str = "all-MiniLM-L6-v2", api_base: str | None = None,
                 api_key: str | None = None, **http_kwargs):
        self.model = model
        self.http = JsonHttpClient(api_base, api_key, **http_kwargs)
        self.name = f"remote:{model}"

    def embed(self, text, sample_id=""):
        if not text:
            raise ValidationError("cannot embed empty text")
        body = self.http.post_json("embeddings", {"model": self.model, "input": text})
        try:
            vec = body["data"][0]["embedding"] if "data" in body else body["embedding"]
        except (KeyError, IndexError, TypeError):
            raise ProtocolError("embeddings response lacks data[0].embedding") from None
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (DIM,):
            raise ProtocolError(f"remote embedding has {arr.size} components, expected {DIM}")
        return arr


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    kind: str = "hash"  # "hash" | "precomputed" | "remote"
    path: str | None = None
    model: str = "all-MiniLM-L6-v2"
    api_base: str | None = None
    api_key: str | None = field(default=None, repr=False)
    normalize: bool = True

    def identity(self) -> dict:
        return {"kind": self.kind, "path": self.path, "model": self.model if self.kind == "remote" else None,
                "normalize": self.normalize}


def make_embedder(cfg: EmbeddingProviderConfig) -> EmbeddingProvider:
    if cfg.kind == "hash":
        return HashEmbedder()
    if cfg.kind == "precomputed":
        if not cfg.path:
            raise ValidationError("precomputed embeddings need a file path")
        return PrecomputedEmbeddings.from_file(cfg.path)
    if cfg.kind == "remote":
        return RemoteEmbedder(cfg.model, cfg.api_base, cfg.api_key)
    raise ValidationError(f"unknown embedding provider kind {cfg.kind!r}")


def embed_text(
    text: str | None,
    provider: EmbeddingProvider,
    sample_id: str = "",
    normalize: bool = True,
) -> EmbeddingVector:
    if not isinstance(provider, PrecomputedEmbeddings) and not (text and text.strip()):
        raise ValidationError("cannot embed empty text")
    values = np.asarray(provider.embed(text, sample_id), dtype=np.float64)
    if values.shape != (DIM,):
        raise ProtocolError(f"provider {provider.name} returned {values.size} components, expected {DIM}")
    if normalize:
        values = l2_normalize(values)
    return EmbeddingVector(values, sample_id, normalized=normalize)


def embed_all(
    items: Iterable[tuple[str, str | None]],
    provider: EmbeddingProvider,
    normalize: bool = True,
    concurrency: int = 1,
) -> dict[str, EmbeddingVector]:
    """Embed ``(sample_id, text)`` pairs; result order follows the input."""
    items = list(items)
    if concurrency < 1:
        raise ValidationError("concurrency must be >= 1")

    def one(item):
        sid, text = item
        return embed_text(text, provider, sid, normalize)

    if concurrency == 1:
        vectors = [one(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            vectors = list(pool.map(one, items))
    return {v.sample_id: v for v in vectors}


def save_embeddings(vectors: Iterable[EmbeddingVector], path: str | Path) -> None:
    # json float repr is the shortest exact round-trip representation
    seen = set()
    with open(path, "w", encoding="utf-8") as fh:
        for v in vectors:
            if v.sample_id in seen:
                raise DuplicateIdError(v.sample_id, str(path))
            seen.add(v.sample_id)
            fh.write(json.dumps({"sample_id": v.sample_id, "vector": v.values.tolist()}) + "\n")


def load_embeddings(path: str | Path) -> dict[str, EmbeddingVector]:
    out: dict[str, EmbeddingVector] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                sid, vec = str(rec["sample_id"]), rec["vector"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{where}: malformed embedding record ({exc})") from None
            if not isinstance(vec, list) or len(vec) != DIM:
                n = len(vec) if isinstance(vec, list) else "non-list"
                raise ValidationError(f"{where}: record {sid!r} has {n} components, expected {DIM}")
            if sid in out:
                raise DuplicateIdError(sid, where)
            out[sid] = EmbeddingVector(vec, sid)
    return out
