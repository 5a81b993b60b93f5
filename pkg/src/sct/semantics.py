"""Relation descriptions and their vector embeddings.

Every relation gets a one-paragraph natural-language definition, either
from a chat model (remote mode, cached to JSONL so repeat runs are
free) or from a deterministic offline fallback. Definitions are then
embedded; offline, a hashed character-trigram encoder keeps the whole
pipeline reproducible with no network at all.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import requests

API_KEY_ENV = "SCT_API_KEY"

ENHANCEMENT_TASK = (
    "Task: Generate a canonical and descriptive definition for a knowledge "
    "graph relation by following the provided examples. The definition must "
    "clearly explain the semantic relationship between a head entity and a "
    "tail entity in a neutral, factual sentence.")
ENHANCEMENT_EXAMPLE = (
    "Relation Name: located_in\n"
    "\n"
    "Definition: The head entity is a smaller geographical, physical, or "
    "conceptual area that is situated within the larger area of the tail "
    "entity.")


def build_enhancement_prompt(relation_name: str) -> str:
    return (f"{ENHANCEMENT_TASK}\n"
            f"\n"
            f"{ENHANCEMENT_EXAMPLE}\n"
            f"\n"
            f"Relation Name: {relation_name}\n"
            f"\n"
            f"Definition:")


@dataclass(frozen=True)
class RelationDescription:
    relation: str
    description: str
    source: str  # "remote" | "fallback"


def naturalize(name: str) -> str:
    return " ".join(name.replace("_", " ").replace("-", " ").split())


def fallback_description(name: str) -> str:
    """Offline stand-in built from the relation name alone."""
    return f"The head entity {naturalize(name)} the tail entity."


_FNV_OFFSET = 0xcbf29ce484222325
_FNV_PRIME = 0x100000001b3
_FNV_MASK = 0xffffffffffffffff


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _FNV_MASK
    return h


def fallback_embed(text: str, dim: int = 384) -> np.ndarray:
    """Hashed character-trigram counts, L2 normalized.

    Empty or degenerate text maps to the first basis vector so callers
    never see a zero embedding.
    """
    v = np.zeros(dim, dtype=np.float32)
    s = text.lower()
    if len(s) < 3:
        grams = [s] if s else []
    else:
        grams = [s[i:i + 3] for i in range(len(s) - 2)]
    for g in grams:
        v[fnv1a64(g.encode("utf-8")) % dim] += 1.0
    n = float(np.linalg.norm(v))
    if n == 0.0:
        v[0] = 1.0
        return v
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine of zero-norm vector")
    return float(np.dot(a.astype(np.float32), b.astype(np.float32)) / (na * nb))


class ProviderError(RuntimeError):
    pass


@dataclass
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-small"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0


class RemoteProvider:
    """Chat + embeddings over an OpenAI-style JSON HTTP API.

    The key comes from the SCT_API_KEY environment variable and is only
    required once a request is actually made.
    """

    def __init__(self, config: ProviderConfig | None = None, session=None):
        self.config = config or ProviderConfig()
        self.session = session or requests.Session()

    def _key(self) -> str:
        key = os.environ.get(API_KEY_ENV, "")
        if not key:
            raise ProviderError(
                f"remote provider needs the {API_KEY_ENV} environment variable")
        return key

    def _post(self, route: str, payload: dict) -> dict:
        url = self.config.base_url.rstrip("/") + route
        headers = {"Authorization": f"Bearer {self._key()}",
                   "Content-Type": "application/json"}
        last = None
        for attempt in range(self.config.max_retries):
            try:
                resp = self.session.post(url, json=payload, headers=headers,
                                         timeout=self.config.timeout)
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code == 200:
                    return resp.json()
                last = ProviderError(
                    f"{route} returned {resp.status_code}: {resp.text[:200]}")
                if resp.status_code not in (429, 500, 502, 503, 504):
                    raise last
            time.sleep(self.config.backoff * (2 ** attempt))
        raise ProviderError(f"{route} failed after retries: {last}")

    def chat(self, prompt: str) -> str:
        blob = self._post("/chat/completions", {
            "model": self.config.chat_model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        })
        try:
            return blob["choices"][0]["message"]["content"].strip()
        except (KeyError, IndexError, AttributeError) as exc:
            raise ProviderError(f"malformed chat response: {exc}")

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        blob = self._post("/embeddings", {
            "model": self.config.embed_model,
            "input": list(texts),
        })
        try:
            rows = sorted(blob["data"], key=lambda d: d["index"])
            return [np.asarray(r["embedding"], dtype=np.float32) for r in rows]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc}")


class DescriptionCache:
    """Append-only JSONL of relation descriptions."""

    def __init__(self, path: str):
        self.path = path
        self._records: dict[str, RelationDescription] = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    blob = json.loads(line)
                    rec = RelationDescription(blob["relation"],
                                              blob["description"],
                                              blob.get("source", "remote"))
                    self._records[rec.relation] = rec

    def get(self, relation: str) -> RelationDescription | None:
        return self._records.get(relation)

    def put(self, rec: RelationDescription):
        self._records[rec.relation] = rec
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"relation": rec.relation,
                                "description": rec.description,
                                "source": rec.source}) + "\n")

    def __len__(self):
        return len(self._records)


def enhance_relations(names: Sequence[str], cache: DescriptionCache | None = None,
                      provider: RemoteProvider | None = None
                      ) -> list[RelationDescription]:
    """A description per relation name, in input order.

    Cache hits are returned as-is; misses go to the provider when one is
    given, otherwise to the offline fallback. New records are appended
    to the cache.
    """
    out = []
    for name in names:
        rec = cache.get(name) if cache is not None else None
        if rec is None:
            if provider is not None:
                text = provider.chat(build_enhancement_prompt(name))
                if not text.strip():
                    raise ProviderError(
                        f"empty description returned for relation {name!r}")
                rec = RelationDescription(name, " ".join(text.split()), "remote")
            else:
                rec = RelationDescription(name, fallback_description(name),
                                          "fallback")
            if cache is not None:
                cache.put(rec)
        out.append(rec)
    return out


class RelationSemanticTable:
    """Row i is the semantic vector of relation id i."""

    def __init__(self, vectors: np.ndarray):
        v = np.asarray(vectors, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"semantic table must be 2-D, got {v.shape}")
        self.vectors = v

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def vector(self, rel_id: int) -> np.ndarray:
        return self.vectors[rel_id]

    def save(self, path: str):
        np.save(path, self.vectors)

    @classmethod
    def load(cls, path: str) -> "RelationSemanticTable":
        return cls(np.load(path))


def build_semantic_table(texts: Sequence[str], dim: int = 384,
                         provider: RemoteProvider | None = None
                         ) -> RelationSemanticTable:
    """Embed one text per relation id, in order."""
    if provider is not None:
        vecs = provider.embed(texts)
        mat = np.stack(vecs).astype(np.float32)
    else:
        mat = np.stack([fallback_embed(t, dim) for t in texts])
    return RelationSemanticTable(mat)
