"""Embedding store and text-guided retrieval (the data-feeder stage).

The store is an exact brute-force cosine scanner: desk-scale pools need no
approximate index, and exactness keeps the retrieval tests crisp. It is
single-writer (bulk ingestion) / many-reader; reads never mutate.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from . import kernels
from .core import EngineThresholds
from .errors import DimensionMismatch, EmptyCategory, EmptyStore, UnknownImage
from .fsio import atomic_write_bytes

EMB_MAGIC = b"AIDE-EMB"
EMB_FORMAT_VERSION = 1

PROMPT_TEMPLATE = "An image containing {}"


def build_prompt(category_name: str) -> str:
    """Text prompt used for category retrieval: ``An image containing {name}``."""
    if not category_name or not category_name.strip():
        raise EmptyCategory("category name must be non-empty")
    return PROMPT_TEMPLATE.format(category_name)


def _validate_vector(vec: np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding vector has non-finite entries")
    if not np.any(arr):
        raise ValueError("zero embedding vector rejected")
    return arr


def cosine(u, v) -> float:
    """dot(u, v) / (|u| |v|); raises DimensionMismatch on unequal lengths."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimensionMismatch(f"{u.shape[0]}-d vs {v.shape[0]}-d")
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(u @ v) / (nu * nv)


class EmbeddingStore:
    """image id -> fixed-dimension vector, insertion order preserved."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = int(dimension)
        self._vectors: dict[str, np.ndarray] = {}
        self._matrix: Optional[np.ndarray] = None  # unit rows, insertion order

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._vectors

    def ids(self) -> list[str]:
        return list(self._vectors.keys())

    def get(self, image_id: str) -> np.ndarray:
        try:
            return self._vectors[image_id]
        except KeyError:
            raise UnknownImage(image_id) from None

    def add(self, image_id: str, vec) -> None:
        arr = _validate_vector(vec)
        if arr.shape[0] != self.dimension:
            raise DimensionMismatch(f"store is {self.dimension}-d, got {arr.shape[0]}-d")
        if image_id in self._vectors:
            raise ValueError(f"duplicate image id {image_id!r}")
        self._vectors[image_id] = arr
        self._matrix = None

    def add_many(self, items: Iterable[tuple[str, np.ndarray]]) -> None:
        for image_id, vec in items:
            self.add(image_id, vec)

    def _unit_matrix(self) -> np.ndarray:
        if self._matrix is None:
            mat = np.stack([v for v in self._vectors.values()])
            mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
            self._matrix = mat
        return self._matrix

    def scores_against(self, query) -> np.ndarray:
        """Cosine of every stored vector against the query, insertion order."""
        if not self._vectors:
            raise EmptyStore("no embeddings ingested")
        q = _validate_vector(query)
        if q.shape[0] != self.dimension:
            raise DimensionMismatch(f"store is {self.dimension}-d, got {q.shape[0]}-d")
        q = q / np.linalg.norm(q)
        return kernels.cosine_scores(self._unit_matrix(), q)


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked (image id, cosine) pairs plus the query provenance."""

    items: tuple
    query: str
    score_min: float
    min_fraction: float
    top_k: int
    floor_applied: bool = False

    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def to_dict(self) -> dict:
        return {
            "items": [[i, s] for i, s in self.items],
            "query": self.query,
            "score_min": self.score_min,
            "min_fraction": self.min_fraction,
            "top_k": self.top_k,
            "floor_applied": self.floor_applied,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RetrievalResult":
        return cls(
            items=tuple((str(i), float(s)) for i, s in d["items"]),
            query=str(d["query"]),
            score_min=float(d["score_min"]),
            min_fraction=float(d["min_fraction"]),
            top_k=int(d["top_k"]),
            floor_applied=bool(d["floor_applied"]),
        )


def _ranked(store: EmbeddingStore, query) -> list[tuple[str, float]]:
    scores = store.scores_against(query)
    ids = store.ids()
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))  # ties: insertion order
    return [(ids[i], float(scores[i])) for i in order]


def retrieve(
    store: EmbeddingStore,
    query,
    thresholds: EngineThresholds,
    query_text: str = "",
) -> RetrievalResult:
    """Threshold-with-floor retrieval.

    Everything scoring at least ``retrieval_score_min`` is returned, capped
    at ``top_k``. If fewer than ceil(min_fraction * |store|) pass, the list
    is padded with the next-best scores up to that floor and flagged.
    """
    ranked = _ranked(store, query)
    floor = math.ceil(thresholds.retrieval_min_fraction * len(ranked))
    passing = [(i, s) for i, s in ranked if s >= thresholds.retrieval_score_min]
    floor_applied = False
    if len(passing) < floor:
        passing = ranked[: min(floor, len(ranked))]
        floor_applied = True
    items = tuple(passing[: thresholds.top_k])
    return RetrievalResult(
        items=items,
        query=query_text,
        score_min=thresholds.retrieval_score_min,
        min_fraction=thresholds.retrieval_min_fraction,
        top_k=thresholds.top_k,
        floor_applied=floor_applied,
    )


def retrieval_precision(result: RetrievalResult, relevance: Callable[[str], bool]) -> float:
    """Fraction of retrieved ids marked relevant."""
    if not result.items:
        raise ValueError("retrieval result is empty")
    hits = sum(1 for image_id, _ in result.items if relevance(image_id))
    return hits / len(result.items)


def image_similarity_search(store: EmbeddingStore, anchor_image_id: str, k: int) -> RetrievalResult:
    """Top-k by cosine against the anchor image's own vector, anchor excluded.

    This is the image-similarity baseline that text-prompt retrieval is
    compared against.
    """
    anchor = store.get(anchor_image_id)
    ranked = [(i, s) for i, s in _ranked(store, anchor) if i != anchor_image_id]
    return RetrievalResult(
        items=tuple(ranked[:k]),
        query=f"image:{anchor_image_id}",
        score_min=-1.0,
        min_fraction=0.0,
        top_k=k,
        floor_applied=False,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def store_to_bytes(store: EmbeddingStore) -> bytes:
    parts = [EMB_MAGIC, struct.pack("<IIQ", EMB_FORMAT_VERSION, store.dimension, len(store))]
    for image_id in store.ids():
        encoded = image_id.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"image id too long: {image_id!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(store.get(image_id).astype("<f4").tobytes())
    return b"".join(parts)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    atomic_write_bytes(path, store_to_bytes(store))


def load_store(path: str | Path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding store (bad magic)")
    off = len(EMB_MAGIC)
    version, dim, count = struct.unpack_from("<IIQ", data, off)
    if version != EMB_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off += struct.calcsize("<IIQ")
    store = EmbeddingStore(dim)
    for _ in range(count):
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        image_id = data[off : off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        store.add(image_id, vec)
    return store


def load_store_jsonl(path: str | Path) -> EmbeddingStore:
    """Debug-friendly reader: one {"id": ..., "vec": [...]} object per line."""
    store: Optional[EmbeddingStore] = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            vec = np.asarray(obj["vec"], dtype=np.float64)
            if store is None:
                store = EmbeddingStore(vec.shape[0])
            store.add(str(obj["id"]), vec)
    if store is None:
        raise EmptyStore(f"{path}: no records")
    return store


def save_store_jsonl(store: EmbeddingStore, path: str | Path) -> None:
    lines = [
        json.dumps({"id": i, "vec": store.get(i).tolist()}) + "\n" for i in store.ids()
    ]
    atomic_write_bytes(path, "".join(lines).encode("utf-8"))
