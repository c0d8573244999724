"""Offline image-embedding index, keyword search simulation, per-user
re-ranking and reciprocal-rank fusion."""

from __future__ import annotations

import json
import os
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import ImageRecord, InteractionRecord, UserRecord
from .encoding import EncodingError, encode_image
from .evaluation import RankedList, rank_items
from .model import TwoTowerModel, image_forward

INDEX_MAGIC = b"SRIX"
INDEX_VERSION = 1
# magic, version, count, dim, schema hash (hex sha256)
_HEADER = struct.Struct("<4sHQI64s")
# (search, recsys) starting point for weighted fusion; tuned over a grid in the fusion study
DEFAULT_WRR_WEIGHTS = (0.6, 0.4)


class IndexBuildError(ValueError):
    def __init__(self, errors: list[tuple[str, str]]):
        super().__init__(f"{len(errors)} image(s) failed to encode; first: {errors[0][0]}: {errors[0][1]}")
        self.errors = errors


@dataclass(eq=False)
class EmbeddingIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray
    schema_hash: str
    built_at: float = field(default_factory=time.time)

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.ids):
            raise ValueError("one embedding row per id required")
        self.rows = {i: r for r, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vectors(self, item_ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in item_ids if i not in self.rows]
        if missing:
            raise KeyError(f"item(s) not in index: {', '.join(missing[:10])}")
        return self.matrix[[self.rows[i] for i in item_ids]]

    def to_bytes(self) -> bytes:
        """Header, row-major little-endian float64 rows, then a JSON id trailer.

        ``built_at`` is deliberately not serialized so equal content gives equal bytes.
        """
        head = _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, len(self.ids), self.dim, self.schema_hash.encode("ascii"))
        body = np.ascontiguousarray(self.matrix, dtype="<f8").tobytes()
        return head + body + json.dumps(list(self.ids)).encode("utf-8")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingIndex":
        magic, version, count, dim, schema = _HEADER.unpack_from(blob)
        if magic != INDEX_MAGIC or version != INDEX_VERSION:
            raise ValueError("not a stylerec embedding index (or unsupported version)")
        start = _HEADER.size
        end = start + 8 * count * dim
        matrix = np.frombuffer(blob[start:end], dtype="<f8").reshape(count, dim).astype(np.float64)
        ids = tuple(json.loads(blob[end:].decode("utf-8")))
        return cls(ids, matrix, schema.decode("ascii"))

    def save(self, path) -> None:
        """Write to a temp file and rename, so readers never see a partial index."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build_index(model: TwoTowerModel, images: Mapping[str, ImageRecord], path=None) -> EmbeddingIndex:
    """Embed every image with the image tower (ids sorted), optionally persisting it.

    Images go through the tower one at a time: batched matrix products may
    round differently, and each row must equal ``image_forward`` bit for bit.
    """
    if not images:
        raise ValueError("cannot build an index over zero images")
    ids = sorted(images)
    errors = []
    for i in ids:
        try:
            encode_image(images[i], model.schema.image)
        except (EncodingError, ValueError) as exc:
            errors.append((i, str(exc)))
    if errors:
        raise IndexBuildError(errors)
    rows = [image_forward(model, encode_image(images[i], model.schema.image)) for i in ids]
    index = EmbeddingIndex(tuple(ids), np.stack(rows), model.schema_hash)
    if path is not None:
        index.save(path)
    return index


class ModelRanker:
    """Dot-product scores between user-tower outputs and index rows."""

    def __init__(self, model: TwoTowerModel, users: Mapping[str, UserRecord], index: EmbeddingIndex):
        if index.schema_hash != model.schema_hash:
            raise ValueError("index was built under a different feature schema")
        self.model = model
        self.users = users
        self.index = index
        self._cache: dict[str, np.ndarray] = {}

    def user_vectors(self, user_ids: Sequence[str]) -> np.ndarray:
        todo = [u for u in user_ids if u not in self._cache]
        if todo:
            embs = self.model.user_embeddings(self.model.encode_users(self.users[u] for u in todo))
            self._cache.update(zip(todo, embs))
        return np.stack([self._cache[u] for u in user_ids])

    def scores(self, user_ids, item_ids):
        return self.user_vectors(user_ids) @ self.index.vectors(item_ids).T


def click_popularity(clicks: Iterable[InteractionRecord]) -> Counter:
    return Counter(c.image_id for c in clicks)


def search_candidates(query_keyword: str, images: Mapping[str, ImageRecord], n: int = 1000,
                      popularity: Mapping[str, int] | None = None) -> RankedList:
    """Keyword filter ranked by click popularity: a stand-in for the production search engine."""
    if n < 1:
        raise ValueError("n must be >= 1")
    popularity = popularity or {}
    hits = [i for i, im in images.items() if query_keyword in im.keywords]
    ranked = rank_items(hits, np.array([popularity.get(i, 0) for i in hits], dtype=np.float64))
    return ranked.top(n)


def rerank(user: UserRecord, candidates: RankedList | Sequence[str], model: TwoTowerModel,
           index: EmbeddingIndex) -> RankedList:
    """Order candidates by ``<user embedding, image embedding>``."""
    ids = list(candidates.ids if isinstance(candidates, RankedList) else candidates)
    missing = [i for i in ids if i not in index.rows]
    if missing:
        raise KeyError(f"candidate {missing[0]} is not in the embedding index")
    if not ids:
        return RankedList((), (), user.user_id)
    u = model.user_embeddings(model.encode_users([user]))[0]
    return rank_items(ids, index.vectors(ids) @ u, owner=user.user_id)


def reciprocal_rank_fusion(list_a: RankedList | Sequence[str], list_b: RankedList | Sequence[str],
                           weight_a: float = 0.5, weight_b: float = 0.5) -> RankedList:
    """Weighted mean of 1-based reciprocal ranks; an item missing from a list scores 0 there."""
    if weight_a < 0 or weight_b < 0 or weight_a + weight_b == 0:
        raise ValueError("weights must be >= 0 and not both zero")
    a = list(list_a.ids if isinstance(list_a, RankedList) else list_a)
    b = list(list_b.ids if isinstance(list_b, RankedList) else list_b)
    for name, lst in (("list_a", a), ("list_b", b)):
        if len(set(lst)) != len(lst):
            raise ValueError(f"{name} contains duplicate ids")
    score: dict[str, float] = {}
    for r, i in enumerate(a, 1):
        score[i] = weight_a / r
    for r, i in enumerate(b, 1):
        score[i] = score.get(i, 0.0) + weight_b / r
    total = weight_a + weight_b
    ids = list(score)
    owner = getattr(list_a, "owner", None) or getattr(list_b, "owner", None)
    return rank_items(ids, np.array([score[i] / total for i in ids]), owner=owner)


def rerank_record(user_id: str, query: str, ranked: RankedList) -> str:
    """One JSON line of rerank output."""
    return json.dumps({"user": user_id, "query": query,
                       "ranked": [{"id": i, "score": s} for i, s in zip(ranked.ids, ranked.scores)]})
