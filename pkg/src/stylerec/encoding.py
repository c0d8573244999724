"""Feature specs and record encoding: one-hot/multi-hot indices, OOV hashing,
color coverage vectors and pass-through deep features."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import (
    DEFAULT_THRESHOLDS,
    ImageRecord,
    UserRecord,
    Vocabulary,
    build_vocabulary,
    feature_tokens,
)


class EncodingError(ValueError):
    pass


ONEHOT = "categorical-onehot"
MULTIHOT = "categorical-multihot"
DENSE_WEIGHTED = "dense-weighted"
DENSE = "dense"
KINDS = (ONEHOT, MULTIHOT, DENSE_WEIGHTED, DENSE)

_HUES = (
    "red", "vermilion", "orange", "amber", "yellow", "lime", "chartreuse", "green",
    "emerald", "jade", "teal", "cyan", "azure", "cerulean", "blue", "navy", "indigo",
    "violet", "purple", "magenta", "fuchsia", "rose", "brown",
)
_TONES = ("pale", "light", "bright", "deep", "dark", "greyish")
# 23 hues x 6 tones = 138 named HSV colors.
NAMED_COLORS: tuple[str, ...] = tuple(f"{tone} {hue}" for hue in _HUES for tone in _TONES)

DEFAULT_EMBEDDING_DIMS = {
    "user_id": 32,
    "org_id": 32,
    "country": 8,
    "language": 4,
    "subscription": 4,
    "categories": 16,
    "contributor_country": 8,
    "colors": 16,
    "angle_tags": 8,
    "photo_style_tags": 8,
    "keywords": 16,
}

FEATURE_KINDS = {
    "user_id": ONEHOT,
    "org_id": ONEHOT,
    "country": ONEHOT,
    "language": ONEHOT,
    "subscription": ONEHOT,
    "categories": MULTIHOT,
    "contributor_country": ONEHOT,
    "colors": DENSE_WEIGHTED,
    "angle_tags": MULTIHOT,
    "photo_style_tags": MULTIHOT,
    "keywords": MULTIHOT,
    "deep_features": DENSE,
}

ALL_USER_FEATURES = ("user_id", "org_id", "country", "language", "subscription")
ALL_IMAGE_FEATURES = (
    "categories", "contributor_country", "colors", "angle_tags", "photo_style_tags", "deep_features",
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_oov(token: str, oov_buckets: int) -> int:
    """Stable OOV bucket for ``token``: FNV-1a 64 of its UTF-8 bytes mod buckets."""
    if oov_buckets < 1:
        raise EncodingError(f"token {token!r} is out of vocabulary and there are no OOV buckets")
    return fnv1a_64(token.encode("utf-8")) % oov_buckets


def token_index(vocab: Vocabulary, token: str) -> int:
    idx = vocab.index.get(token)
    if idx is not None:
        return idx
    if vocab.oov_buckets < 1:
        raise EncodingError(
            f"{vocab.feature}: token {token!r} is out of vocabulary and there are no OOV buckets"
        )
    return len(vocab) + hash_oov(token, vocab.oov_buckets)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    embedding_dim: int
    vocabulary: Vocabulary | None = None
    dense_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EncodingError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind in (ONEHOT, MULTIHOT, DENSE_WEIGHTED) and self.vocabulary is None:
            raise EncodingError(f"{self.name}: categorical features need a vocabulary")
        if self.kind == DENSE_WEIGHTED and self.dense_dim != len(self.vocabulary):
            raise EncodingError(f"{self.name}: dense_dim must equal the named-slot count")
        if self.kind == DENSE and self.dense_dim <= 0:
            raise EncodingError(f"{self.name}: dense features need dense_dim > 0")
        if self.embedding_dim <= 0:
            raise EncodingError(f"{self.name}: embedding_dim must be > 0")

    @property
    def input_rows(self) -> int:
        """Rows of the embedding table (categorical) or input width (dense)."""
        if self.kind in (ONEHOT, MULTIHOT):
            return self.vocabulary.size
        return self.dense_dim

    @property
    def output_dim(self) -> int:
        """Width this feature contributes to the tower's concatenated input."""
        return self.dense_dim if self.kind == DENSE else self.embedding_dim

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "embedding_dim": self.embedding_dim,
            "dense_dim": self.dense_dim,
            "vocabulary": None if self.vocabulary is None else self.vocabulary.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        vocab = d.get("vocabulary")
        return cls(
            d["name"], d["kind"], int(d["embedding_dim"]),
            None if vocab is None else Vocabulary.from_dict(vocab), int(d.get("dense_dim", 0)),
        )


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered user and image feature specs; the unit the model is built against."""

    user: tuple[FeatureSpec, ...]
    image: tuple[FeatureSpec, ...]

    def to_dict(self) -> dict:
        return {"user": [s.to_dict() for s in self.user], "image": [s.to_dict() for s in self.image]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(
            tuple(FeatureSpec.from_dict(s) for s in d["user"]),
            tuple(FeatureSpec.from_dict(s) for s in d["image"]),
        )

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def select(self, user_features=None, image_features=None) -> "FeatureSchema":
        def pick(specs, names):
            if names is None:
                return specs
            by_name = {s.name: s for s in specs}
            missing = [n for n in names if n not in by_name]
            if missing:
                raise EncodingError(f"schema has no feature(s) {missing}")
            return tuple(by_name[n] for n in names)

        return FeatureSchema(pick(self.user, user_features), pick(self.image, image_features))


def colors_vocabulary() -> Vocabulary:
    return Vocabulary("colors", NAMED_COLORS, 0, 0)


def build_schema(
    train_interactions,
    users: Mapping[str, UserRecord],
    images: Mapping[str, ImageRecord],
    user_features: Sequence[str] = ALL_USER_FEATURES,
    image_features: Sequence[str] = ALL_IMAGE_FEATURES,
    thresholds: Mapping[str, tuple[int, bool, int]] | None = None,
    embedding_dims: Mapping[str, int] | None = None,
) -> FeatureSchema:
    """Build vocabularies from training clicks and assemble the feature schema.

    ``thresholds`` overrides ``(min_count, strict, oov_buckets)`` per feature.
    """
    thr = dict(DEFAULT_THRESHOLDS)
    thr.update(thresholds or {})
    dims = dict(DEFAULT_EMBEDDING_DIMS)
    dims.update(embedding_dims or {})
    train_interactions = list(train_interactions)

    def spec(name, records):
        kind = FEATURE_KINDS.get(name)
        if kind is None:
            raise EncodingError(f"unknown feature {name!r}")
        if kind == DENSE:
            dim = next(iter(records.values())).deep_features.shape[0]
            return FeatureSpec(name, DENSE, dim, None, dim)
        if kind == DENSE_WEIGHTED:
            return FeatureSpec(name, kind, dims[name], colors_vocabulary(), len(NAMED_COLORS))
        min_count, strict, oov = thr[name]
        vocab = build_vocabulary(train_interactions, records, name, min_count, oov, strict=strict)
        return FeatureSpec(name, kind, dims[name], vocab)

    return FeatureSchema(
        tuple(spec(n, users) for n in user_features),
        tuple(spec(n, images) for n in image_features),
    )


# ----------------------------------------------------------------- encoding

@dataclass(frozen=True, eq=False)
class SparsePayload:
    indices: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class EncodedExample:
    """Per-feature payloads: ``SparsePayload`` for categorical, ndarray for dense."""

    payloads: dict

    def __getitem__(self, name):
        return self.payloads[name]


def _encode_feature(record, spec: FeatureSpec):
    if spec.kind == DENSE:
        vec = np.asarray(record.deep_features, dtype=np.float64)
        if vec.shape != (spec.dense_dim,):
            raise EncodingError(f"{spec.name}: expected {spec.dense_dim} dims, got {vec.shape}")
        return vec
    if spec.kind == DENSE_WEIGHTED:
        vec = np.zeros(spec.dense_dim)
        total = sum(cov for _, cov in record.color_peaks)
        for name, cov in record.color_peaks:
            vec[token_index(spec.vocabulary, name)] += cov / total
        return vec
    try:
        toks = feature_tokens(record, spec.name)
    except AttributeError:
        raise EncodingError(f"record has no field for feature {spec.name!r}") from None
    if spec.kind == ONEHOT:
        if len(toks) != 1 or not toks[0]:
            raise EncodingError(f"{spec.name}: missing value")
        return SparsePayload(np.array([token_index(spec.vocabulary, toks[0])]), np.ones(1))
    if spec.name == "categories" and not 1 <= len(toks) <= 2:
        raise EncodingError(f"categories: expected 1 or 2 values, got {len(toks)}")
    idx = np.array([token_index(spec.vocabulary, t) for t in toks], dtype=np.int64)
    w = np.full(len(toks), 1.0 / len(toks)) if toks else np.zeros(0)
    return SparsePayload(idx, w)


def encode_user(user: UserRecord, specs: Sequence[FeatureSpec]) -> EncodedExample:
    if not isinstance(user, UserRecord):
        raise EncodingError(f"expected a UserRecord, got {type(user).__name__}")
    return EncodedExample({s.name: _encode_feature(user, s) for s in specs})


def encode_image(image: ImageRecord, specs: Sequence[FeatureSpec]) -> EncodedExample:
    if not isinstance(image, ImageRecord):
        raise EncodingError(f"expected an ImageRecord, got {type(image).__name__}")
    return EncodedExample({s.name: _encode_feature(image, s) for s in specs})


def decode(example: EncodedExample, specs: Sequence[FeatureSpec]) -> dict:
    """Map payloads back to tokens. OOV indices decode to ``("<oov>", bucket)``."""
    out = {}
    for s in specs:
        p = example[s.name]
        if s.kind == DENSE:
            out[s.name] = p
        elif s.kind == DENSE_WEIGHTED:
            out[s.name] = {s.vocabulary.tokens[i]: float(p[i]) for i in np.flatnonzero(p)}
        else:
            n = len(s.vocabulary)
            out[s.name] = [s.vocabulary.tokens[i] if i < n else ("<oov>", int(i) - n) for i in p.indices]
    return out


# ----------------------------------------------------------------- batching

@dataclass(frozen=True, eq=False)
class EncodedBatch:
    """Stacked payloads for B records.

    Categorical features become padded ``(indices[B, L], weights[B, L])``
    (padding has weight 0); dense and dense-weighted become ``[B, D]``.
    """

    features: dict
    size: int
    schema_hash: str = ""

    def take(self, rows) -> "EncodedBatch":
        rows = np.asarray(rows)
        feats = {}
        for name, val in self.features.items():
            if isinstance(val, tuple):
                feats[name] = (val[0][rows], val[1][rows])
            else:
                feats[name] = val[rows]
        return EncodedBatch(feats, len(rows), self.schema_hash)


def stack_examples(examples: Sequence[EncodedExample], specs: Sequence[FeatureSpec]) -> EncodedBatch:
    feats = {}
    B = len(examples)
    for s in specs:
        payloads = [ex[s.name] for ex in examples]
        if s.kind in (DENSE, DENSE_WEIGHTED):
            feats[s.name] = np.stack(payloads) if B else np.zeros((0, s.dense_dim))
            continue
        L = max((len(p.indices) for p in payloads), default=1) or 1
        idx = np.zeros((B, L), dtype=np.int64)
        w = np.zeros((B, L))
        for r, p in enumerate(payloads):
            idx[r, : len(p.indices)] = p.indices
            w[r, : len(p.weights)] = p.weights
        feats[s.name] = (idx, w)
    return EncodedBatch(feats, B)


def encode_users(users: Sequence[UserRecord], specs) -> EncodedBatch:
    return stack_examples([encode_user(u, specs) for u in users], specs)


def encode_images(images: Sequence[ImageRecord], specs) -> EncodedBatch:
    return stack_examples([encode_image(im, specs) for im in images], specs)
