"""Click-log records, line-delimited JSON I/O, temporal split and vocabularies."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    image_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.image_id:
            raise DatasetError("interaction ids must be non-empty")
        if self.timestamp < 0:
            raise DatasetError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    org_id: str
    country: str
    language: str
    subscription: str


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    categories: tuple[str, ...]
    contributor_country: str
    color_peaks: tuple[tuple[str, float], ...]
    angle_tags: tuple[str, ...]
    photo_style_tags: tuple[str, ...]
    deep_features: np.ndarray
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        if not 1 <= len(self.categories) <= 2:
            raise DatasetError(
                f"image {self.image_id}: expected 1 or 2 categories, got {len(self.categories)}"
            )
        for name, cov in self.color_peaks:
            if not 0.0 < cov <= 1.0:
                raise DatasetError(f"image {self.image_id}: color {name} coverage {cov} not in (0, 1]")

    def with_deep_features(self, deep: np.ndarray) -> "ImageRecord":
        return ImageRecord(
            self.image_id, self.categories, self.contributor_country, self.color_peaks,
            self.angle_tags, self.photo_style_tags, np.asarray(deep, dtype=np.float64), self.keywords,
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[InteractionRecord, ...]
    test: tuple[InteractionRecord, ...]
    test_fraction: float
    validation_fraction: float = 0.10


@dataclass(frozen=True)
class Vocabulary:
    """Token to index map for one categorical feature.

    In-vocabulary tokens take indices ``[0, len(tokens))``; OOV hash buckets
    follow at ``[len(tokens), len(tokens) + oov_buckets)``.
    """

    feature: str
    tokens: tuple[str, ...]
    oov_buckets: int
    min_count: int
    index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.oov_buckets < 0:
            raise VocabularyError("oov_buckets must be >= 0")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError(f"duplicate tokens in vocabulary {self.feature}")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        """Rows needed in an embedding table: vocab plus OOV buckets."""
        return len(self.tokens) + self.oov_buckets

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "min_count": self.min_count,
            "oov_buckets": self.oov_buckets,
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(d["feature"], tuple(d["tokens"]), int(d["oov_buckets"]), int(d["min_count"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# How each raw feature's tokens are pulled out of a record.
USER_FEATURES = ("user_id", "org_id", "country", "language", "subscription")
IMAGE_FEATURES = (
    "categories", "contributor_country", "colors", "angle_tags", "photo_style_tags", "keywords",
)


def feature_tokens(record, feature_name: str) -> tuple[str, ...]:
    if isinstance(record, UserRecord):
        if feature_name not in USER_FEATURES:
            raise VocabularyError(f"unknown user feature {feature_name!r}")
        return (getattr(record, feature_name),)
    if isinstance(record, ImageRecord):
        if feature_name == "colors":
            return tuple(name for name, _ in record.color_peaks)
        if feature_name == "contributor_country":
            return (record.contributor_country,)
        if feature_name in IMAGE_FEATURES:
            return tuple(getattr(record, feature_name))
        raise VocabularyError(f"unknown image feature {feature_name!r}")
    raise VocabularyError(f"cannot extract {feature_name!r} from {type(record).__name__}")


# Default clipping per feature: (min_count, strict, oov_buckets).
# strict=True keeps tokens with count > min_count ("more than 50 clicks");
# strict=False keeps count >= min_count ("less than 200 clicks are clipped").
DEFAULT_THRESHOLDS: dict[str, tuple[int, bool, int]] = {
    "user_id": (50, True, 10_000),
    "org_id": (100, True, 10_000),
    "country": (200, False, 1),
    "language": (200, False, 1),
    "subscription": (0, False, 1),
    "categories": (0, False, 1),
    "contributor_country": (200, False, 1),
    "colors": (0, False, 0),
    "angle_tags": (0, False, 1),
    "photo_style_tags": (0, False, 1),
    "keywords": (0, False, 1),
}


def build_vocabulary(
    interactions: Iterable[InteractionRecord],
    records: Mapping[str, UserRecord | ImageRecord],
    feature_name: str,
    min_count: int,
    oov_buckets: int,
    strict: bool = True,
) -> Vocabulary:
    """Build a vocabulary keeping tokens with enough associated clicks.

    A token's count is the number of interactions whose user (or image) record
    carries it. With ``strict`` the rule is ``count > min_count``, otherwise
    ``count >= min_count``. ``min_count == 0`` disables clipping and keeps
    every token present in ``records``. Order is descending count, then token.
    """
    if min_count < 0:
        raise VocabularyError("min_count must be >= 0")
    if not records:
        raise VocabularyError("no records to extract tokens from")
    sample = next(iter(records.values()))
    key = "user_id" if isinstance(sample, UserRecord) else "image_id"
    feature_tokens(sample, feature_name)  # validates the feature name

    counts: Counter[str] = Counter()
    for r in records.values():
        for tok in feature_tokens(r, feature_name):
            counts.setdefault(tok, 0)
    cache: dict[str, tuple[str, ...]] = {}
    for it in interactions:
        rid = getattr(it, key)
        toks = cache.get(rid)
        if toks is None:
            rec = records.get(rid)
            if rec is None:
                raise VocabularyError(f"interaction references unknown {key} {rid!r}")
            toks = cache[rid] = feature_tokens(rec, feature_name)
        counts.update(toks)

    if min_count == 0:
        kept = list(counts)
    elif strict:
        kept = [t for t, c in counts.items() if c > min_count]
    else:
        kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(feature_name, tuple(kept), oov_buckets, min_count)


def build_default_vocabulary(interactions, records, feature_name, **overrides) -> Vocabulary:
    min_count, strict, oov = DEFAULT_THRESHOLDS[feature_name]
    return build_vocabulary(
        interactions, records, feature_name,
        overrides.get("min_count", min_count),
        overrides.get("oov_buckets", oov),
        strict=overrides.get("strict", strict),
    )


def temporal_split(interactions: Sequence[InteractionRecord], test_fraction: float) -> DatasetSplit:
    """Hold out the chronologically latest ``ceil(n * test_fraction)`` clicks.

    Ties on timestamp keep input order, so a later input record lands later.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(interactions)
    if n == 0:
        raise DatasetError("cannot split an empty interaction list")
    ordered = sorted(interactions, key=lambda r: r.timestamp)
    n_test = math.ceil(n * test_fraction)
    return DatasetSplit(tuple(ordered[: n - n_test]), tuple(ordered[n - n_test:]), test_fraction)


# --------------------------------------------------------------------- I/O

def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _parse(path, lineno, fn):
    try:
        return fn()
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}:{lineno}: {exc}") from None


def interaction_from_dict(d: dict) -> InteractionRecord:
    return InteractionRecord(str(d["user_id"]), str(d["image_id"]), int(d["ts"]))


def user_from_dict(d: dict) -> UserRecord:
    return UserRecord(
        str(d["user_id"]), str(d["org_id"]), str(d["country"]), str(d["language"]), str(d["subscription"])
    )


def image_from_dict(d: dict) -> ImageRecord:
    return ImageRecord(
        image_id=str(d["image_id"]),
        categories=tuple(d["categories"]),
        contributor_country=str(d["contributor_country"]),
        color_peaks=tuple((str(c), float(v)) for c, v in d["color_peaks"]),
        angle_tags=tuple(d.get("angle_tags", ())),
        photo_style_tags=tuple(d.get("photo_style_tags", ())),
        deep_features=np.asarray(d["deep_features"], dtype=np.float64),
        keywords=tuple(d.get("keywords", ())),
    )


def interaction_to_dict(r: InteractionRecord) -> dict:
    return {"user_id": r.user_id, "image_id": r.image_id, "ts": r.timestamp}


def user_to_dict(u: UserRecord) -> dict:
    return {
        "user_id": u.user_id, "org_id": u.org_id, "country": u.country,
        "language": u.language, "subscription": u.subscription,
    }


def image_to_dict(im: ImageRecord) -> dict:
    return {
        "image_id": im.image_id,
        "categories": list(im.categories),
        "contributor_country": im.contributor_country,
        "color_peaks": [[c, v] for c, v in im.color_peaks],
        "angle_tags": list(im.angle_tags),
        "photo_style_tags": list(im.photo_style_tags),
        "deep_features": [float(x) for x in im.deep_features],
        "keywords": list(im.keywords),
    }


def iter_interactions(path) -> Iterator[InteractionRecord]:
    for lineno, d in _read_jsonl(path):
        yield _parse(path, lineno, lambda: interaction_from_dict(d))


def read_users(path) -> dict[str, UserRecord]:
    users = {}
    for lineno, d in _read_jsonl(path):
        u = _parse(path, lineno, lambda: user_from_dict(d))
        users[u.user_id] = u
    return users


def read_images(path) -> dict[str, ImageRecord]:
    images: dict[str, ImageRecord] = {}
    dim = None
    for lineno, d in _read_jsonl(path):
        im = _parse(path, lineno, lambda: image_from_dict(d))
        if dim is None:
            dim = im.deep_features.shape[0]
        elif im.deep_features.shape[0] != dim:
            raise DatasetError(
                f"{path}:{lineno}: deep_features has {im.deep_features.shape[0]} dims, expected {dim}"
            )
        images[im.image_id] = im
    return images


def load_dataset(interactions_path, users_path, images_path):
    """Load the three line-delimited files and check referential integrity.

    Interactions are streamed line by line; only resolved records are kept.
    """
    users = read_users(users_path)
    images = read_images(images_path)
    interactions = []
    dangling = []
    for rec in iter_interactions(interactions_path):
        if rec.user_id not in users:
            dangling.append(f"user {rec.user_id}")
        if rec.image_id not in images:
            dangling.append(f"image {rec.image_id}")
        interactions.append(rec)
    if dangling:
        raise DatasetError(
            f"{len(dangling)} dangling id(s) in {interactions_path}; first: {', '.join(dangling[:10])}"
        )
    log.info("loaded %d interactions, %d users, %d images", len(interactions), len(users), len(images))
    return interactions, users, images


def _write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def write_interactions(path, interactions: Iterable[InteractionRecord]) -> None:
    _write_jsonl(path, (interaction_to_dict(r) for r in interactions))


def write_users(path, users: Iterable[UserRecord]) -> None:
    _write_jsonl(path, (user_to_dict(u) for u in users))


def write_images(path, images: Iterable[ImageRecord]) -> None:
    _write_jsonl(path, (image_to_dict(im) for im in images))
