"""Synthetic image marketplace with planted style preferences.

Users hold 1-2 style archetypes that stay fixed while their projects (semantic
topics) change over time. A click picks one image from a popularity-weighted
candidate sample with probability proportional to

    exp(sharpness * (alpha * style_affinity + (1 - alpha) * topic_match))

Each user's last project uses a topic that user never worked on before and
occupies the final slice of the time window, so a temporal test split lands
on unseen topics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import (
    ImageRecord,
    InteractionRecord,
    UserRecord,
    write_images,
    write_interactions,
    write_users,
)
from .encoding import NAMED_COLORS

CATEGORY_NAMES = (
    "Nature", "Signs/Symbols", "Illustrations", "Sports/Recreation", "People", "Food and Drink",
    "Technology", "Architecture", "Animals", "Business", "Transportation", "Abstract", "Backgrounds",
    "Beauty/Fashion", "Education", "Healthcare", "Holidays", "Industrial", "Interiors", "Miscellaneous",
    "Objects", "Parks/Outdoor", "Religion", "Science", "Arts", "Buildings/Landmarks", "Celebrities",
    "Editorial", "Vintage", "Cityscapes",
)
ANGLE_TAGS = (
    "aerial view", "wide angle view", "close up view", "top view", "low angle view",
    "high angle view", "side view", "macro view",
)
PHOTO_STYLE_TAGS = (
    "candid style", "studio isolated style", "portrait style", "minimalist style",
    "vintage style", "flat lay style", "documentary style", "abstract style",
)
TOPIC_WORDS = (
    "train", "snow", "people", "technology", "sustainability", "beach", "coffee", "mountain",
    "city", "wedding", "office", "forest", "music", "football", "kitchen", "medicine", "school",
    "finance", "garden", "ocean", "desert", "party", "travel", "winter", "farm", "science",
    "family", "fitness", "fashion", "bridge", "river", "night", "robot", "bicycle", "market",
    "festival", "library", "harbor", "airport", "volcano", "jungle", "stadium", "museum", "road",
    "rain", "sunset", "castle", "factory",
)
GENERIC_KEYWORDS = ("outdoors", "indoors", "day", "color image", "horizontal", "vertical", "nobody", "group")
SUBSCRIPTIONS = ("basic", "team", "enterprise")
TIME_WINDOW = 180 * 24 * 3600  # six months, in seconds


class GeneratorConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_users: int = 500
    n_orgs: int = 250
    n_images: int = 2000
    n_clicks: int = 50_000
    n_style_archetypes: int = 32
    n_semantic_topics: int = 40
    projects_per_user: int = 4
    style_signal_strength: float = 0.8   # alpha
    org_correlation: float = 0.8         # rho
    deep_feature_mix: float = 0.7        # lambda: share of deep features carrying style
    seed: int = 0
    deep_dim: int = 64
    zipf_exponent: float = 1.2
    zipf_offset: float = 10.0
    image_popularity_exponent: float = 0.5
    candidate_sample: int = 100
    topic_candidate_share: float = 0.5
    click_sharpness: float = 8.0
    attribute_noise: float = 0.3
    deep_noise: float = 2.0
    n_countries: int = 20
    n_languages: int = 8
    test_share: float = 0.10
    country_prior_concentration: float = 0.5
    org_home_share: float = 0.8          # users located in their org's home country

    def validate(self) -> None:
        counts = ("n_users", "n_orgs", "n_images", "n_clicks", "n_style_archetypes", "n_semantic_topics",
                  "projects_per_user", "deep_dim", "candidate_sample", "n_countries", "n_languages")
        for name in counts:
            if getattr(self, name) < 1:
                raise GeneratorConfigError(f"{name} must be >= 1")
        for name in ("style_signal_strength", "org_correlation", "deep_feature_mix",
                     "topic_candidate_share", "attribute_noise",
                     "org_home_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GeneratorConfigError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.test_share < 1.0:
            raise GeneratorConfigError("test_share must be in (0, 1)")
        if self.projects_per_user < 2:
            raise GeneratorConfigError("projects_per_user must be >= 2 (training projects plus a test project)")
        if self.projects_per_user > self.n_semantic_topics:
            raise GeneratorConfigError("projects_per_user exceeds n_semantic_topics; projects need distinct topics")
        if self.n_semantic_topics > len(TOPIC_WORDS):
            raise GeneratorConfigError(f"at most {len(TOPIC_WORDS)} semantic topics are supported")
        if self.n_orgs > self.n_users:
            raise GeneratorConfigError("n_orgs cannot exceed n_users")
        if self.n_clicks > self.n_users * self.n_images:
            raise GeneratorConfigError(
                f"n_clicks={self.n_clicks} is infeasible for {self.n_users} users x {self.n_images} images"
            )
        if self.n_clicks < 2 * self.n_users:
            raise GeneratorConfigError("need at least two clicks per user (train and test)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class Archetype:
    categories: list[str]
    countries: list[str]
    palette: list[str]
    angle: str
    photo_style: str


@dataclass
class GroundTruth:
    archetypes: list[Archetype]
    user_archetypes: dict[str, list[int]]
    org_archetypes: dict[str, list[int]]
    image_archetype: dict[str, int]
    image_topic: dict[str, int]
    topics: list[str]
    # user -> list of {"topic", "start", "end", "test"}
    projects: dict[str, list[dict]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundTruth":
        return cls(
            [Archetype(**a) for a in d["archetypes"]],
            {k: list(v) for k, v in d["user_archetypes"].items()},
            {k: list(v) for k, v in d["org_archetypes"].items()},
            dict(d["image_archetype"]),
            dict(d["image_topic"]),
            list(d["topics"]),
            {k: list(v) for k, v in d.get("projects", {}).items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def archetype_affinity(self, image: ImageRecord) -> np.ndarray:
        """Style match of ``image`` against every archetype, each in [0, 1]."""
        latent = self.image_archetype[image.image_id]
        return np.array([
            0.5 * (k == latent) + 0.5 * attribute_match(image, a) for k, a in enumerate(self.archetypes)
        ])

    def affinity(self, user_id: str, image: ImageRecord) -> float:
        per_arch = self.archetype_affinity(image)
        return float(max(per_arch[k] for k in self.user_archetypes[user_id]))


def attribute_match(image: ImageRecord, arch: Archetype) -> float:
    """Mean agreement of the image's shallow attributes with one archetype."""
    cats = float(any(c in arch.categories for c in image.categories))
    country = float(image.contributor_country in arch.countries)
    total = sum(v for _, v in image.color_peaks)
    colors = sum(v for c, v in image.color_peaks if c in arch.palette) / total if total else 0.0
    angle = float(arch.angle in image.angle_tags)
    style = float(arch.photo_style in image.photo_style_tags)
    return (cats + country + colors + angle + style) / 5.0


def _zipf_weights(n: int, exponent: float, offset: float, rng: np.random.Generator) -> np.ndarray:
    """Long-tail weights over ``n`` entities in random rank order."""
    w = (np.arange(1, n + 1) + offset) ** (-exponent)
    return rng.permutation(w / w.sum())


def _allocate(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` with a floor (largest remainder)."""
    n = len(weights)
    rest = total - minimum * n
    raw = weights * rest
    out = np.floor(raw).astype(np.int64)
    short = rest - out.sum()
    out[np.argsort(-(raw - out), kind="stable")[:short]] += 1
    return out + minimum


def _unit_vectors(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _latent_vectors(config: GeneratorConfig):
    """Style and topic directions in deep-feature space (own stream, reproducible on demand)."""
    rng = np.random.default_rng([config.seed, 101])
    return (_unit_vectors(rng, config.n_style_archetypes, config.deep_dim),
            _unit_vectors(rng, config.n_semantic_topics, config.deep_dim))


def _make_archetypes(rng, countries, k) -> list[Archetype]:
    out = []
    for _ in range(k):
        out.append(Archetype(
            categories=sorted(rng.choice(CATEGORY_NAMES, 3, replace=False).tolist()),
            countries=sorted(rng.choice(countries, 2, replace=False).tolist()),
            palette=sorted(rng.choice(NAMED_COLORS, 6, replace=False).tolist()),
            angle=str(rng.choice(ANGLE_TAGS)),
            photo_style=str(rng.choice(PHOTO_STYLE_TAGS)),
        ))
    return out


def _draw_archetypes(rng, prior: np.ndarray) -> list[int]:
    n = 1 if rng.random() < 0.5 else 2
    return sorted(int(a) for a in rng.choice(len(prior), size=min(n, len(prior)), replace=False, p=prior))


def _pick(rng, favored: Sequence[str], universe: Sequence[str], noise: float) -> str:
    return str(rng.choice(universe)) if rng.random() < noise else str(rng.choice(favored))


def _make_image(rng, image_id, arch: Archetype, topic: str, topic_idx: int, countries, config,
                style_vec, topic_vec) -> ImageRecord:
    noise = config.attribute_noise
    n_cat = 1 if rng.random() < 0.5 else 2
    cats = []
    while len(cats) < n_cat:
        c = _pick(rng, arch.categories, CATEGORY_NAMES, noise)
        if c not in cats:
            cats.append(c)
    n_peaks = int(rng.integers(1, 4))
    cover = rng.dirichlet(np.ones(n_peaks)) * rng.uniform(0.5, 1.0)
    peaks = {}
    for cov in cover:
        name = _pick(rng, arch.palette, NAMED_COLORS, noise)
        peaks[name] = peaks.get(name, 0.0) + float(cov)
    color_peaks = tuple((k, round(min(v, 1.0), 6)) for k, v in sorted(peaks.items()) if v > 1e-6)
    lam = config.deep_feature_mix
    deep = lam * style_vec + (1.0 - lam) * topic_vec + config.deep_noise * rng.normal(size=config.deep_dim) / math.sqrt(config.deep_dim)
    sub = rng.choice(5, 2, replace=False)
    keywords = (topic, f"{topic} {chr(97 + sub[0])}", f"{topic} {chr(97 + sub[1])}", str(rng.choice(GENERIC_KEYWORDS)))
    return ImageRecord(
        image_id=image_id,
        categories=tuple(cats),
        contributor_country=_pick(rng, arch.countries, countries, noise),
        color_peaks=color_peaks,
        angle_tags=(_pick(rng, [arch.angle], ANGLE_TAGS, noise),),
        photo_style_tags=(_pick(rng, [arch.photo_style], PHOTO_STYLE_TAGS, noise),),
        deep_features=np.round(deep, 8),
        keywords=keywords,
    )


class _ClickSampler:
    """Draws clicks for (user, topic) events from popularity-weighted candidate samples."""

    def __init__(self, config: GeneratorConfig, arch_affinity: np.ndarray, image_topic: np.ndarray,
                 popularity: np.ndarray):
        self.config = config
        self.arch_affinity = arch_affinity          # [K, n_images]
        self.image_topic = image_topic
        self.popularity = popularity
        self.topic_pools = []
        for t in range(config.n_semantic_topics):
            pool = np.flatnonzero(image_topic == t)
            if len(pool) == 0:
                pool = np.arange(len(image_topic))
            p = popularity[pool] / popularity[pool].sum()
            self.topic_pools.append((pool, p))

    def user_affinity(self, archetypes: Sequence[int]) -> np.ndarray:
        return self.arch_affinity[list(archetypes)].max(axis=0)

    def sample(self, rng, affinity: np.ndarray, topic: int, n_events: int) -> np.ndarray:
        cfg = self.config
        m = cfg.candidate_sample
        n_img = len(self.popularity)
        from_topic = rng.random((n_events, m)) < cfg.topic_candidate_share
        pool, p = self.topic_pools[topic]
        topical = pool[rng.choice(len(pool), size=(n_events, m), p=p)]
        anywhere = rng.choice(n_img, size=(n_events, m), p=self.popularity)
        cand = np.where(from_topic, topical, anywhere)
        alpha = cfg.style_signal_strength
        logits = cfg.click_sharpness * (alpha * affinity[cand] + (1 - alpha) * (self.image_topic[cand] == topic))
        gumbel = -np.log(-np.log(rng.uniform(1e-12, 1.0, size=logits.shape)))
        return cand[np.arange(n_events), np.argmax(logits + gumbel, axis=1)]


def generate(config: GeneratorConfig):
    """Returns ``(users, images, interactions, ground_truth)``; users/images are id-keyed dicts."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    K, T = config.n_style_archetypes, config.n_semantic_topics
    countries = [f"C{i:02d}" for i in range(config.n_countries)]
    languages = [f"L{i:02d}" for i in range(config.n_languages)]
    topics = list(TOPIC_WORDS[:T])
    archetypes = _make_archetypes(rng, countries, K)
    style_vecs, topic_vecs = _latent_vectors(config)

    # users, orgs and archetype assignment
    country_w = _zipf_weights(config.n_countries, 1.0, 1.0, rng)
    country_prior = rng.dirichlet(np.full(K, config.country_prior_concentration), size=config.n_countries)
    org_ids = [f"o{i:04d}" for i in range(config.n_orgs)]
    # each org has a home country; its styles follow that country's taste
    org_home = rng.choice(config.n_countries, size=config.n_orgs, p=country_w)
    org_archetypes = {o: _draw_archetypes(rng, country_prior[org_home[k]]) for k, o in enumerate(org_ids)}
    org_w = _zipf_weights(config.n_orgs, 1.0, 2.0, rng)
    user_org = np.concatenate([np.arange(config.n_orgs),
                               rng.choice(config.n_orgs, config.n_users - config.n_orgs, p=org_w)])
    rng.shuffle(user_org)
    users: dict[str, UserRecord] = {}
    user_archetypes: dict[str, list[int]] = {}
    for i in range(config.n_users):
        uid = f"u{i:05d}"
        org = org_ids[user_org[i]]
        home = int(org_home[user_org[i]])
        c = home if rng.random() < config.org_home_share else int(rng.choice(config.n_countries, p=country_w))
        lang = languages[c % config.n_languages] if rng.random() < 0.85 else str(rng.choice(languages))
        users[uid] = UserRecord(uid, org, countries[c], lang, str(rng.choice(SUBSCRIPTIONS)))
        if rng.random() < config.org_correlation:
            user_archetypes[uid] = list(org_archetypes[org])
        else:
            user_archetypes[uid] = _draw_archetypes(rng, country_prior[c])

    # catalog
    images: dict[str, ImageRecord] = {}
    image_arch = rng.integers(0, K, size=config.n_images)
    image_topic = rng.integers(0, T, size=config.n_images)
    for j in range(config.n_images):
        iid = f"i{j:06d}"
        a, t = int(image_arch[j]), int(image_topic[j])
        images[iid] = _make_image(rng, iid, archetypes[a], topics[t], t, countries, config,
                                  style_vecs[a], topic_vecs[t])
    image_ids = list(images)
    popularity = _zipf_weights(config.n_images, config.image_popularity_exponent, 20.0, rng)

    gt = GroundTruth(archetypes, user_archetypes, org_archetypes,
                     {iid: int(image_arch[j]) for j, iid in enumerate(image_ids)},
                     {iid: int(image_topic[j]) for j, iid in enumerate(image_ids)}, topics)
    arch_aff = np.stack([gt.archetype_affinity(images[iid]) for iid in image_ids], axis=1)
    sampler = _ClickSampler(config, arch_aff, image_topic, popularity)

    # timelines and clicks
    per_user = _allocate(config.n_clicks, _zipf_weights(config.n_users, config.zipf_exponent,
                                                        config.zipf_offset, rng), 2)
    boundary = int(TIME_WINDOW * (1.0 - config.test_share))
    interactions: list[InteractionRecord] = []
    for i, uid in enumerate(users):
        n_u = int(per_user[i])
        n_test = min(n_u - 1, max(1, int(round(config.test_share * n_u))))
        proj_topics = rng.choice(T, size=config.projects_per_user, replace=False)
        n_train_proj = config.projects_per_user - 1
        cuts = np.sort(rng.integers(1, boundary, size=n_train_proj - 1))
        edges = np.concatenate([[0], cuts, [boundary]])
        seg_len = np.diff(edges).astype(float)
        train_counts = rng.multinomial(n_u - n_test, seg_len / seg_len.sum())
        affinity = sampler.user_affinity(user_archetypes[uid])
        schedule = []
        spans = [(int(edges[p]), int(edges[p + 1]), int(train_counts[p]), False) for p in range(n_train_proj)]
        spans.append((boundary, TIME_WINDOW, n_test, True))
        for (start, end, count, is_test), topic in zip(spans, proj_topics):
            schedule.append({"topic": int(topic), "start": start, "end": end, "test": is_test})
            if count == 0:
                continue
            picks = sampler.sample(rng, affinity, int(topic), count)
            stamps = np.sort(rng.integers(start, end, size=count))
            interactions.extend(InteractionRecord(uid, image_ids[j], int(ts)) for j, ts in zip(picks, stamps))
        gt.projects[uid] = schedule
    interactions.sort(key=lambda r: (r.timestamp, r.user_id, r.image_id))
    return users, images, interactions, gt


def clip_like_features(images: Mapping[str, ImageRecord], config: GeneratorConfig,
                       ground_truth: GroundTruth, style_share: float = 0.05) -> dict[str, ImageRecord]:
    """Swap deep features for semantic-heavy, low-noise vectors of the same dimension."""
    style_vecs, topic_vecs = _latent_vectors(config)
    rng = np.random.default_rng([config.seed, 202])
    out = {}
    for iid in sorted(images):
        im = images[iid]
        a, t = ground_truth.image_archetype[iid], ground_truth.image_topic[iid]
        vec = (style_share * style_vecs[a] + (1.0 - style_share) * topic_vecs[t]
               + (config.deep_noise / 3.0) * rng.normal(size=config.deep_dim) / math.sqrt(config.deep_dim))
        out[iid] = im.with_deep_features(np.round(vec, 8))
    return out


def fresh_clicks(config: GeneratorConfig, images: Mapping[str, ImageRecord], ground_truth: GroundTruth,
                 user_archetypes: Mapping[str, Sequence[int]], clicks_per_user: int, start_ts: int,
                 seed: int) -> list[InteractionRecord]:
    """Clicks for the given users under (possibly changed) archetypes, one new project each."""
    rng = np.random.default_rng([config.seed, seed, 303])
    image_ids = sorted(images)
    arch_aff = np.stack([ground_truth.archetype_affinity(images[iid]) for iid in image_ids], axis=1)
    topic = np.array([ground_truth.image_topic[iid] for iid in image_ids])
    sampler = _ClickSampler(config, arch_aff, topic, np.full(len(image_ids), 1.0 / len(image_ids)))
    out = []
    for uid in sorted(user_archetypes):
        t = int(rng.integers(0, config.n_semantic_topics))
        picks = sampler.sample(rng, sampler.user_affinity(user_archetypes[uid]), t, clicks_per_user)
        stamps = np.sort(rng.integers(start_ts, start_ts + 30 * 24 * 3600, size=clicks_per_user))
        out.extend(InteractionRecord(uid, image_ids[j], int(ts)) for j, ts in zip(picks, stamps))
    return out


def licenses(interactions: Sequence[InteractionRecord], images: Mapping[str, ImageRecord],
             ground_truth: GroundTruth, threshold: float = 0.5) -> list[InteractionRecord]:
    """Clicks promoted to licenses: those whose style affinity reaches ``threshold``."""
    cache: dict[str, np.ndarray] = {}
    out = []
    for it in interactions:
        aff = cache.get(it.image_id)
        if aff is None:
            aff = cache[it.image_id] = ground_truth.archetype_affinity(images[it.image_id])
        if max(aff[k] for k in ground_truth.user_archetypes[it.user_id]) >= threshold:
            out.append(it)
    return out


def write_dataset(out_dir, users, images, interactions, ground_truth: GroundTruth | None = None,
                  config: GeneratorConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_users(out / "users.jsonl", users.values())
    write_images(out / "images.jsonl", images.values())
    write_interactions(out / "interactions.jsonl", interactions)
    if ground_truth is not None:
        ground_truth.save(out / "ground_truth.json")
    if config is not None:
        (out / "generator_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
