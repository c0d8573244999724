"""Ablation studies and the search-fusion study, shared by the command line
and the acceptance suite.

Each study trains one model per row on the same data with the same seed and
collects a MetricReport plus an ECS-vs-k curve. A row that diverges or fails
to learn is kept in the table as FAILED.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import DatasetSplit, ImageRecord, InteractionRecord, UserRecord, load_dataset, temporal_split
from .encoding import ALL_IMAGE_FEATURES, ALL_USER_FEATURES, build_schema
from .evaluation import MetricReport, PopularityRanker, curves_csv, evaluate, markdown_table, mean_average_precision
from .model import CROSS_VARIANTS, ModelConfig, TowerConfig, TwoTowerModel
from .ranker import build_index, ModelRanker, click_popularity, reciprocal_rank_fusion, rerank, search_candidates
from .synthgen import GeneratorConfig, GroundTruth, clip_like_features, generate, licenses
from .trainer import ClickDataset, History, TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

# Settings sized for a few thousand training steps rather than millions.
# Vocabulary clipping keeps the click thresholds; the OOV pools shrink with the user count.
DESK_THRESHOLDS = {"user_id": (50, True, 20), "org_id": (100, True, 20)}


def desk_train_config(**overrides) -> TrainConfig:
    d = dict(lr_schedule=[1e-5, 1e-4, 1e-3, 1e-2, 1e-1], initial_accumulator=1e-3, max_epochs=30)
    d.update(overrides)
    return TrainConfig(**d)


@dataclass
class StudySettings:
    thresholds: dict = field(default_factory=lambda: dict(DESK_THRESHOLDS))
    embedding_dims: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    test_fraction: float = 0.10

    def to_dict(self) -> dict:
        return {
            "thresholds": {k: list(v) for k, v in self.thresholds.items()},
            "embedding_dims": dict(self.embedding_dims),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "test_fraction": self.test_fraction,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudySettings":
        s = cls()
        if "thresholds" in d:
            s.thresholds.update({k: tuple(v) for k, v in d["thresholds"].items()})
        s.embedding_dims.update(d.get("embedding_dims", {}))
        if "model" in d:
            s.model = ModelConfig.from_dict(d["model"])
        if "train" in d:
            base = desk_train_config().to_dict()
            base.update(d["train"])
            s.train = TrainConfig.from_dict(base)
        s.test_fraction = float(d.get("test_fraction", s.test_fraction))
        return s

    def with_seed(self, seed: int) -> "StudySettings":
        out = StudySettings.from_dict(self.to_dict())
        out.model.seed = seed
        out.train.seed = seed
        return out


@dataclass
class StudyData:
    users: dict[str, UserRecord]
    images: dict[str, ImageRecord]
    split: DatasetSplit
    ground_truth: GroundTruth | None = None
    generator: GeneratorConfig | None = None

    @classmethod
    def from_generator(cls, config: GeneratorConfig, test_fraction: float = 0.10) -> "StudyData":
        users, images, interactions, gt = generate(config)
        return cls(users, images, temporal_split(interactions, test_fraction), gt, config)

    @classmethod
    def from_dir(cls, data_dir, test_fraction: float = 0.10) -> "StudyData":
        d = Path(data_dir)
        interactions, users, images = load_dataset(d / "interactions.jsonl", d / "users.jsonl", d / "images.jsonl")
        gt = GroundTruth.load(d / "ground_truth.json") if (d / "ground_truth.json").exists() else None
        gen = None
        if (d / "generator_config.json").exists():
            gen = GeneratorConfig.from_dict(json.loads((d / "generator_config.json").read_text()))
        return cls(users, images, temporal_split(interactions, test_fraction), gt, gen)

    def deep_features(self, images: Mapping[str, ImageRecord] | None = None) -> dict[str, np.ndarray]:
        return {k: v.deep_features for k, v in (images or self.images).items()}

    def clip_images(self) -> dict[str, ImageRecord]:
        if self.ground_truth is None or self.generator is None:
            raise ValueError("CLIP-like features need the generator config and ground truth")
        return clip_like_features(self.images, self.generator, self.ground_truth)


@dataclass
class RowResult:
    label: str
    report: MetricReport | None
    curve: list = field(default_factory=list)
    history: History | None = None
    error: str | None = None
    model: TwoTowerModel | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.report is None

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "report": self.report.to_dict() if self.report else None,
            "error": self.error,
            "epochs": [asdict(e) for e in self.history.epochs] if self.history else [],
        }


@dataclass
class StudyResult:
    name: str
    rows: list[RowResult]

    def row(self, label: str) -> RowResult:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def markdown(self) -> str:
        return markdown_table([(r.label, r.report) for r in self.rows])

    def curves_csv(self) -> str:
        return curves_csv({r.label: r.curve for r in self.rows if not r.failed})

    def to_json(self) -> str:
        return json.dumps({"study": self.name, "rows": [r.to_dict() for r in self.rows]},
                          indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            f"{self.name}.md": self.markdown(),
            f"{self.name}_ecs.csv": self.curves_csv(),
            f"{self.name}.json": self.to_json(),
        }
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8")
        return [out / n for n in files]


def train_model(data: StudyData, settings: StudySettings, user_features: Sequence[str] = ALL_USER_FEATURES,
                image_features: Sequence[str] = ALL_IMAGE_FEATURES, image_tower: TowerConfig | None = None,
                images: Mapping[str, ImageRecord] | None = None) -> tuple[TwoTowerModel, History]:
    images = images or data.images
    schema = build_schema(data.split.train, data.users, images, user_features, image_features,
                          thresholds=settings.thresholds, embedding_dims=settings.embedding_dims)
    config = ModelConfig.from_dict(settings.model.to_dict())
    if image_tower is not None:
        config.image = image_tower
    model = TwoTowerModel(schema, config)
    return train(model, ClickDataset(data.split.train, data.users, images), settings.train)


def converged(history: History, batch_size: int) -> bool:
    """Finished without divergence and the best validation loss beats uniform guessing."""
    best = history.best_val_loss
    return bool(history.epochs) and math.isfinite(best) and best < math.log(batch_size) - 1e-3


def run_row(label: str, data: StudyData, settings: StudySettings, user_features=ALL_USER_FEATURES,
            image_features=ALL_IMAGE_FEATURES, image_tower: TowerConfig | None = None,
            images: Mapping[str, ImageRecord] | None = None, keep_model: bool = False) -> RowResult:
    images = images or data.images
    try:
        model, history = train_model(data, settings, user_features, image_features, image_tower, images)
    except (TrainingDiverged, ValueError, FloatingPointError) as exc:
        log.error("row %r failed: %s", label, exc)
        return RowResult(label, None, error=str(exc), history=getattr(exc, "history", None))
    if not converged(history, settings.train.batch_size):
        log.error("row %r did not converge (best val loss %.4f)", label, history.best_val_loss)
        return RowResult(label, None, history=history, error="did not converge")
    ranker = ModelRanker(model, data.users, build_index(model, images))
    report, curve = evaluate(ranker, data.split.test, data.deep_features(images))
    log.info("row %r: acc@10=%.4f ecs@10=%.1f vd=%.3f", label, report.acc_at_10, report.ecs_at_10,
             report.visual_diversity)
    return RowResult(label, report, curve, history, model=model if keep_model else None)


def popular_row(data: StudyData, label: str = "Popular Baseline") -> RowResult:
    """Everyone gets the test-pool images most clicked during training."""
    report, curve = evaluate(PopularityRanker(data.split.train), data.split.test, data.deep_features())
    return RowResult(label, report, curve)


USER_FEATURE_ROWS = (
    ("VS RecSys: User ID", ("user_id",)),
    ("VS RecSys: User ID, Org ID", ("user_id", "org_id")),
    ("VS RecSys: All features", ALL_USER_FEATURES),
)
SHALLOW_IMAGE_FEATURES = tuple(f for f in ALL_IMAGE_FEATURES if f != "deep_features")
IMAGE_FEATURE_ROWS = (
    ("VS RecSys: Deep", ("deep_features",)),
    ("VS RecSys: All but Deep", SHALLOW_IMAGE_FEATURES),
    ("VS RecSys: All features", ALL_IMAGE_FEATURES),
)
CLIP_ROW = "VS RecSys: All with CLIP"
KEYWORDS_ROW = "VS RecSys: All features + Keywords"
STUDIES = ("user-features", "image-features", "cross-layers")


def user_features_study(data: StudyData, settings: StudySettings) -> StudyResult:
    rows = [run_row(label, data, settings, user_features=feats) for label, feats in USER_FEATURE_ROWS]
    return StudyResult("user-features", rows)


def image_features_study(data: StudyData, settings: StudySettings) -> StudyResult:
    rows = [popular_row(data)]
    rows += [run_row(label, data, settings, image_features=feats) for label, feats in IMAGE_FEATURE_ROWS]
    rows.append(run_row(CLIP_ROW, data, settings, images=data.clip_images()))
    return StudyResult("image-features", rows)


def cross_layers_study(data: StudyData, settings: StudySettings) -> StudyResult:
    rows = []
    base = settings.model.image
    for name, (count, placement) in CROSS_VARIANTS.items():
        tower = TowerConfig(list(base.mlp_widths), count, placement, base.output_dim)
        rows.append(run_row(f"VS RecSys: {name}", data, settings, image_tower=tower))
    return StudyResult("cross-layers", rows)


def keywords_row(data: StudyData, settings: StudySettings) -> RowResult:
    """All image features plus the project keywords."""
    return run_row(KEYWORDS_ROW, data, settings, image_features=ALL_IMAGE_FEATURES + ("keywords",))


def run_study(name: str, data: StudyData, settings: StudySettings) -> StudyResult:
    if name == "user-features":
        return user_features_study(data, settings)
    if name == "image-features":
        return image_features_study(data, settings)
    if name == "cross-layers":
        return cross_layers_study(data, settings)
    raise ValueError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}")


# ------------------------------------------------------------------ fusion

DEFAULT_WEIGHT_GRID = tuple((round(w, 1), round(1 - w, 1)) for w in (0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9))


@dataclass
class FusionQuery:
    keyword: str
    user_id: str
    relevant: frozenset


def license_queries(data: StudyData, n_queries: int = 10, users_per_query: int = 200, seed: int = 0,
                    threshold: float = 0.5) -> list[FusionQuery]:
    """(query, user, licensed images) triples from test-window licenses.

    Queries are the keywords with the most licensing users; each keeps up to
    ``users_per_query`` users, sampled with ``seed``.
    """
    if data.ground_truth is None:
        raise ValueError("license simulation needs ground truth")
    lic = licenses(data.split.test, data.images, data.ground_truth, threshold)
    topics = set(data.ground_truth.topics)
    by_query: dict[str, dict[str, set]] = {}
    for it in lic:
        for kw in data.images[it.image_id].keywords:
            if kw in topics:
                by_query.setdefault(kw, {}).setdefault(it.user_id, set()).add(it.image_id)
    ranked = sorted(by_query, key=lambda q: (-len(by_query[q]), q))[:n_queries]
    rng = np.random.default_rng(seed)
    out = []
    for q in ranked:
        users = sorted(by_query[q])
        if len(users) > users_per_query:
            users = sorted(rng.choice(users, users_per_query, replace=False).tolist())
        out.extend(FusionQuery(q, u, frozenset(by_query[q][u])) for u in users)
    return out


@dataclass
class FusionResult:
    rows: list[tuple[str, float]]
    best_weights: tuple[float, float] | None
    n_queries: int

    def value(self, label: str) -> float:
        return dict(self.rows)[label]

    def markdown(self) -> str:
        lines = ["| Ranking | MAP |", "|---|---|"]
        lines += [f"| {label} | {v:.4f} |" for label, v in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rows = [{"label": label, "map": v} for label, v in self.rows]
        return json.dumps({"rows": rows, "best_weights": self.best_weights, "n_queries": self.n_queries},
                          indent=2, sort_keys=True) + "\n"


def fusion_study(data: StudyData, model: TwoTowerModel, queries: Sequence[FusionQuery],
                 weight_grid: Sequence[tuple[float, float]] = DEFAULT_WEIGHT_GRID,
                 cutoff: int = 1000) -> FusionResult:
    """MAP of search, re-ranked search, mean-RR and the best weighted-RR (search weight first)."""
    if not queries:
        raise ValueError("no queries to evaluate")
    index = build_index(model, data.images)
    popularity = click_popularity(data.split.train)
    searches: dict[str, object] = {}
    search_lists, rerank_lists, rel = [], [], []
    for q in queries:
        if q.keyword not in searches:
            searches[q.keyword] = search_candidates(q.keyword, data.images, cutoff, popularity)
        s = searches[q.keyword]
        search_lists.append(s)
        rerank_lists.append(rerank(data.users[q.user_id], s, model, index))
        rel.append(set(q.relevant))

    def fused_map(wa, wb):
        return mean_average_precision([reciprocal_rank_fusion(a, b, wa, wb).ids
                                       for a, b in zip(search_lists, rerank_lists)], rel, cutoff)

    rows = [
        ("Search Engine", mean_average_precision([s.ids for s in search_lists], rel, cutoff)),
        ("VS RecSys", mean_average_precision([r.ids for r in rerank_lists], rel, cutoff)),
        ("Mean Reciprocal Rank", fused_map(0.5, 0.5)),
    ]
    best, best_w = -1.0, None
    for wa, wb in weight_grid:
        v = fused_map(wa, wb)
        if v > best:
            best, best_w = v, (wa, wb)
    if best_w is not None:
        rows.append(("Weighted Reciprocal Rank", best))
    return FusionResult(rows, best_w, len(queries))
