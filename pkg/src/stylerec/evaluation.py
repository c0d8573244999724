"""Offline metrics: Accuracy@k, catalog coverage, effective catalog size,
visual diversity, MAP, and the popularity baseline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .datamodel import InteractionRecord

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    """Item ids by descending score, ties broken by ascending id."""

    ids: tuple[str, ...]
    scores: tuple[float, ...]
    owner: str | None = None

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise EvaluationError("ranked list contains duplicate ids")

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def top(self, k: int) -> "RankedList":
        return RankedList(self.ids[:k], self.scores[:k], self.owner)

    @property
    def k_max(self) -> int:
        return len(self.ids)

    def rank_of(self) -> dict[str, int]:
        """1-based rank per id."""
        return {i: r for r, i in enumerate(self.ids, 1)}


def rank_items(ids: Sequence[str], scores: np.ndarray, owner: str | None = None) -> RankedList:
    """Sort by descending score with ascending-id tie-break."""
    scores = np.asarray(scores, dtype=np.float64)
    id_arr = np.asarray(ids, dtype=object)
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], id_arr[j]))
    return RankedList(tuple(id_arr[j] for j in order), tuple(float(scores[j]) for j in order), owner)


class Ranker(Protocol):
    def scores(self, user_ids: Sequence[str], item_ids: Sequence[str]) -> np.ndarray:
        """``[len(user_ids), len(item_ids)]`` relevance scores."""


class PopularityRanker:
    """Same list for everyone: items by click count."""

    def __init__(self, clicks: Iterable[InteractionRecord]):
        self.counts = Counter(c.image_id for c in clicks)

    def scores(self, user_ids, item_ids):
        row = np.array([self.counts.get(i, 0) for i in item_ids], dtype=np.float64)
        return np.broadcast_to(row, (len(user_ids), len(item_ids))).copy()


class RandomRanker:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def scores(self, user_ids, item_ids):
        return self.rng.random((len(user_ids), len(item_ids)))


def _pool(test_clicks, candidate_pool) -> list[str]:
    pool = sorted(set(candidate_pool if candidate_pool is not None else (c.image_id for c in test_clicks)))
    if not pool:
        raise EvaluationError("empty candidate pool")
    return pool


def top_k_lists(ranker: Ranker, user_ids: Sequence[str], pool: Sequence[str], k: int,
                chunk: int = 512) -> dict[str, list[str]]:
    """Top-k of ``pool`` per user (pool ids sorted so a stable sort breaks ties by id)."""
    pool = sorted(pool)
    out = {}
    for s in range(0, len(user_ids), chunk):
        us = list(user_ids[s: s + chunk])
        S = ranker.scores(us, pool)
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        for u, row in zip(us, order):
            out[u] = [pool[j] for j in row]
    return out


def click_positions(test_clicks: Sequence[InteractionRecord], ranker: Ranker,
                    candidate_pool: Sequence[str] | None = None) -> np.ndarray:
    """0-based position of each clicked image in its user's ranking of the pool."""
    pool = _pool(test_clicks, candidate_pool)
    col = {m: j for j, m in enumerate(pool)}
    missing = [c.image_id for c in test_clicks if c.image_id not in col]
    if missing:
        raise EvaluationError(f"{len(missing)} test click(s) outside the candidate pool, e.g. {missing[0]}")
    users = sorted({c.user_id for c in test_clicks})
    by_user: dict[str, list[int]] = {}
    for n, c in enumerate(test_clicks):
        by_user.setdefault(c.user_id, []).append(n)
    positions = np.empty(len(test_clicks), dtype=np.int64)
    chunk = 256
    cols = np.arange(len(pool))
    for s in range(0, len(users), chunk):
        us = users[s: s + chunk]
        S = ranker.scores(us, pool)
        for r, u in enumerate(us):
            row = S[r]
            for n in by_user[u]:
                j = col[test_clicks[n].image_id]
                sc = row[j]
                positions[n] = np.count_nonzero(row > sc) + np.count_nonzero((row == sc) & (cols < j))
    return positions


def accuracy_at_k(test_clicks: Sequence[InteractionRecord], ranker: Ranker, k: int,
                  candidate_pool: Sequence[str] | None = None) -> float:
    """Share of test clicks whose image is in the user's top-k over the pool.

    The default pool is every distinct image clicked in the test set.
    """
    if not test_clicks:
        raise EvaluationError("no test clicks")
    return float(np.mean(click_positions(test_clicks, ranker, candidate_pool) < k))


def catalog_coverage(top10_lists: Mapping[str, Sequence[str]] | Iterable[Sequence[str]],
                     test_items: Iterable[str], k: int = 10) -> float:
    """Percent of test items that appear in at least one user's top-10."""
    lists = top10_lists.values() if isinstance(top10_lists, Mapping) else top10_lists
    items = set(test_items)
    if not items:
        return 0.0
    shown = set()
    for lst in lists:
        shown.update(list(lst)[:k])
    return 100.0 * len(shown & items) / len(items)


def effective_catalog_size(topk_lists: Mapping[str, Sequence[str]] | Iterable[Sequence[str]], k: int) -> float:
    """``2 * sum_i i * p_i - 1`` over slot shares ``p_i`` sorted descending (1-based ``i``).

    Equals 1 when one item fills every slot and M when M items share slots evenly.
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    lists = list(topk_lists.values() if isinstance(topk_lists, Mapping) else topk_lists)
    counts = Counter()
    for lst in lists:
        counts.update(list(lst)[:k])
    total = sum(counts.values())
    if total == 0:
        raise EvaluationError("no recommendations to measure")
    # integer numerator and denominator, one correctly rounded division
    c = sorted(counts.values(), reverse=True)
    weighted = sum(i * n for i, n in enumerate(c, 1))
    return (2 * weighted - total) / total


def ecs_curve(lists: Mapping[str, Sequence[str]], ks: Iterable[int]) -> list[tuple[int, float]]:
    return [(k, effective_catalog_size(lists, k)) for k in ks]


def visual_diversity(top10_lists: Mapping[str, Sequence[str]] | Iterable[Sequence[str]],
                     deep_features: Mapping[str, np.ndarray], k: int = 10) -> float:
    """Mean over users of the mean pairwise L2 distance between L2-normalized deep features."""
    lists = top10_lists.values() if isinstance(top10_lists, Mapping) else top10_lists
    per_user = []
    skipped = 0
    for lst in lists:
        ids = list(lst)[:k]
        if len(ids) < 2:
            skipped += 1
            continue
        X = np.stack([np.asarray(deep_features[i], dtype=np.float64) for i in ids])
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0, norms, 1.0)
        G = X @ X.T
        sq = np.clip(np.diag(G)[:, None] + np.diag(G)[None, :] - 2 * G, 0.0, None)
        iu = np.triu_indices(len(ids), 1)
        per_user.append(np.sqrt(sq[iu]).mean())
    if skipped:
        log.warning("visual diversity: skipped %d list(s) shorter than 2", skipped)
    if not per_user:
        raise EvaluationError("no list long enough for visual diversity")
    return float(np.mean(per_user))


def popular_baseline(clicks: Iterable[InteractionRecord], k: int | None = None) -> RankedList:
    counts = Counter(c.image_id for c in clicks)
    if not counts:
        raise EvaluationError("no clicks for the popularity baseline")
    ids = sorted(counts, key=lambda i: (-counts[i], i))[:k]
    return RankedList(tuple(ids), tuple(float(counts[i]) for i in ids))


def average_precision(ranked: Sequence[str], relevant: set, cutoff: int = 1000) -> float:
    if not relevant:
        raise EvaluationError("average precision needs a non-empty relevance set")
    hits = 0
    total = 0.0
    for r, item in enumerate(list(ranked)[:cutoff], 1):
        if item in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant)


def mean_average_precision(ranked_lists: Sequence[Sequence[str]], relevance_sets: Sequence[set],
                           cutoff: int = 1000) -> float:
    if len(ranked_lists) != len(relevance_sets):
        raise EvaluationError("one relevance set per ranked list required")
    if not ranked_lists:
        raise EvaluationError("nothing to evaluate")
    aps = [average_precision(r, set(s), cutoff) for r, s in zip(ranked_lists, relevance_sets)]
    return math.fsum(aps) / len(aps)


# ----------------------------------------------------------------- reports

COLUMNS = ("Acc@10", "Acc@100", "Catalog Coverage", "ECS@10", "Visual Diversity")


@dataclass
class MetricReport:
    acc_at_10: float
    acc_at_100: float
    catalog_coverage: float
    ecs_at_10: float
    visual_diversity: float
    n_users: int
    n_items: int
    n_clicks: int
    map: float | None = None

    def __post_init__(self):
        for name in ("acc_at_10", "acc_at_100"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise EvaluationError(f"{name} outside [0, 1]")
        if not 0.0 <= self.catalog_coverage <= 100.0:
            raise EvaluationError("catalog_coverage outside [0, 100]")

    def row(self) -> tuple[float, ...]:
        return (self.acc_at_10, self.acc_at_100, self.catalog_coverage, self.ecs_at_10, self.visual_diversity)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def markdown_table(rows: Sequence[tuple[str, MetricReport | None]], first_column: str = "Model") -> str:
    lines = [
        "| " + " | ".join((first_column,) + COLUMNS) + " |",
        "|" + "---|" * (len(COLUMNS) + 1),
    ]
    for label, rep in rows:
        if rep is None:
            cells = ["FAILED"] * len(COLUMNS)
        else:
            a10, a100, cov, ecs, vd = rep.row()
            cells = [f"{a10:.3f}", f"{a100:.3f}", f"{cov:.4g}", f"{ecs:.1f}", f"{vd:.3f}"]
        lines.append("| " + " | ".join([label] + cells) + " |")
    return "\n".join(lines) + "\n"


def curves_csv(curves: Mapping[str, Sequence[tuple[int, float]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "k", "ecs"])
    for label, curve in curves.items():
        for k, v in curve:
            w.writerow([label, k, repr(v)])
    return buf.getvalue()


def evaluate(ranker: Ranker, test_clicks: Sequence[InteractionRecord], deep_features: Mapping[str, np.ndarray],
             candidate_pool: Sequence[str] | None = None, curve_ks: Iterable[int] = range(1, 101)):
    """Full metric set for one ranker. Returns ``(MetricReport, ecs_curve)``."""
    pool = _pool(test_clicks, candidate_pool)
    positions = click_positions(test_clicks, ranker, pool)
    users = sorted({c.user_id for c in test_clicks})
    k_curve = list(curve_ks)
    lists = top_k_lists(ranker, users, pool, max([10] + k_curve))
    top10 = {u: l[:10] for u, l in lists.items()}
    test_items = {c.image_id for c in test_clicks}
    report = MetricReport(
        acc_at_10=float(np.mean(positions < 10)),
        acc_at_100=float(np.mean(positions < 100)),
        catalog_coverage=catalog_coverage(top10, test_items),
        ecs_at_10=effective_catalog_size(top10, 10),
        visual_diversity=visual_diversity(top10, deep_features),
        n_users=len(users),
        n_items=len(pool),
        n_clicks=len(test_clicks),
    )
    return report, ecs_curve(lists, k_curve)
