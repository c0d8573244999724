import math

import numpy as np
import pytest

import oracles
from metric_instance import make_instance
from stylerec.datamodel import InteractionRecord
from stylerec.evaluation import (
    EvaluationError,
    MetricReport,
    PopularityRanker,
    RandomRanker,
    RankedList,
    accuracy_at_k,
    average_precision,
    catalog_coverage,
    curves_csv,
    ecs_curve,
    effective_catalog_size,
    evaluate,
    markdown_table,
    mean_average_precision,
    popular_baseline,
    rank_items,
    top_k_lists,
    visual_diversity,
)


@pytest.fixture(scope="module")
def inst():
    return make_instance()


def test_accuracy_matches_oracle(inst):
    ranker, clicks, users, items, _ = inst
    pairs = [(c.user_id, c.image_id) for c in clicks]
    for k in (1, 10, 37, 100):
        assert accuracy_at_k(clicks, ranker, k) == oracles.accuracy_at_k(pairs, ranker.score_of, items, k)


def test_top_lists_match_oracle(inst):
    ranker, _, users, items, _ = inst
    assert top_k_lists(ranker, users, items, 10) == oracles.top_lists(users, ranker.score_of, items, 10)


def test_coverage_ecs_vd_match_oracle(inst):
    ranker, clicks, users, items, deep = inst
    lists = oracles.top_lists(users, ranker.score_of, items, 100)
    top10 = {u: l[:10] for u, l in lists.items()}
    test_items = {c.image_id for c in clicks}
    assert catalog_coverage(top10, test_items) == oracles.coverage(top10, test_items)
    for k in (1, 10, 100):
        assert effective_catalog_size(lists, k) == oracles.ecs(lists, k)
    # Gram-matrix distances against explicit differences: agreement to a few ulps
    assert visual_diversity(top10, deep) == pytest.approx(oracles.visual_diversity(top10, deep), rel=1e-13, abs=0)


def test_map_matches_oracle(inst):
    ranker, _, users, items, _ = inst
    lists = oracles.top_lists(users, ranker.score_of, items, 200)
    rng = np.random.default_rng(3)
    rel = [set(rng.choice(items, size=rng.integers(1, 30), replace=False)) for _ in users]
    ranked = [lists[u] for u in users]
    assert mean_average_precision(ranked, rel) == oracles.mean_average_precision(ranked, rel)


def test_evaluate_report_agrees_with_pieces(inst):
    ranker, clicks, users, items, deep = inst
    report, curve = evaluate(ranker, clicks, deep)
    pairs = [(c.user_id, c.image_id) for c in clicks]
    assert report.acc_at_10 == oracles.accuracy_at_k(pairs, ranker.score_of, items, 10)
    assert report.acc_at_100 == oracles.accuracy_at_k(pairs, ranker.score_of, items, 100)
    assert report.n_items == 200 and report.n_clicks == len(clicks)
    assert [k for k, _ in curve] == list(range(1, 101))
    assert curve[9][1] == report.ecs_at_10


def test_accuracy_examples():
    clicks = [InteractionRecord("u", "a", 0), InteractionRecord("u", "b", 1)]

    class Perfect:
        def scores(self, us, its):
            return np.array([[1.0 if i in ("a", "b") else 0.0 for i in its] for _ in us])

    assert accuracy_at_k(clicks, Perfect(), 2) == 1.0
    assert accuracy_at_k(clicks, RandomRanker(0), 2) == 1.0  # k = |pool|
    with pytest.raises(EvaluationError):
        accuracy_at_k(clicks, Perfect(), 1, candidate_pool=["a"])
    with pytest.raises(EvaluationError):
        accuracy_at_k([], Perfect(), 1)


def test_random_ranker_expectation():
    pool = [f"i{k}" for k in range(50)]
    clicks = [InteractionRecord(f"u{k % 40}", pool[k % 50], k) for k in range(2000)]
    k = 5
    trials = [accuracy_at_k(clicks, RandomRanker(s), k, pool) for s in range(10)]
    p = k / len(pool)
    sigma = math.sqrt(p * (1 - p) / (len(clicks) * len(trials)))
    assert abs(np.mean(trials) - p) < 3 * sigma


def test_coverage_examples():
    catalog = [f"i{k}" for k in range(100)]
    same = {f"u{k}": catalog[:10] for k in range(5)}
    assert catalog_coverage(same, catalog) == 10.0
    disjoint = {f"u{k}": catalog[10 * k: 10 * k + 10] for k in range(10)}
    assert catalog_coverage(disjoint, catalog) == 100.0


def test_ecs_examples():
    assert effective_catalog_size([["a"]] * 7, 1) == 1.0
    assert effective_catalog_size([["a", "b", "c", "d"]] * 3, 4) == 4.0
    assert effective_catalog_size([["a"], ["a"], ["a"], ["b"]], 1) == 1.5
    with pytest.raises(EvaluationError):
        effective_catalog_size([["a"]], 0)
    with pytest.raises(EvaluationError):
        effective_catalog_size([[]], 1)


@pytest.mark.parametrize("m", [1, 2, 3, 7, 10, 64, 100])
def test_ecs_uniform_is_exactly_m(m):
    lists = [[f"i{(u + j) % m}" for j in range(min(m, 10))] for u in range(m)]
    assert effective_catalog_size(lists, 10) == m


def test_ecs_curve_shape():
    lists = {"u": ["a", "b", "c"]}
    assert ecs_curve(lists, [1, 2, 3]) == [(1, 1.0), (2, 2.0), (3, 3.0)]


def test_visual_diversity_examples():
    feats = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 2.0]), "c": np.array([3.0, 0.0])}
    assert visual_diversity([["a", "c"]], feats) == 0.0
    assert visual_diversity([["a", "b"]], feats) == pytest.approx(math.sqrt(2))
    with pytest.raises(EvaluationError):
        visual_diversity([["a"]], feats)


def test_popular_baseline_examples():
    clicks = [InteractionRecord("u", i, 0) for i in ("A", "B", "A", "A", "C", "B")]
    assert popular_baseline(clicks).ids == ("A", "B", "C")
    assert popular_baseline(clicks, 2).ids == ("A", "B")
    with pytest.raises(EvaluationError):
        popular_baseline([])


def test_popular_baseline_coverage_and_ecs(inst):
    _, clicks, users, items, deep = inst
    report, _ = evaluate(PopularityRanker(clicks), clicks, deep)
    assert report.catalog_coverage == 100.0 * 10 / len(items)
    assert report.ecs_at_10 == 10.0


def test_average_precision_examples():
    assert average_precision(["a", "b"], {"a"}) == 1.0
    assert average_precision(["x", "a"], {"a"}) == 0.5
    assert average_precision(["x", "y"], {"a"}) == 0.0
    assert average_precision(["a", "x", "b"], {"a", "b", "c"}) == pytest.approx((1 + 2 / 3) / 3)
    assert average_precision(["x", "a"], {"a"}, cutoff=1) == 0.0
    with pytest.raises(EvaluationError):
        average_precision(["a"], set())
    with pytest.raises(EvaluationError):
        mean_average_precision([["a"]], [{"a"}, {"b"}])


def test_rank_items_tie_break():
    r = rank_items(["c", "a", "b"], np.array([1.0, 1.0, 2.0]))
    assert r.ids == ("b", "a", "c")
    assert r.rank_of() == {"b": 1, "a": 2, "c": 3}
    assert r.top(1).ids == ("b",)
    with pytest.raises(EvaluationError):
        RankedList(("a", "a"), (1.0, 1.0))


def test_report_validation_and_rendering():
    rep = MetricReport(0.1, 0.5, 12.5, 33.0, 0.9, 3, 4, 5)
    table = markdown_table([("A", rep), ("B", None)])
    assert "| A | 0.100 | 0.500 | 12.5 | 33.0 | 0.900 |" in table
    assert "FAILED" in table
    assert rep.to_json() == MetricReport(**rep.to_dict()).to_json()
    with pytest.raises(EvaluationError):
        MetricReport(1.5, 0.5, 1, 1, 1, 1, 1, 1)
    with pytest.raises(EvaluationError):
        MetricReport(0.5, 0.5, 101, 1, 1, 1, 1, 1)
    assert curves_csv({"A": [(1, 1.0)]}) == "model,k,ecs\nA,1,1.0\n"
