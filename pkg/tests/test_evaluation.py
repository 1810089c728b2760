import math

import numpy as np
import pytest

from newsfuse.corpus import Article, Catalog, Locality
from newsfuse.errors import MismatchedEventSets
from newsfuse.evaluation import (
    MetricsReport,
    OracleRecommender,
    PredictionEvent,
    UniformRandomRecommender,
    compare_report,
    enumerate_events,
    evaluate,
    hit_at_k,
)

from conftest import make_session


def catalog_of(n):
    return Catalog(tuple(Article(f"v{i:03d}", "News", Locality.LOCAL) for i in range(n)),
                   frozenset({"News"}))


class TestEnumerateEvents:
    def test_length_five_session_four_events(self):
        events = enumerate_events([make_session("s1", [f"x{i}" for i in range(5)])])
        assert len(events) == 4
        assert events[0].prefix == ("x0",)
        assert events[-1].truth == "x4"

    def test_length_one_session_no_events(self):
        assert enumerate_events([make_session("s1", ["x0"])]) == []

    def test_order_preserved(self):
        events = enumerate_events([
            make_session("s1", ["a", "b"]),
            make_session("s2", ["c", "d", "e"]),
        ])
        assert [e.session_id for e in events] == ["s1", "s2", "s2"]

    def test_last_click_only_switch(self):
        events = enumerate_events([make_session("s1", ["a", "b", "c", "d"])],
                                  positions="last")
        assert len(events) == 1
        assert events[0].prefix == ("a", "b", "c")
        assert events[0].truth == "d"


class TestHitAtK:
    def test_rank_one(self):
        assert hit_at_k(["t"] + [f"x{i}" for i in range(20)], "t", 10) == 1

    def test_rank_eleven_boundary(self):
        ranked = [f"x{i}" for i in range(10)] + ["t"]
        assert hit_at_k(ranked, "t", 10) == 0
        assert hit_at_k(ranked, "t", 11) == 1

    def test_absent_truth(self):
        assert hit_at_k(["a", "b"], "t", 10) == 0


class TestEvaluate:
    def test_perfect_oracle_hits_everything(self):
        catalog = catalog_of(30)
        ids = [a.article_id for a in catalog.articles]
        sessions = [make_session(f"s{i}", ids[i:i + 4], start=i) for i in range(10)]
        events = enumerate_events(sessions)
        rec = OracleRecommender(events)
        report = evaluate(rec, events, catalog, ks=(1, 10), train_vocab=ids)
        assert report.hit_rate[1] == 1.0
        assert report.hit_rate[10] == 1.0

    def test_unseen_truth_counts_as_miss(self):
        catalog = catalog_of(10)
        ids = [a.article_id for a in catalog.articles]
        events = [PredictionEvent("s1", (ids[0],), "not-in-train-vocab")]
        rec = OracleRecommender(events)
        report = evaluate(rec, events, catalog, ks=(10,), train_vocab=ids[:5])
        assert report.hit_rate[10] == 0.0

    def test_monotone_in_k(self):
        catalog = catalog_of(40)
        ids = [a.article_id for a in catalog.articles]
        sessions = [make_session(f"s{i}", [ids[(i * 3 + j) % 40] for j in range(5)],
                                 start=i) for i in range(12)]
        events = enumerate_events(sessions)
        rec = UniformRandomRecommender(seed=5)
        report = evaluate(rec, events, catalog, ks=(10, 20, 50), train_vocab=ids)
        assert report.hit_rate[10] <= report.hit_rate[20] <= report.hit_rate[50]

    def test_uniform_random_matches_analytic_expectation(self):
        """Independent oracle: a uniform ranking hits the truth in the top K
        with probability K / pool size; compare the realized hit count to the
        binomial expectation within 3 sigma."""
        catalog = catalog_of(60)
        ids = [a.article_id for a in catalog.articles]
        rng = np.random.default_rng(8)
        sessions = []
        for i in range(6000):
            picks = rng.choice(60, size=3, replace=False)
            sessions.append(make_session(f"s{i}", [ids[p] for p in picks], start=i))
        events = enumerate_events(sessions)  # 12000 events
        assert len(events) >= 10_000
        k = 10
        report = evaluate(UniformRandomRecommender(seed=21), events, catalog,
                          ks=(k,), train_vocab=ids)
        expected = 0.0
        variance = 0.0
        for e in events:
            pool = 60 - len(set(e.prefix))
            p = k / pool
            expected += p
            variance += p * (1 - p)
        got = report.hit_rate[k] * len(events)
        assert abs(got - expected) <= 3 * math.sqrt(variance), (got, expected)

    def test_prefix_items_never_recommended(self):
        catalog = catalog_of(6)
        ids = [a.article_id for a in catalog.articles]
        events = [PredictionEvent("s1", tuple(ids[:4]), ids[4])]

        class ConstantRecommender:
            name = "constant"

            def score_matrix(self, prefixes, candidates):
                return np.ones((len(prefixes), len(candidates)))

        report = evaluate(ConstantRecommender(), events, catalog, ks=(2,),
                          train_vocab=ids)
        # pool minus prefix leaves ids[4:]; constant scores tie -> lexicographic
        assert report.hit_rate[2] == 1.0

    def test_coverage_definition(self):
        catalog = catalog_of(10)
        ids = [a.article_id for a in catalog.articles]
        events = [PredictionEvent("s1", (ids[0],), ids[1])]
        rec = OracleRecommender(events)
        report = evaluate(rec, events, catalog, ks=(3,), train_vocab=ids[:5])
        # one event emits a top-3 list out of a 10-article catalog
        assert report.coverage == pytest.approx(3 / 10)

    def test_deterministic_reports(self):
        catalog = catalog_of(25)
        ids = [a.article_id for a in catalog.articles]
        sessions = [make_session(f"s{i}", ids[i:i + 3], start=i) for i in range(8)]
        events = enumerate_events(sessions)
        r1 = evaluate(UniformRandomRecommender(seed=3), events, catalog,
                      ks=(5, 10), train_vocab=ids)
        r2 = evaluate(UniformRandomRecommender(seed=3), events, catalog,
                      ks=(5, 10), train_vocab=ids)
        assert r1 == r2


class TestCompareReport:
    def reports(self):
        base = dict(hit_rate={10: 0.2, 20: 0.3}, coverage=0.5, n_events=100,
                    config_fingerprint="f1")
        return (MetricsReport(model_name="m1", **base),
                MetricsReport(model_name="m2", **{**base, "hit_rate": {10: 0.25, 20: 0.28}}))

    def test_best_flagged_per_k(self):
        table = compare_report(self.reports())
        assert table.is_best(10, 0.25) and not table.is_best(10, 0.2)
        assert table.is_best(20, 0.3) and not table.is_best(20, 0.28)

    def test_mismatched_event_sets(self):
        a, b = self.reports()
        c = MetricsReport("m3", {10: 0.2, 20: 0.3}, 0.5, 99, "f2")
        with pytest.raises(MismatchedEventSets):
            compare_report([a, c])

    def test_identical_reports_tie_both_best(self):
        a, _ = self.reports()
        b = MetricsReport("m2", dict(a.hit_rate), a.coverage, a.n_events,
                          a.config_fingerprint)
        table = compare_report([a, b])
        assert table.is_best(10, a.hit_rate[10])
        assert all(table.is_best(10, hr[10]) for _, hr, _ in table.rows)
