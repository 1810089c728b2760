import pytest

from newsfuse import segments
from newsfuse.corpus import Article, Catalog, Locality, chronological_split
from newsfuse.sasrec import SasrecConfig
from newsfuse.segments import (
    LocalityFilter,
    SegmentSpec,
    SegmentationScheme,
    build_scheme,
    filter_interactions,
    load_registry,
    save_registry,
    train_registry,
)
from newsfuse.sknn import SknnConfig

from conftest import make_session


class TestBuildScheme:
    def test_full_style_nine_segments(self, tiny_catalog):
        scheme = build_scheme(tiny_catalog, "per_category_full")
        assert len(scheme) == 9

    def test_pooled_style_eleven_segments(self, tiny_catalog):
        scheme = build_scheme(tiny_catalog, "per_category_plus_pooled")
        assert len(scheme) == 11
        assert scheme.names[-2:] == ("all_local", "all_non-local")

    def test_single_category_three_segments(self):
        catalog = Catalog((Article("x1", "News", Locality.LOCAL),), frozenset({"News"}))
        scheme = build_scheme(catalog, "per_category_full")
        assert scheme.names == ("News_all", "News_local", "News_non-local")

    def test_optional_global_segment(self, tiny_catalog):
        scheme = build_scheme(tiny_catalog, "per_category_plus_pooled", include_global=True)
        assert len(scheme) == 12 and scheme.names[-1] == "all_all"

    def test_names_follow_category_locality_convention(self, tiny_catalog):
        scheme = build_scheme(tiny_catalog, "per_category_full")
        assert "Sports_local" in scheme.names
        assert "Life and Culture_non-local" in scheme.names

    def test_duplicate_names_rejected(self):
        spec = SegmentSpec("News", LocalityFilter.ALL)
        with pytest.raises(ValueError):
            SegmentationScheme((spec, spec))


class TestFilterInteractions:
    def test_all_all_is_identity(self, tiny_catalog):
        ids = [a.article_id for a in tiny_catalog.articles]
        sessions = [make_session("s1", ids[:4]), make_session("s2", ids[4:8])]
        out = filter_interactions(sessions, SegmentSpec(None, LocalityFilter.ALL),
                                  tiny_catalog)
        assert [s.clicks for s in out] == [s.clicks for s in sessions]

    def test_no_matching_clicks_drops_session(self, tiny_catalog):
        sessions = [make_session("s1", ["a000", "a001"])]  # News local articles
        out = filter_interactions(sessions, SegmentSpec("Sports", LocalityFilter.LOCAL),
                                  tiny_catalog)
        assert out == []

    def test_hand_trace_sports_local(self):
        catalog = Catalog((
            Article("ls", "Sports", Locality.LOCAL),
            Article("nn", "News", Locality.NONLOCAL),
        ), frozenset({"Sports", "News"}))
        session = make_session("s1", ["ls", "nn", "ls"])
        out = filter_interactions([session], SegmentSpec("Sports", LocalityFilter.LOCAL),
                                  catalog)
        assert len(out) == 1
        assert out[0].items == ("ls", "ls")

    def test_unknown_locality_matches_only_all(self):
        catalog = Catalog((Article("u1", "News", Locality.UNKNOWN),),
                          frozenset({"News"}))
        session = make_session("s1", ["u1", "u1"])
        for filt, expect in ((LocalityFilter.ALL, 1), (LocalityFilter.LOCAL, 0),
                             (LocalityFilter.NONLOCAL, 0)):
            got = filter_interactions([session], SegmentSpec("News", filt), catalog)
            assert len(got) == expect, filt

    def test_below_two_clicks_dropped(self, tiny_catalog):
        session = make_session("s1", ["a000", "a002"])  # one News local, one News nonlocal
        out = filter_interactions([session], SegmentSpec("News", LocalityFilter.LOCAL),
                                  tiny_catalog)
        assert out == []


def tiny_split(catalog, n=30):
    local_news = [a.article_id for a in catalog.articles
                  if a.category == "News" and a.locality is Locality.LOCAL]
    all_ids = [a.article_id for a in catalog.articles]
    sessions = []
    for i in range(n):
        items = [all_ids[(i + j) % len(all_ids)] for j in range(3)] + local_news[:1]
        sessions.append(make_session(f"s{i}", items, start=i * 1000))
    return chronological_split(sessions)


class TestTrainRegistry:
    def test_eleven_submodels_and_order(self, tiny_catalog):
        split = tiny_split(tiny_catalog)
        scheme = build_scheme(tiny_catalog, "per_category_plus_pooled")
        registry = train_registry(split, scheme, "sknn", SknnConfig(k=5, sample_size=10),
                                  tiny_catalog, sparse_floor=2)
        assert len(registry) == 11
        assert tuple(e.spec.name for e in registry.entries) == scheme.names

    def test_zero_match_segment_flagged(self):
        catalog = Catalog((
            Article("n1", "News", Locality.LOCAL),
            Article("n2", "News", Locality.LOCAL),
            Article("s1", "Sports", Locality.LOCAL),
        ), frozenset({"News", "Sports"}))
        sessions = [make_session(f"s{i}", ["n1", "n2"], start=i) for i in range(10)]
        split = chronological_split(sessions)
        scheme = build_scheme(catalog, "per_category_full")
        registry = train_registry(split, scheme, "sknn", SknnConfig(k=5, sample_size=5),
                                  catalog, sparse_floor=1)
        by_name = {e.spec.name: e for e in registry.entries}
        assert by_name["Sports_local"].model is None
        assert by_name["Sports_local"].sparse
        assert by_name["News_local"].model is not None

    def test_sparse_flag_below_floor(self, tiny_catalog):
        split = tiny_split(tiny_catalog)
        scheme = build_scheme(tiny_catalog, "per_category_full")
        registry = train_registry(split, scheme, "sknn", SknnConfig(k=5, sample_size=10),
                                  tiny_catalog, sparse_floor=10_000)
        assert all(e.sparse for e in registry.entries)

    def test_partition_soundness_replay(self, tiny_catalog):
        # every click used to train submodel i matches segment spec i
        split = tiny_split(tiny_catalog)
        scheme = build_scheme(tiny_catalog, "per_category_plus_pooled")
        by_id = tiny_catalog.by_id
        for seg in scheme.segments:
            for s in segments.filter_interactions(split.train, seg, tiny_catalog):
                for aid, _ in s.clicks:
                    a = by_id[aid]
                    assert seg.matches(a.category, a.locality)

    def test_sasrec_base(self, tiny_catalog):
        split = tiny_split(tiny_catalog, n=12)
        scheme = build_scheme(tiny_catalog, "per_category_full")
        cfg = SasrecConfig(max_seq_len=4, embed_dim=8, n_blocks=1, n_heads=1,
                           dropout_rate=0.0, n_epochs=1, batch_size=4, seed=2)
        registry = train_registry(split, scheme, "sasrec", cfg, tiny_catalog,
                                  sparse_floor=2)
        assert len(registry) == 9
        trained = [e for e in registry.entries if e.model is not None]
        assert trained
        for e in trained:
            matching = {a.article_id for a in tiny_catalog.articles
                        if e.spec.matches(a.category, a.locality)}
            assert e.model.vocab <= matching


class TestRegistryPersistence:
    def test_save_load_preserves_order_and_flags(self, tmp_path, tiny_catalog):
        split = tiny_split(tiny_catalog)
        scheme = build_scheme(tiny_catalog, "per_category_plus_pooled")
        registry = train_registry(split, scheme, "sknn", SknnConfig(k=5, sample_size=10),
                                  tiny_catalog, sparse_floor=5)
        save_registry(registry, tmp_path / "reg")
        again = load_registry(tmp_path / "reg")
        assert again.scheme.names == registry.scheme.names
        assert [e.sparse for e in again.entries] == [e.sparse for e in registry.entries]
        assert again.fingerprint() == registry.fingerprint()

    def test_fingerprint_changes_with_scheme(self, tmp_path, tiny_catalog):
        split = tiny_split(tiny_catalog)
        cfg = SknnConfig(k=5, sample_size=10)
        r1 = train_registry(split, build_scheme(tiny_catalog, "per_category_full"),
                            "sknn", cfg, tiny_catalog)
        r2 = train_registry(split, build_scheme(tiny_catalog, "per_category_plus_pooled"),
                            "sknn", cfg, tiny_catalog)
        assert r1.fingerprint() != r2.fingerprint()
