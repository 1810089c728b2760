import csv
from pathlib import Path

import pytest

from newsfuse.corpus import Locality
from newsfuse.errors import TransportError, UnparseableResponse
from newsfuse.labeler import (
    ArticleText,
    LabelerConfig,
    build_prompt,
    classify,
    label_corpus,
    mock_transport_from_fixture,
    normalize_response,
)

GOLDEN = Path(__file__).parent / "data" / "prompt_golden.txt"

GOLDEN_ARTICLE = ArticleText(
    article_id="eb-001",
    title="Storm over Danmark",
    subtitle="DMI varsler kraftig blæst",
    body="Et lavtryk passerer landet i aften med vindstød af orkanstyrke.",
)


def mock_config(tmp_path, responses: dict[str, str]) -> LabelerConfig:
    fixture = tmp_path / "mock.csv"
    with open(fixture, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["article_id", "response"])
        for aid, resp in responses.items():
            w.writerow([aid, resp])
    return LabelerConfig(mock_mode=True, mock_fixture=str(fixture), max_retries=1)


class TestBuildPrompt:
    def test_matches_golden_file_byte_for_byte(self):
        assert build_prompt(GOLDEN_ARTICLE).encode("utf-8") == GOLDEN.read_bytes()

    def test_substituted_lines_present(self):
        prompt = build_prompt(ArticleText("id", "A", "B", "C"))
        lines = prompt.splitlines()
        assert "Title: A" in lines
        assert "Subtitle: B" in lines
        assert "Body: C" in lines
        assert ("Important: Output only the single word 'local' or 'nonlocal' "
                "with no additional text or explanation.") in lines

    def test_empty_subtitle_keeps_line(self):
        prompt = build_prompt(ArticleText("id", "A", "", "C"))
        assert "Subtitle: " in prompt.splitlines()

    def test_prompts_differ_only_in_substituted_fields(self):
        p1 = build_prompt(ArticleText("id", "A", "B", "C")).splitlines()
        p2 = build_prompt(ArticleText("id", "X", "B", "C")).splitlines()
        diffs = [i for i, (a, b) in enumerate(zip(p1, p2)) if a != b]
        assert len(p1) == len(p2)
        assert diffs == [1]  # only the Title line

    def test_title_required(self):
        with pytest.raises(ValueError):
            ArticleText("id", "")


class TestClassify:
    def test_exact_local(self, tmp_path):
        cfg = mock_config(tmp_path, {"a1": "local"})
        assert classify(ArticleText("a1", "t"), cfg) is Locality.LOCAL

    def test_normalization_trims_and_lowercases(self, tmp_path):
        cfg = mock_config(tmp_path, {"a1": " Nonlocal\n"})
        assert classify(ArticleText("a1", "t"), cfg) is Locality.NONLOCAL

    def test_sentence_is_rejected_after_retries(self, tmp_path):
        cfg = mock_config(tmp_path, {"a1": "This article is local."})
        with pytest.raises(UnparseableResponse):
            classify(ArticleText("a1", "t"), cfg)

    def test_normalize_is_strict(self):
        assert normalize_response("local") is Locality.LOCAL
        assert normalize_response("NONLOCAL ") is Locality.NONLOCAL
        for bad in ("non-local", "local.", "it is local", "", "locality"):
            assert normalize_response(bad) is None

    def test_transport_retry_then_success(self):
        calls = []

        def flaky(article, prompt):
            calls.append(1)
            if len(calls) < 2:
                raise TransportError("timeout")
            return "local"

        cfg = LabelerConfig(endpoint_url="http://example.invalid", max_retries=2)
        assert classify(ArticleText("a1", "t"), cfg, transport=flaky) is Locality.LOCAL
        assert len(calls) == 2

    def test_transport_errors_exhaust_retries(self):
        def down(article, prompt):
            raise TransportError("connection refused")

        cfg = LabelerConfig(endpoint_url="http://example.invalid", max_retries=1)
        with pytest.raises(TransportError):
            classify(ArticleText("a1", "t"), cfg, transport=down)


class TestLabelCorpus:
    def articles(self, n=3):
        return [ArticleText(f"a{i}", f"title {i}") for i in range(1, n + 1)]

    def test_all_local(self, tmp_path):
        cfg = mock_config(tmp_path, {f"a{i}": "local" for i in (1, 2, 3)})
        result = label_corpus(self.articles(), cfg)
        assert len(result.labels) == 3 and not result.failures
        assert set(result.labels.values()) == {Locality.LOCAL}

    def test_partial_failure_preserved(self, tmp_path):
        cfg = mock_config(tmp_path, {"a1": "local", "a2": "broken answer", "a3": "nonlocal"})
        result = label_corpus(self.articles(), cfg)
        assert len(result.labels) == 2
        assert [f[0] for f in result.failures] == ["a2"]

    def test_resume_skips_completed(self, tmp_path):
        progress = tmp_path / "progress.csv"
        queried = []

        def transport(article, prompt):
            queried.append(article.article_id)
            return "local"

        cfg = LabelerConfig(endpoint_url="http://example.invalid", concurrency=1)
        label_corpus(self.articles(2), cfg, progress_path=progress, transport=transport)
        assert sorted(queried) == ["a1", "a2"]

        queried.clear()
        result = label_corpus(self.articles(3), cfg, progress_path=progress,
                              transport=transport)
        assert queried == ["a3"]  # articles 1-2 replayed from the progress file
        assert result.skipped == 2
        assert len(result.labels) == 3

    def test_idempotent_on_complete_progress(self, tmp_path):
        progress = tmp_path / "progress.csv"
        cfg = mock_config(tmp_path, {"a1": "local", "a2": "nonlocal", "a3": "local"})
        first = label_corpus(self.articles(), cfg, progress_path=progress)
        before = progress.read_bytes()

        def explode(article, prompt):  # must never be called on resume
            raise AssertionError("re-queried a completed article")

        second = label_corpus(self.articles(), cfg, progress_path=progress,
                              transport=explode)
        assert progress.read_bytes() == before
        assert second.labels == first.labels

    def test_concurrent_labeling(self, tmp_path):
        many = [ArticleText(f"a{i}", "t") for i in range(40)]
        cfg = mock_config(tmp_path, {f"a{i}": "local" if i % 2 else "nonlocal"
                                     for i in range(40)})
        cfg = LabelerConfig(mock_mode=True, mock_fixture=cfg.mock_fixture, concurrency=4)
        result = label_corpus(many, cfg)
        assert len(result.labels) == 40
        assert result.labels["a1"] is Locality.LOCAL
        assert result.labels["a2"] is Locality.NONLOCAL


class TestMockTransport:
    def test_missing_fixture_entry_is_unparseable(self, tmp_path):
        transport = mock_transport_from_fixture(
            mock_config(tmp_path, {"a1": "local"}).mock_fixture
        )
        with pytest.raises(UnparseableResponse):
            transport(ArticleText("zz", "t"), "prompt")
