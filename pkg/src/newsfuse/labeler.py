"""Locality labeling of articles through a chat-completion endpoint.

The client speaks the OpenAI-compatible chat-completion wire shape, accepts
exactly the two normalized words ``local`` / ``nonlocal`` as answers, and
keeps a resumable progress file so large corpora can be labeled in several
runs. A mock transport backed by a fixture file allows full-pipeline tests
without any network.
"""

from __future__ import annotations

import csv
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests

from .corpus import Locality
from .errors import TransportError, UnparseableResponse

PROMPT_TEMPLATE = """You are given a news article from Ekstra Bladet (in Danish) with the following details:
Title: {title}
Subtitle: {subtitle}
Body: {body}

Task:
1. Read the title, subtitle, and body of the article carefully.
2. Determine whether the article is about Denmark (local) or about other countries / global topics (non-local).
3. Provide your classification as either 'local' or 'nonlocal'.

Important: Output only the single word 'local' or 'nonlocal' with no additional text or explanation.

Now, please provide the answer."""

API_KEY_ENV = "NEWSFUSE_API_KEY"

# A transport maps (article, prompt) to the raw response text.
Transport = Callable[["ArticleText", str], str]


@dataclass(frozen=True)
class ArticleText:
    article_id: str
    title: str
    subtitle: str = ""
    body: str = ""

    def __post_init__(self):
        if not self.title:
            raise ValueError("article title must be non-empty")


@dataclass(frozen=True)
class LabelerConfig:
    endpoint_url: str = ""
    model_name: str = "llama3"
    max_retries: int = 2
    timeout: float = 30.0
    mock_mode: bool = False
    mock_fixture: str | None = None
    concurrency: int = 4
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.mock_mode and not self.mock_fixture:
            raise ValueError("mock_mode requires a mock_fixture file")


@dataclass
class LabelingResult:
    labels: dict[str, Locality]
    failures: list[tuple[str, str]] = field(default_factory=list)
    skipped: int = 0  # already present in the progress file


def build_prompt(article: ArticleText) -> str:
    """Instantiate the classification prompt for one article."""
    return PROMPT_TEMPLATE.format(
        title=article.title, subtitle=article.subtitle, body=article.body
    )


def normalize_response(text: str) -> Locality | None:
    """Trim + lowercase; only the two exact words are accepted."""
    word = text.strip().lower()
    if word == "local":
        return Locality.LOCAL
    if word == "nonlocal":
        return Locality.NONLOCAL
    return None


def _http_transport(config: LabelerConfig) -> Transport:
    api_key = os.environ.get(API_KEY_ENV, "")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    def call(article: ArticleText, prompt: str) -> str:
        payload = {
            "model": config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
        }
        try:
            resp = requests.post(
                config.endpoint_url, json=payload, headers=headers, timeout=config.timeout
            )
            resp.raise_for_status()
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransportError(str(exc)) from exc
        except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"bad response from endpoint: {exc}") from exc

    return call


def mock_transport_from_fixture(path: str | Path) -> Transport:
    """Transport that replays raw responses from a ``article_id,response`` CSV."""
    responses: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["article_id", "response"]:
            raise ValueError(f"mock fixture must have header article_id,response, got {header}")
        for row in reader:
            if len(row) != 2:
                continue
            responses[row[0]] = row[1]

    def call(article: ArticleText, prompt: str) -> str:
        if article.article_id not in responses:
            raise UnparseableResponse(f"no mock response for {article.article_id}")
        return responses[article.article_id]

    return call


def _resolve_transport(config: LabelerConfig, transport: Transport | None) -> Transport:
    if transport is not None:
        return transport
    if config.mock_mode:
        return mock_transport_from_fixture(config.mock_fixture)
    if not config.endpoint_url:
        raise ValueError("endpoint_url required when not in mock mode")
    return _http_transport(config)


def classify(
    article: ArticleText, config: LabelerConfig, transport: Transport | None = None
) -> Locality:
    """Classify one article as Local or NonLocal.

    Retries up to ``max_retries`` extra attempts on transport failures and on
    responses that are not exactly one of the two accepted words.
    """
    call = _resolve_transport(config, transport)
    prompt = build_prompt(article)
    last_error: Exception | None = None
    for _ in range(config.max_retries + 1):
        try:
            raw = call(article, prompt)
        except TransportError as exc:
            last_error = exc
            continue
        label = normalize_response(raw)
        if label is not None:
            return label
        last_error = UnparseableResponse(
            f"{article.article_id}: expected 'local' or 'nonlocal', got {raw!r}"
        )
    raise last_error


def _read_progress(path: Path) -> dict[str, Locality]:
    done: dict[str, Locality] = {}
    if not path.exists():
        return done
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["article_id", "label"]:
            raise ValueError(f"progress file must have header article_id,label, got {header}")
        for row in reader:
            if len(row) != 2:
                continue
            label = normalize_response(row[1])
            if label is not None:
                done[row[0]] = label
    return done


def label_corpus(
    articles: Sequence[ArticleText],
    config: LabelerConfig,
    progress_path: str | Path | None = None,
    transport: Transport | None = None,
) -> LabelingResult:
    """Label a corpus, preserving partial results and resuming from progress.

    Successful labels are appended to ``progress_path`` as they arrive (one
    writer, any number of in-flight requests); articles already present there
    are not re-queried. Failures are collected per article, never aborting
    the rest of the corpus.
    """
    call = _resolve_transport(config, transport)
    labels: dict[str, Locality] = {}
    skipped = 0

    progress = Path(progress_path) if progress_path else None
    if progress is not None:
        done = _read_progress(progress)
        labels.update(done)
        skipped = sum(1 for a in articles if a.article_id in done)
        if not progress.exists():
            with open(progress, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(["article_id", "label"])

    pending = [a for a in articles if a.article_id not in labels]
    failures: list[tuple[str, str]] = []
    write_lock = threading.Lock()

    def work(article: ArticleText) -> tuple[str, Locality | None, str | None]:
        try:
            return article.article_id, classify(article, config, transport=call), None
        except (UnparseableResponse, TransportError) as exc:
            return article.article_id, None, str(exc)

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        for article_id, label, error in pool.map(work, pending):
            if label is None:
                failures.append((article_id, error))
                continue
            labels[article_id] = label
            if progress is not None:
                with write_lock:
                    with open(progress, "a", newline="", encoding="utf-8") as fh:
                        csv.writer(fh).writerow([article_id, label.value])

    failures.sort(key=lambda f: f[0])
    return LabelingResult(labels=labels, failures=failures, skipped=skipped)


def read_article_texts(path: str | Path) -> list[ArticleText]:
    """Read an ``article_id,title,subtitle,body`` CSV of article texts."""
    out: list[ArticleText] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["article_id", "title", "subtitle", "body"]:
            raise ValueError(
                f"texts file must have header article_id,title,subtitle,body, got {header}"
            )
        for row in reader:
            out.append(ArticleText(row[0], row[1], row[2], row[3]))
    return out


def apply_labels(labels: dict[str, Locality], articles: Iterable) -> list:
    """Return catalog articles with locality overridden by the label map."""
    from .corpus import Article

    out = []
    for a in articles:
        out.append(Article(a.article_id, a.category, labels.get(a.article_id, a.locality)))
    return out
