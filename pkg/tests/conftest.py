"""Shared fixtures: tiny catalogs, session builders, an EB-shaped corpus."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from newsfuse.corpus import Article, Catalog, Locality, Session

CATEGORIES = ("News", "Sports", "Life and Culture")

EB_CATEGORIES = (
    "nyheder", "sport", "krimi", "underholdning", "nationen",
    "penge", "musik", "forbrug", "sex og samliv", "ferie",
)


def make_catalog(n_per_cell: int = 2) -> Catalog:
    articles = []
    i = 0
    for cat in CATEGORIES:
        for loc in (Locality.LOCAL, Locality.NONLOCAL):
            for _ in range(n_per_cell):
                articles.append(Article(f"a{i:03d}", cat, loc))
                i += 1
    return Catalog(tuple(articles), frozenset(CATEGORIES))


def make_session(session_id: str, items: list[str], start: int = 0,
                 user: str | None = None, step: int = 60) -> Session:
    clicks = tuple((a, start + i * step) for i, a in enumerate(items))
    return Session(session_id, user or f"user-{session_id}", clicks)


@pytest.fixture
def tiny_catalog() -> Catalog:
    return make_catalog()


def write_eb_fixture(root: Path, n_per_category: int = 5, n_users: int = 60,
                     seed: int = 0) -> dict[str, Path]:
    """EB-NeRD-shaped corpus: ten Danish categories, no locality column,
    article texts for the labeler, a mock-response fixture, and a click log
    with explicit session ids spread over time."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = {
        "articles": root / "eb_articles.csv",
        "texts": root / "eb_texts.csv",
        "interactions": root / "eb_interactions.csv",
        "mock": root / "eb_mock_responses.csv",
    }

    article_ids = []
    with open(paths["articles"], "w", newline="", encoding="utf-8") as fa, \
            open(paths["texts"], "w", newline="", encoding="utf-8") as ft, \
            open(paths["mock"], "w", newline="", encoding="utf-8") as fm:
        wa, wt, wm = csv.writer(fa), csv.writer(ft), csv.writer(fm)
        wa.writerow(["article_id", "category"])
        wt.writerow(["article_id", "title", "subtitle", "body"])
        wm.writerow(["article_id", "response"])
        i = 0
        for cat in EB_CATEGORIES:
            for j in range(n_per_category):
                aid = f"eb{i:04d}"
                article_ids.append(aid)
                wa.writerow([aid, cat])
                wt.writerow([aid, f"Overskrift {i}", f"Underrubrik {i}",
                             f"Brødtekst om {cat} nummer {j}."])
                wm.writerow([aid, "local" if i % 2 == 0 else "nonlocal"])
                i += 1

    with open(paths["interactions"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "article_id", "timestamp", "session_id"])
        t = 1_700_000_000
        for u in range(n_users):
            for s in range(2):
                sid = f"u{u:03d}-s{s}"
                t += int(rng.integers(600, 7200))
                ts = t
                for c in range(int(rng.integers(3, 6))):
                    aid = article_ids[int(rng.integers(0, len(article_ids)))]
                    w.writerow([f"u{u:03d}", aid, ts, sid])
                    ts += int(rng.integers(30, 120))
    return paths
