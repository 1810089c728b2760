"""Data model, CSV ingestion, sessionization, and chronological splitting.

File shapes (UTF-8 CSV with header row):

* articles:      ``article_id,category,locality`` where locality is ``local``,
  ``nonlocal``, or empty (empty means unknown). EB-shaped article files may
  omit the locality column entirely.
* interactions:  ``user_id,article_id,timestamp,session_id`` where timestamp
  is integer seconds since epoch and session_id may be empty.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    DuplicateArticleId,
    InsufficientSessions,
    MalformedRow,
    UnresolvableArticle,
)

ARTICLE_HEADER = ["article_id", "category", "locality"]
INTERACTION_HEADER = ["user_id", "article_id", "timestamp", "session_id"]

DEFAULT_SESSION_GAP_SECONDS = 30 * 60
DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)


class Locality(Enum):
    LOCAL = "local"
    NONLOCAL = "nonlocal"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Article:
    article_id: str
    category: str
    locality: Locality = Locality.UNKNOWN


@dataclass(frozen=True)
class Catalog:
    """Immutable article catalog with its declared category taxonomy."""

    articles: tuple[Article, ...]
    taxonomy: frozenset[str]

    def __post_init__(self):
        seen = set()
        for a in self.articles:
            if a.article_id in seen:
                raise DuplicateArticleId(a.article_id)
            seen.add(a.article_id)
            if a.category not in self.taxonomy:
                raise ValueError(
                    f"article {a.article_id} has category {a.category!r} "
                    f"outside the declared taxonomy"
                )

    @property
    def by_id(self) -> dict[str, Article]:
        # Cached lazily on the instance; frozen dataclass, so stash via object.__setattr__.
        cache = self.__dict__.get("_by_id")
        if cache is None:
            cache = {a.article_id: a for a in self.articles}
            object.__setattr__(self, "_by_id", cache)
        return cache

    def __len__(self) -> int:
        return len(self.articles)


@dataclass(frozen=True)
class Interaction:
    user_id: str
    article_id: str
    timestamp: int
    session_id: str | None = None


@dataclass(frozen=True)
class Session:
    """Ordered sequence of article clicks by one user."""

    session_id: str
    user_id: str
    clicks: tuple[tuple[str, int], ...]  # (article_id, timestamp)

    def __post_init__(self):
        if not self.clicks:
            raise ValueError("a session holds at least one click")
        times = [t for _, t in self.clicks]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("session clicks must be ordered by non-decreasing timestamp")

    @property
    def items(self) -> tuple[str, ...]:
        return tuple(a for a, _ in self.clicks)

    @property
    def first_timestamp(self) -> int:
        return self.clicks[0][1]

    @property
    def last_timestamp(self) -> int:
        return self.clicks[-1][1]

    @property
    def too_short(self) -> bool:
        """Length-1 sessions produce no prediction events."""
        return len(self.clicks) < 2


@dataclass(frozen=True)
class SplitBundle:
    train: tuple[Session, ...]
    validation: tuple[Session, ...]
    test: tuple[Session, ...]
    boundary_timestamps: tuple[int, int]
    unseen_items: frozenset[str] = field(default_factory=frozenset)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.validation), len(self.test))


def _read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return [], []
        return header, list(reader)


def parse_articles(
    path: str | Path,
    format: str = "syracuse_csv",
    taxonomy: Iterable[str] | None = None,
) -> Catalog:
    """Parse an article catalog file.

    ``format`` is ``syracuse_csv`` (locality column required) or ``ebnerd_csv``
    (locality column optional; missing column yields Unknown everywhere).
    When ``taxonomy`` is given, rows with a category outside it raise
    MalformedRow; otherwise the taxonomy is the set of observed categories.
    """
    if format not in ("syracuse_csv", "ebnerd_csv"):
        raise ValueError(f"unknown articles format {format!r}")
    header, rows = _read_rows(path)
    if not header:
        raise MalformedRow(1, "missing header row")
    if header[:2] != ARTICLE_HEADER[:2]:
        raise MalformedRow(1, f"expected header starting {ARTICLE_HEADER[:2]}, got {header}")
    has_locality = len(header) >= 3 and header[2] == "locality"
    if format == "syracuse_csv" and not has_locality:
        raise MalformedRow(1, "syracuse_csv requires a locality column")

    declared = frozenset(taxonomy) if taxonomy is not None else None
    articles: list[Article] = []
    seen: set[str] = set()
    for i, row in enumerate(rows, start=2):
        if len(row) < 2 or (has_locality and len(row) < 3):
            raise MalformedRow(i, f"expected {3 if has_locality else 2} fields, got {len(row)}")
        article_id, category = row[0], row[1]
        if not article_id:
            raise MalformedRow(i, "empty article_id")
        if article_id in seen:
            raise DuplicateArticleId(article_id)
        seen.add(article_id)
        if declared is not None and category not in declared:
            raise MalformedRow(i, f"category {category!r} not in declared taxonomy")
        locality = Locality.UNKNOWN
        if has_locality:
            raw = row[2].strip().lower()
            if raw == "local":
                locality = Locality.LOCAL
            elif raw == "nonlocal":
                locality = Locality.NONLOCAL
            elif raw != "":
                raise MalformedRow(i, f"locality must be local, nonlocal, or empty; got {row[2]!r}")
        articles.append(Article(article_id, category, locality))

    tax = declared if declared is not None else frozenset(a.category for a in articles)
    return Catalog(tuple(articles), tax)


def parse_interactions(path: str | Path) -> list[Interaction]:
    """Parse an interaction log; rows come back in file order."""
    header, rows = _read_rows(path)
    if not header and not rows:
        return []
    if header != INTERACTION_HEADER:
        raise MalformedRow(1, f"expected header {INTERACTION_HEADER}, got {header}")
    out: list[Interaction] = []
    for i, row in enumerate(rows, start=2):
        if len(row) != 4:
            raise MalformedRow(i, f"expected 4 fields, got {len(row)}")
        user_id, article_id, ts_raw, session_id = row
        if not user_id or not article_id:
            raise MalformedRow(i, "empty user_id or article_id")
        try:
            ts = int(ts_raw)
        except ValueError:
            raise MalformedRow(i, f"timestamp {ts_raw!r} is not an integer") from None
        out.append(Interaction(user_id, article_id, ts, session_id or None))
    return out


def write_articles(catalog: Catalog, path: str | Path) -> None:
    """Inverse of parse_articles for the syracuse-shaped format."""
    loc_token = {Locality.LOCAL: "local", Locality.NONLOCAL: "nonlocal", Locality.UNKNOWN: ""}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ARTICLE_HEADER)
        for a in catalog.articles:
            w.writerow([a.article_id, a.category, loc_token[a.locality]])


def write_interactions(interactions: Iterable[Interaction], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(INTERACTION_HEADER)
        for it in interactions:
            w.writerow([it.user_id, it.article_id, it.timestamp, it.session_id or ""])


def sessions_to_interactions(sessions: Iterable[Session]) -> list[Interaction]:
    return [
        Interaction(s.user_id, article_id, ts, s.session_id)
        for s in sessions
        for article_id, ts in s.clicks
    ]


def resolve_against(interactions: Iterable[Interaction], catalog: Catalog) -> None:
    """Raise UnresolvableArticle for the first click not present in the catalog."""
    known = catalog.by_id
    for it in interactions:
        if it.article_id not in known:
            raise UnresolvableArticle(it.article_id)


def sessionize(
    interactions: Sequence[Interaction],
    gap: float = DEFAULT_SESSION_GAP_SECONDS,
) -> list[Session]:
    """Group interactions into sessions.

    If every interaction carries a session_id the grouping is by that id;
    otherwise a new session starts per user whenever the inter-click gap
    exceeds ``gap`` seconds. Length-1 sessions are retained (callers check
    ``Session.too_short``). Output is ordered by (first timestamp, user_id,
    session_id) with input order breaking residual ties.
    """
    if gap <= 0:
        raise ValueError("gap must be positive")
    if not interactions:
        return []

    sessions: list[Session] = []
    if all(it.session_id is not None for it in interactions):
        groups: dict[str, list[tuple[int, Interaction]]] = defaultdict(list)
        for order, it in enumerate(interactions):
            groups[it.session_id].append((order, it))
        for sid in groups:
            rows = sorted(groups[sid], key=lambda r: (r[1].timestamp, r[0]))
            sessions.append(
                Session(sid, rows[0][1].user_id, tuple((r.article_id, r.timestamp) for _, r in rows))
            )
    else:
        per_user: dict[str, list[tuple[int, Interaction]]] = defaultdict(list)
        for order, it in enumerate(interactions):
            per_user[it.user_id].append((order, it))
        for user_id in per_user:
            rows = sorted(per_user[user_id], key=lambda r: (r[1].timestamp, r[0]))
            run: list[Interaction] = []
            n_done = 0
            for _, it in rows:
                if run and it.timestamp - run[-1].timestamp > gap:
                    sessions.append(
                        Session(f"{user_id}:{n_done}", user_id, tuple((x.article_id, x.timestamp) for x in run))
                    )
                    n_done += 1
                    run = []
                run.append(it)
            sessions.append(
                Session(f"{user_id}:{n_done}", user_id, tuple((x.article_id, x.timestamp) for x in run))
            )

    sessions.sort(key=lambda s: (s.first_timestamp, s.user_id, s.session_id))
    return sessions


def chronological_split(
    sessions: Sequence[Session],
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
) -> SplitBundle:
    """Split sessions chronologically by first-click timestamp quantiles.

    After the quantile cut, boundaries advance so that no validation (test)
    session starts at or before the last click already inside train
    (train+validation): the split keeps whole sessions on one side of each
    boundary timestamp. Items appearing in validation/test but not train are
    recorded in ``unseen_items``.
    """
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    n = len(sessions)
    if n < 3:
        raise InsufficientSessions(f"need at least 3 sessions, got {n}")

    order = sorted(range(n), key=lambda i: (sessions[i].first_timestamp, i))
    ordered = [sessions[i] for i in order]

    i1 = int(round(ratios[0] * n))
    i2 = int(round((ratios[0] + ratios[1]) * n))
    i1 = max(1, min(i1, n - 2))
    i2 = max(i1 + 1, min(i2, n - 1))

    def advance(boundary: int) -> int:
        # Keep moving sessions into the earlier side while they start at or
        # before the latest click already inside it.
        latest = max(s.last_timestamp for s in ordered[:boundary])
        while boundary < n and ordered[boundary].first_timestamp <= latest:
            latest = max(latest, ordered[boundary].last_timestamp)
            boundary += 1
        return boundary

    i1 = advance(i1)
    i2 = advance(max(i2, i1))

    train = tuple(ordered[:i1])
    validation = tuple(ordered[i1:i2])
    test = tuple(ordered[i2:])

    t_train_end = max(s.last_timestamp for s in train)
    t_val_end = max((s.last_timestamp for s in validation), default=t_train_end)

    train_vocab = {a for s in train for a in s.items}
    unseen = {a for s in validation + test for a in s.items} - train_vocab
    return SplitBundle(train, validation, test, (t_train_end, t_val_end), frozenset(unseen))


def category_locality_histograms(
    sessions: Iterable[Session], catalog: Catalog
) -> dict[tuple[str, str], int]:
    """Click counts per (category, locality) cell, for split-similarity checks."""
    counts: Counter[tuple[str, str]] = Counter()
    by_id = catalog.by_id
    for s in sessions:
        for article_id, _ in s.clicks:
            a = by_id.get(article_id)
            if a is None:
                raise UnresolvableArticle(article_id)
            counts[(a.category, a.locality.value)] += 1
    return dict(sorted(counts.items()))


def split_histograms(bundle: SplitBundle, catalog: Catalog) -> dict[str, dict[tuple[str, str], int]]:
    return {
        "train": category_locality_histograms(bundle.train, catalog),
        "validation": category_locality_histograms(bundle.validation, catalog),
        "test": category_locality_histograms(bundle.test, catalog),
    }
