"""Chronological next-item evaluation: HR@K and catalog coverage.

Every model variant ranks the same full candidate pool per event: all items
of the training vocabulary minus the items already in the prefix. Ties break
by ascending item id, unscorable items rank last, and truths outside the
training vocabulary count as misses, so reports are comparable across models
with different vocabularies.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import Catalog, Session
from .errors import MismatchedEventSets
from .util import derive_rng

DEFAULT_KS = (10, 20, 50)


@dataclass(frozen=True)
class PredictionEvent:
    session_id: str
    prefix: tuple[str, ...]
    truth: str

    def __post_init__(self):
        if not self.prefix:
            raise ValueError("prediction event prefix must be non-empty")


@dataclass(frozen=True)
class MetricsReport:
    model_name: str
    hit_rate: dict[int, float]
    coverage: float
    n_events: int
    config_fingerprint: str

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(sorted(self.hit_rate))


class Recommender(Protocol):
    name: str

    def score_matrix(self, prefixes: Sequence[Sequence[str]],
                     candidates: Sequence[str]) -> np.ndarray: ...


def enumerate_events(test_sessions: Iterable[Session],
                     positions: str = "all") -> list[PredictionEvent]:
    """One event per prefix position (``all``) or only the final click of each
    session (``last``); session order is preserved."""
    if positions not in ("all", "last"):
        raise ValueError("positions must be 'all' or 'last'")
    events: list[PredictionEvent] = []
    for s in test_sessions:
        items = s.items
        if len(items) < 2:
            continue
        ts = range(1, len(items)) if positions == "all" else [len(items) - 1]
        for t in ts:
            events.append(PredictionEvent(s.session_id, tuple(items[:t]), items[t]))
    return events


def hit_at_k(ranked: Sequence[str], truth: str, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(truth in ranked[:k])


def event_fingerprint(events: Sequence[PredictionEvent], ks: Sequence[int],
                      pool: Sequence[str]) -> str:
    h = hashlib.sha256()
    h.update((",".join(str(k) for k in sorted(ks))).encode())
    h.update(str(len(pool)).encode())
    for item in pool:
        h.update(item.encode())
    for e in events:
        h.update(f"{e.session_id}|{len(e.prefix)}|{e.truth}\n".encode())
    return h.hexdigest()


def evaluate(recommender: Recommender, events: Sequence[PredictionEvent],
             catalog: Catalog, ks: Sequence[int] = DEFAULT_KS,
             train_vocab: Iterable[str] | None = None,
             chunk: int = 256) -> MetricsReport:
    """Rank the full train-vocabulary pool per event and aggregate HR@K.

    Coverage is the fraction of the catalog appearing in at least one emitted
    top-max(K) list. When ``train_vocab`` is omitted it defaults to the whole
    catalog.
    """
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ValueError("cutoffs must be positive")
    pool = sorted(train_vocab) if train_vocab is not None else sorted(
        a.article_id for a in catalog.articles
    )
    pool_index = {item: i for i, item in enumerate(pool)}
    kmax = ks[-1]

    hits = {k: 0 for k in ks}
    recommended: set[str] = set()
    for start in range(0, len(events), chunk):
        part = events[start:start + chunk]
        scores = np.asarray(
            recommender.score_matrix([list(e.prefix) for e in part], pool),
            dtype=np.float64,
        )
        scores = np.where(np.isnan(scores), -np.inf, scores)
        for row, event in zip(scores, part):
            excluded = {pool_index[a] for a in event.prefix if a in pool_index}
            # Stable sort over the lexicographically ordered pool: ties break
            # by ascending item id.
            order = np.argsort(-row, kind="stable")
            top: list[int] = []
            for idx in order:
                if int(idx) in excluded:
                    continue
                top.append(int(idx))
                if len(top) >= kmax:
                    break
            truth_idx = pool_index.get(event.truth)
            rank = top.index(truth_idx) if truth_idx in top else None
            for k in ks:
                if rank is not None and rank < k:
                    hits[k] += 1
            recommended.update(pool[i] for i in top)

    n = len(events)
    hr = {k: (hits[k] / n if n else 0.0) for k in ks}
    coverage = len(recommended) / max(len(catalog), 1)
    return MetricsReport(
        model_name=recommender.name,
        hit_rate=hr,
        coverage=coverage,
        n_events=n,
        config_fingerprint=event_fingerprint(events, ks, pool),
    )


@dataclass(frozen=True)
class ComparisonTable:
    ks: tuple[int, ...]
    rows: tuple[tuple[str, dict[int, float], float], ...]  # (model, HR@K map, coverage)
    best: dict[int, float]

    def is_best(self, k: int, value: float) -> bool:
        return value >= self.best[k]


def compare_report(reports: Sequence[MetricsReport]) -> ComparisonTable:
    """Side-by-side table of reports computed over one shared event set."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    first = reports[0]
    for r in reports[1:]:
        if r.ks != first.ks or r.n_events != first.n_events \
                or r.config_fingerprint != first.config_fingerprint:
            raise MismatchedEventSets(
                f"report {r.model_name!r} was not computed over the same events/cutoffs "
                f"as {first.model_name!r}"
            )
    ks = first.ks
    best = {k: max(r.hit_rate[k] for r in reports) for k in ks}
    rows = tuple((r.model_name, dict(r.hit_rate), r.coverage) for r in reports)
    return ComparisonTable(ks, rows, best)


class UniformRandomRecommender:
    """Seeded uniform ranking over the pool; metric-sanity harness."""

    def __init__(self, seed: int = 0, name: str = "uniform-random"):
        self.name = name
        self.seed = seed
        self._row = 0

    def score_matrix(self, prefixes, candidates):
        out = np.empty((len(prefixes), len(candidates)))
        for i in range(len(prefixes)):
            rng = derive_rng(self.seed, "uniform", self._row + i)
            out[i] = rng.random(len(candidates))
        self._row += len(prefixes)
        return out


class OracleRecommender:
    """Scores the known truth highest; upper-bound sanity check."""

    def __init__(self, events: Sequence[PredictionEvent], name: str = "oracle"):
        self.name = name
        self._events = events
        self._row = 0

    def score_matrix(self, prefixes, candidates):
        idx = {c: i for i, c in enumerate(candidates)}
        out = np.zeros((len(prefixes), len(candidates)))
        for i in range(len(prefixes)):
            truth = self._events[self._row + i].truth
            if truth in idx:
                out[i, idx[truth]] = 1.0
        self._row += len(prefixes)
        return out
