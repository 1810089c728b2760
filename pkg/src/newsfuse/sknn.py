"""Session-based k-nearest-neighbor recommender.

Memory-based baseline: similarity between the active prefix and stored
sessions is the cosine of their binary item-set vectors; a candidate item's
score is the summed similarity of the top-k neighbor sessions containing it.
Candidate neighbor sessions are gathered through an inverted item index and
truncated to the most recently stored ``sample_size`` sessions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Session
from .errors import CheckpointError, EmptyTrainingSet

DEFAULT_K = 100
DEFAULT_SAMPLE_SIZE = 1000


@dataclass(frozen=True)
class SknnConfig:
    k: int = DEFAULT_K
    sample_size: int = DEFAULT_SAMPLE_SIZE


class SknnModel:
    """Immutable after fit; scoring is read-only and thread-safe."""

    def __init__(self, session_ids: list[str], item_sets: list[frozenset[str]],
                 k: int, sample_size: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        if sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        self.session_ids = session_ids
        self.item_sets = item_sets
        self.k = k
        self.sample_size = sample_size
        self.item_index: dict[str, list[int]] = {}
        for pos, items in enumerate(item_sets):
            for item in sorted(items):
                self.item_index.setdefault(item, []).append(pos)
        self.vocab = frozenset(self.item_index)

    @property
    def n_sessions(self) -> int:
        return len(self.item_sets)


def fit(sessions: Sequence[Session], k: int = DEFAULT_K,
        sample_size: int = DEFAULT_SAMPLE_SIZE) -> SknnModel:
    """Index training sessions; duplicate clicks collapse to set membership.

    Session recency follows input order (later = more recent), so callers
    pass sessions chronologically.
    """
    if not sessions:
        raise EmptyTrainingSet("sknn requires at least one training session")
    ids = [s.session_id for s in sessions]
    sets = [frozenset(s.items) for s in sessions]
    return SknnModel(ids, sets, k, sample_size)


def _neighbors(model: SknnModel, prefix_set: frozenset[str]) -> list[tuple[float, int]]:
    """Top-k (similarity, position) pairs; ties favor more recent sessions."""
    candidate_positions: set[int] = set()
    for item in prefix_set:
        candidate_positions.update(model.item_index.get(item, ()))
    # Most recent `sample_size` candidate sessions, by training position.
    positions = sorted(candidate_positions)[-model.sample_size:]
    scored: list[tuple[float, int]] = []
    np_len = len(prefix_set)
    for pos in positions:
        stored = model.item_sets[pos]
        inter = len(prefix_set & stored)
        if inter == 0:
            continue
        sim = inter / math.sqrt(np_len * len(stored))
        scored.append((sim, pos))
    scored.sort(key=lambda t: (-t[0], -t[1]))
    return scored[: model.k]


def score(model: SknnModel, prefix: Sequence[str], candidates: Iterable[str]) -> dict[str, float]:
    """Similarity-weighted occurrence of each candidate among the k neighbors.

    Prefix items are scored like any other candidate; exclusion is the
    caller's policy. Candidates absent from every neighbor score 0.
    """
    if not prefix:
        raise ValueError("prefix must be non-empty")
    prefix_set = frozenset(prefix)
    neighbors = _neighbors(model, prefix_set)
    scores = {c: 0.0 for c in candidates}
    for sim, pos in neighbors:
        for item in model.item_sets[pos]:
            if item in scores:
                scores[item] += sim
    return scores


def recommend(model: SknnModel, prefix: Sequence[str], top_k: int) -> list[str]:
    """Top-K items by score (descending; ascending item id on ties), prefix excluded."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    prefix_set = set(prefix)
    neighbors = _neighbors(model, frozenset(prefix))
    scores: dict[str, float] = {}
    for sim, pos in neighbors:
        for item in model.item_sets[pos]:
            if item not in prefix_set:
                scores[item] = scores.get(item, 0.0) + sim
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [item for item, s in ranked[:top_k] if s > 0.0]


def score_matrix(model: SknnModel, prefixes: Sequence[Sequence[str]],
                 candidates: Sequence[str]) -> np.ndarray:
    """Score many prefixes against a fixed candidate list; rows align with prefixes.

    Empty prefixes yield NaN rows (unscorable), as do candidates outside the
    training vocabulary.
    """
    cand_pos = {c: i for i, c in enumerate(candidates)}
    out = np.zeros((len(prefixes), len(candidates)), dtype=np.float64)
    oov = np.array([c not in model.vocab for c in candidates], dtype=bool)
    for r, prefix in enumerate(prefixes):
        if not prefix:
            out[r, :] = np.nan
            continue
        for sim, pos in _neighbors(model, frozenset(prefix)):
            for item in model.item_sets[pos]:
                ci = cand_pos.get(item)
                if ci is not None:
                    out[r, ci] += sim
        out[r, oov] = np.nan
    return out


def save(model: SknnModel, path: str | Path) -> None:
    """Checkpoint = session store CSV + parameter file, under one directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sessions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "items"])
        for sid, items in zip(model.session_ids, model.item_sets):
            w.writerow([sid, " ".join(sorted(items))])
    (root / "params.json").write_text(
        json.dumps({"k": model.k, "sample_size": model.sample_size}, sort_keys=True),
        encoding="utf-8",
    )


def load(path: str | Path) -> SknnModel:
    root = Path(path)
    try:
        params = json.loads((root / "params.json").read_text(encoding="utf-8"))
        ids: list[str] = []
        sets: list[frozenset[str]] = []
        with open(root / "sessions.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                ids.append(row[0])
                sets.append(frozenset(row[1].split()))
    except (OSError, json.JSONDecodeError, IndexError) as exc:
        raise CheckpointError(f"cannot load sknn checkpoint at {root}: {exc}") from exc
    return SknnModel(ids, sets, int(params["k"]), int(params["sample_size"]))
