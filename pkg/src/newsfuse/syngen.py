"""Synthetic local-news interaction generator.

Produces a catalog partitioned into (category, locality) cells and a click log
whose cell proportions follow a declarative configuration. Each user draws a
latent preference over cells from a Dirichlet centered on the configured cell
shares; inside a session the next click either follows a per-cell first-order
item-to-item transition matrix (with the configured probability) or is a fresh
popularity draw from a preference-sampled cell. The transition matrices are
sparse and fixed per seed, which plants cell-specific sequential structure
that segment experts can exploit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import Article, Catalog, Locality, Session
from .errors import ConfigInvalid
from .util import derive_rng

DEFAULT_CATEGORY_PROPORTIONS = {"News": 0.55, "Sports": 0.25, "Life and Culture": 0.20}
DEFAULT_LOCAL_FRACTIONS = {"News": 0.6, "Sports": 0.5, "Life and Culture": 0.7}

BASE_EPOCH = 1_600_000_000
HORIZON_SECONDS = 120 * 24 * 3600


def _default_items_per_cell(
    categories: Mapping[str, float], local_fractions: Mapping[str, float], total: int = 2000
) -> dict[tuple[str, str], int]:
    # Items spread evenly across cells while traffic follows the configured
    # shares, so low-traffic cells are click-sparse per item, like the long
    # tail of a real news archive. Segment experts then differ in
    # reliability, which is the regime where learned fusion pays off.
    n_cells = 2 * len(categories)
    per_cell = max(10, int(round(total / n_cells)))
    cells = {}
    for cat in sorted(categories):
        for loc in ("local", "nonlocal"):
            cells[(cat, loc)] = per_cell
    return cells


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 1000
    category_proportions: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CATEGORY_PROPORTIONS)
    )
    local_fraction_per_category: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_LOCAL_FRACTIONS)
    )
    n_items_per_cell: dict[tuple[str, str], int] | None = None
    session_length_distribution: tuple[float, float] = (10.0, 4.0)  # (mean, dispersion), min 2
    sessions_per_user: tuple[float, float] = (5.0, 4.0)  # (mean, dispersion), min 1
    item_popularity_exponent: float = 1.0
    segment_affinity_concentration: float = 5.0
    within_cell_transition_weight: float = 0.7
    successors_per_item: int = 10
    seed: int = 0

    def cells(self) -> list[tuple[str, str]]:
        out = []
        for cat in sorted(self.category_proportions):
            out.append((cat, "local"))
            out.append((cat, "nonlocal"))
        return out

    def items_per_cell(self) -> dict[tuple[str, str], int]:
        if self.n_items_per_cell is not None:
            return dict(self.n_items_per_cell)
        return _default_items_per_cell(self.category_proportions, self.local_fraction_per_category)

    def cell_proportions(self) -> dict[tuple[str, str], float]:
        out = {}
        for cat, p in self.category_proportions.items():
            lf = self.local_fraction_per_category[cat]
            out[(cat, "local")] = p * lf
            out[(cat, "nonlocal")] = p * (1 - lf)
        return out

    def validate(self) -> None:
        if self.n_users <= 0:
            raise ConfigInvalid("n_users must be positive")
        if abs(sum(self.category_proportions.values()) - 1.0) > 1e-9:
            raise ConfigInvalid("category_proportions must sum to 1")
        if any(p < 0 for p in self.category_proportions.values()):
            raise ConfigInvalid("category_proportions must be non-negative")
        if set(self.local_fraction_per_category) != set(self.category_proportions):
            raise ConfigInvalid("local_fraction_per_category keys must match category_proportions")
        if any(not 0.0 <= f <= 1.0 for f in self.local_fraction_per_category.values()):
            raise ConfigInvalid("local fractions must lie in [0,1]")
        if any(n <= 0 for n in self.items_per_cell().values()):
            raise ConfigInvalid("all per-cell item counts must be positive")
        if self.item_popularity_exponent < 0:
            raise ConfigInvalid("item_popularity_exponent must be >= 0")
        if self.segment_affinity_concentration <= 0:
            raise ConfigInvalid("segment_affinity_concentration must be positive")
        if not 0.0 <= self.within_cell_transition_weight <= 1.0:
            raise ConfigInvalid("within_cell_transition_weight must lie in [0,1]")
        if self.session_length_distribution[0] < 2:
            raise ConfigInvalid("mean session length must be >= 2")
        if self.sessions_per_user[0] < 1:
            raise ConfigInvalid("mean sessions per user must be >= 1")
        if self.successors_per_item < 1:
            raise ConfigInvalid("successors_per_item must be >= 1")

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["n_items_per_cell"] = (
            None
            if self.n_items_per_cell is None
            else {f"{c}|{l}": n for (c, l), n in self.n_items_per_cell.items()}
        )
        return json.dumps(d, sort_keys=True, indent=2)

    @staticmethod
    def from_mapping(d: Mapping) -> "GeneratorConfig":
        d = dict(d)
        if d.get("n_items_per_cell"):
            raw = d["n_items_per_cell"]
            parsed = {}
            for key, n in raw.items():
                if isinstance(key, str):
                    cat, loc = key.split("|")
                    parsed[(cat, loc)] = int(n)
                else:
                    parsed[tuple(key)] = int(n)
            d["n_items_per_cell"] = parsed
        for k in ("session_length_distribution", "sessions_per_user"):
            if k in d and d[k] is not None:
                d[k] = tuple(float(x) for x in d[k])
        return GeneratorConfig(**d)


@dataclass(frozen=True)
class SyntheticDataset:
    catalog: Catalog
    sessions: tuple[Session, ...]
    provenance: GeneratorConfig

    @property
    def n_clicks(self) -> int:
        return sum(len(s.clicks) for s in self.sessions)


@dataclass(frozen=True)
class ValidationReport:
    per_cell: dict[tuple[str, str], tuple[float, float, float]]  # target, empirical, |diff|
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(diff <= self.tolerance for _, _, diff in self.per_cell.values())

    @property
    def max_deviation(self) -> float:
        return max(diff for _, _, diff in self.per_cell.values())


class _Cell:
    """Per-cell sampling state: Zipf popularity and a sparse transition matrix."""

    def __init__(self, item_indices: np.ndarray, exponent: float, n_successors: int,
                 rng: np.random.Generator):
        self.items = item_indices
        m = len(item_indices)
        ranks = np.arange(1, m + 1, dtype=np.float64)
        weights = ranks ** -exponent if exponent > 0 else np.ones(m)
        self.pop_cdf = np.cumsum(weights / weights.sum())
        k = min(n_successors, m)
        # Successor lists per item, drawn within the cell; weights normalized.
        self.successors = np.empty((m, k), dtype=np.int64)
        self.succ_cdf = np.empty((m, k), dtype=np.float64)
        for i in range(m):
            succ = rng.choice(m, size=k, replace=False)
            w = rng.random(k) + 0.1
            self.successors[i] = item_indices[succ]
            self.succ_cdf[i] = np.cumsum(w / w.sum())
        self.local_index = {int(g): i for i, g in enumerate(item_indices)}

    def sample_popular(self, u: float) -> int:
        i = min(int(np.searchsorted(self.pop_cdf, u, side="left")), len(self.items) - 1)
        return int(self.items[i])

    def sample_successor(self, item: int, u: float) -> int:
        row = self.local_index[item]
        j = min(int(np.searchsorted(self.succ_cdf[row], u, side="left")), self.succ_cdf.shape[1] - 1)
        return int(self.successors[row, j])


def _shifted_negative_binomial(rng: np.random.Generator, mean: float, dispersion: float,
                               minimum: int, size: int) -> np.ndarray:
    """Discrete lengths with the given mean, never below ``minimum``."""
    excess = mean - minimum
    if excess <= 0:
        return np.full(size, minimum, dtype=np.int64)
    r = max(dispersion, 1e-6)
    p = r / (r + excess)
    return minimum + rng.negative_binomial(r, p, size=size)


def _build_catalog(config: GeneratorConfig) -> tuple[Catalog, np.ndarray, dict[tuple[str, str], np.ndarray]]:
    cells = config.cells()
    per_cell = config.items_per_cell()
    articles: list[Article] = []
    cell_items: dict[tuple[str, str], np.ndarray] = {}
    idx = 0
    ids: list[str] = []
    for cell in cells:
        cat, loc = cell
        n = per_cell[cell]
        indices = np.arange(idx, idx + n, dtype=np.int64)
        cell_items[cell] = indices
        for _ in range(n):
            aid = f"a{idx:06d}"
            articles.append(Article(aid, cat, Locality.LOCAL if loc == "local" else Locality.NONLOCAL))
            ids.append(aid)
            idx += 1
    catalog = Catalog(tuple(articles), frozenset(config.category_proportions))
    return catalog, np.array(ids), cell_items


def generate(config: GeneratorConfig) -> SyntheticDataset:
    """Generate a seeded synthetic dataset; byte-identical for equal configs."""
    config.validate()
    catalog, id_array, cell_items = _build_catalog(config)

    cells = config.cells()
    cell_probs = config.cell_proportions()
    target = np.array([cell_probs[c] for c in cells])

    struct_rng = derive_rng(config.seed, "structure")
    cell_state = {
        c: _Cell(cell_items[c], config.item_popularity_exponent,
                 config.successors_per_item, struct_rng)
        for c in cells
    }
    item_cell = np.empty(len(id_array), dtype=np.int64)
    for ci, c in enumerate(cells):
        item_cell[cell_items[c]] = ci

    alpha = config.segment_affinity_concentration * np.clip(target, 1e-6, None)
    w = config.within_cell_transition_weight
    sessions: list[Session] = []
    n_digits = max(6, len(str(config.n_users)))

    for u in range(config.n_users):
        rng = derive_rng(config.seed, "user", u)
        user_id = f"u{u:0{n_digits}d}"
        pref = rng.dirichlet(alpha)
        pref_cdf = np.cumsum(pref)
        n_sessions = int(_shifted_negative_binomial(
            rng, config.sessions_per_user[0], config.sessions_per_user[1], 1, 1)[0])
        lengths = _shifted_negative_binomial(
            rng, config.session_length_distribution[0],
            config.session_length_distribution[1], 2, n_sessions)
        starts = np.sort(rng.integers(0, HORIZON_SECONDS, size=n_sessions))
        for si in range(n_sessions):
            length = int(lengths[si])
            draws = rng.random(3 * length)  # mode / cell-or-successor / item draws
            gaps = rng.integers(30, 180, size=length)
            ts = BASE_EPOCH + int(starts[si])
            clicks: list[tuple[str, int]] = []
            cur = -1
            for j in range(length):
                if j > 0:
                    ts += int(gaps[j])
                if cur >= 0 and draws[3 * j] < w:
                    nxt = cell_state[cells[item_cell[cur]]].sample_successor(cur, draws[3 * j + 2])
                else:
                    ci = int(np.searchsorted(pref_cdf, draws[3 * j + 1], side="left"))
                    ci = min(ci, len(cells) - 1)
                    nxt = cell_state[cells[ci]].sample_popular(draws[3 * j + 2])
                clicks.append((str(id_array[nxt]), ts))
                cur = nxt
            sessions.append(Session(f"{user_id}-s{si:04d}", user_id, tuple(clicks)))

    sessions.sort(key=lambda s: (s.user_id, s.first_timestamp, s.session_id))
    return SyntheticDataset(catalog, tuple(sessions), config)


def validate_proportions(
    dataset: SyntheticDataset, config: GeneratorConfig, tolerance: float
) -> ValidationReport:
    """Compare empirical (category, locality) click shares against config targets."""
    targets = config.cell_proportions()
    by_id = dataset.catalog.by_id
    counts: dict[tuple[str, str], int] = {c: 0 for c in targets}
    total = 0
    for s in dataset.sessions:
        for article_id, _ in s.clicks:
            a = by_id[article_id]
            key = (a.category, "local" if a.locality is Locality.LOCAL else "nonlocal")
            if key in counts:
                counts[key] += 1
            total += 1
    per_cell = {}
    for cell in sorted(targets):
        emp = counts[cell] / total if total else 0.0
        per_cell[cell] = (targets[cell], emp, abs(emp - targets[cell]))
    return ValidationReport(per_cell, tolerance)


def write_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> dict[str, Path]:
    """Write the dataset in the standard CSV shapes plus a provenance file."""
    from .corpus import sessions_to_interactions, write_articles, write_interactions

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "articles": out / "articles.csv",
        "interactions": out / "interactions.csv",
        "provenance": out / "generator.json",
    }
    write_articles(dataset.catalog, paths["articles"])
    interactions = sessions_to_interactions(dataset.sessions)
    interactions.sort(key=lambda it: (it.user_id, it.timestamp, it.session_id or ""))
    write_interactions(interactions, paths["interactions"])
    paths["provenance"].write_text(dataset.provenance.to_json(), encoding="utf-8")
    return paths
