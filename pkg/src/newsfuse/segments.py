"""Category x locality partition scheme and the registry of expert submodels.

A segmentation scheme is an ordered list of segment specs; the order is part
of the contract because it defines the feature layout consumed by fusion.
Each segment trains one expert on the sessions reduced to its matching
clicks. Articles with unknown locality match only the ``all`` locality
filter, so unlabeled items never contaminate local/non-local experts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from . import sasrec, sknn
from .corpus import Catalog, Locality, Session, SplitBundle
from .errors import CheckpointError
from .util import sha256_text

SPARSE_FLOOR = 50


class LocalityFilter(Enum):
    LOCAL = "local"
    NONLOCAL = "non-local"
    ALL = "all"

    def matches(self, locality: Locality) -> bool:
        if self is LocalityFilter.ALL:
            return True
        if locality is Locality.UNKNOWN:
            return False
        if self is LocalityFilter.LOCAL:
            return locality is Locality.LOCAL
        return locality is Locality.NONLOCAL


@dataclass(frozen=True)
class SegmentSpec:
    category_filter: str | None  # None = all categories
    locality_filter: LocalityFilter

    @property
    def name(self) -> str:
        return f"{self.category_filter or 'all'}_{self.locality_filter.value}"

    def matches(self, category: str, locality: Locality) -> bool:
        if self.category_filter is not None and category != self.category_filter:
            return False
        return self.locality_filter.matches(locality)


@dataclass(frozen=True)
class SegmentationScheme:
    segments: tuple[SegmentSpec, ...]

    def __post_init__(self):
        names = [s.name for s in self.segments]
        if len(names) != len(set(names)):
            raise ValueError("segment names must be unique within a scheme")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments)


def build_scheme(catalog: Catalog, style: str = "per_category_plus_pooled",
                 include_global: bool = False) -> SegmentationScheme:
    """Build the ordered partition scheme from the catalog taxonomy.

    ``per_category_full`` yields {category} x {all, local, non-local};
    ``per_category_plus_pooled`` appends the cross-category all_local and
    all_non-local segments. ``include_global`` optionally appends an
    unfiltered all_all segment. Categories order lexicographically.
    """
    if style not in ("per_category_full", "per_category_plus_pooled"):
        raise ValueError(f"unknown segmentation style {style!r}")
    if not catalog.taxonomy:
        raise ValueError("catalog taxonomy must be non-empty")
    segments: list[SegmentSpec] = []
    for cat in sorted(catalog.taxonomy):
        segments.append(SegmentSpec(cat, LocalityFilter.ALL))
        segments.append(SegmentSpec(cat, LocalityFilter.LOCAL))
        segments.append(SegmentSpec(cat, LocalityFilter.NONLOCAL))
    if style == "per_category_plus_pooled":
        segments.append(SegmentSpec(None, LocalityFilter.LOCAL))
        segments.append(SegmentSpec(None, LocalityFilter.NONLOCAL))
    if include_global:
        segments.append(SegmentSpec(None, LocalityFilter.ALL))
    return SegmentationScheme(tuple(segments))


def filter_clicks(prefix: Sequence[str], segment: SegmentSpec, catalog: Catalog) -> list[str]:
    """Reduce an item sequence to the clicks matching the segment, order kept."""
    by_id = catalog.by_id
    out = []
    for article_id in prefix:
        a = by_id.get(article_id)
        if a is not None and segment.matches(a.category, a.locality):
            out.append(article_id)
    return out


def filter_interactions(sessions: Sequence[Session], segment: SegmentSpec,
                        catalog: Catalog) -> list[Session]:
    """Per-session click filter for training; sessions shorter than 2 matching
    clicks are dropped (they contribute no prediction event)."""
    by_id = catalog.by_id
    out: list[Session] = []
    for s in sessions:
        kept = tuple(
            (aid, ts) for aid, ts in s.clicks
            if (a := by_id.get(aid)) is not None and segment.matches(a.category, a.locality)
        )
        if len(kept) >= 2:
            out.append(Session(s.session_id, s.user_id, kept))
    return out


@dataclass
class RegistryEntry:
    spec: SegmentSpec
    model: object | None  # SasrecModel | SknnModel | None when training failed
    base: str  # "sasrec" | "sknn"
    sparse: bool
    n_train_sessions: int
    error: str | None = None


@dataclass
class SubmodelRegistry:
    scheme: SegmentationScheme
    entries: list[RegistryEntry]

    def __post_init__(self):
        if len(self.entries) != len(self.scheme):
            raise ValueError("registry must hold one entry per scheme segment")
        for spec, entry in zip(self.scheme.segments, self.entries):
            if entry.spec != spec:
                raise ValueError("registry entries must align with scheme order")

    def __len__(self) -> int:
        return len(self.entries)

    def fingerprint(self) -> str:
        parts = []
        for e in self.entries:
            vocab = ()
            if e.model is not None:
                vocab = tuple(sorted(e.model.vocab))
            parts.append(f"{e.spec.name}|{e.base}|{e.sparse}|{len(vocab)}|{','.join(vocab)}")
        return sha256_text("\n".join(parts))


def train_registry(split: SplitBundle, scheme: SegmentationScheme, base: str,
                   base_config, catalog: Catalog,
                   sparse_floor: int = SPARSE_FLOOR) -> SubmodelRegistry:
    """Train one expert per segment on its filtered train split.

    Segments below ``sparse_floor`` filtered sessions still train but carry a
    sparse flag; per-segment failures are recorded without aborting the rest.
    """
    if not split.train:
        raise ValueError("train split is empty")
    if base not in ("sasrec", "sknn"):
        raise ValueError(f"unknown base model {base!r}")
    entries: list[RegistryEntry] = []
    for seg in scheme.segments:
        train_sessions = filter_interactions(split.train, seg, catalog)
        val_sessions = filter_interactions(split.validation, seg, catalog)
        sparse = len(train_sessions) < sparse_floor
        model = None
        error = None
        if train_sessions:
            try:
                if base == "sasrec":
                    vocab = sorted({a for s in train_sessions for a in s.items})
                    model = sasrec.init(base_config, vocab)
                    model, _ = sasrec.train(model, train_sessions, base_config,
                                            val_sessions=val_sessions or None)
                else:
                    model = sknn.fit(train_sessions, k=base_config.k,
                                     sample_size=base_config.sample_size)
            except Exception as exc:  # record, keep going with other segments
                model = None
                error = f"{type(exc).__name__}: {exc}"
        entries.append(RegistryEntry(seg, model, base, sparse, len(train_sessions), error))
    return SubmodelRegistry(scheme, entries)


def save_registry(registry: SubmodelRegistry, out_dir: str | Path) -> Path:
    """Write submodel checkpoints plus the ordered manifest; returns manifest path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, e in enumerate(registry.entries):
        ckpt: str | None = None
        if e.model is not None:
            name = f"{i:02d}_{e.spec.name.replace(' ', '-')}"
            if e.base == "sasrec":
                ckpt = f"{name}.sasrec"
                sasrec.save(e.model, root / ckpt)
            else:
                ckpt = f"{name}.sknn"
                sknn.save(e.model, root / ckpt)
        manifest.append({
            "segment": e.spec.name,
            "category_filter": e.spec.category_filter,
            "locality_filter": e.spec.locality_filter.value,
            "base": e.base,
            "checkpoint": ckpt,
            "sparse": e.sparse,
            "n_train_sessions": e.n_train_sessions,
            "error": e.error,
        })
    path = root / "registry.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_registry(out_dir: str | Path) -> SubmodelRegistry:
    root = Path(out_dir)
    path = root / "registry.json"
    if not path.exists():
        raise CheckpointError(f"missing registry manifest {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    specs = []
    entries = []
    for row in manifest:
        spec = SegmentSpec(row["category_filter"], LocalityFilter(row["locality_filter"]))
        if spec.name != row["segment"]:
            raise CheckpointError(f"manifest segment name mismatch: {row['segment']}")
        model = None
        if row["checkpoint"]:
            if row["base"] == "sasrec":
                model = sasrec.load(root / row["checkpoint"])
            else:
                model = sknn.load(root / row["checkpoint"])
        specs.append(spec)
        entries.append(RegistryEntry(spec, model, row["base"], row["sparse"],
                                     row["n_train_sessions"], row["error"]))
    return SubmodelRegistry(SegmentationScheme(tuple(specs)), entries)
