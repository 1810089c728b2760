"""Score fusion over the expert registry.

For a candidate item, each registry submodel scores it against the session
prefix reduced to that submodel's segment (the same filter used at training
time). Raw scores are standardized per submodel across the current candidate
set (zero mean, unit variance; zero-variance sets become all zeros), and
out-of-vocabulary or empty-filtered-prefix entries are masked to the neutral
value 0. Two combiners consume these vectors:

* a trainable two-layer MLP scoring candidates by fused logit, and
* a parameter-free mean-rank ensemble (out-of-vocabulary entries receive the
  penalty rank ``n_candidates + 1``).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sasrec, sknn
from .corpus import Catalog, Session
from .errors import (
    CatalogTooSmall,
    CheckpointError,
    ConfigInvalid,
    NoTrainableEvents,
    RegistryMismatch,
)
from .optimizer import Adam
from .segments import SubmodelRegistry, filter_clicks
from .util import derive_rng

FUSION_MAGIC = b"NFFU"
FUSION_VERSION = 1
STD_EPS = 1e-12


@dataclass(frozen=True)
class ScoreFeatureVector:
    """Per-candidate standardized submodel scores; masked entries hold 0."""

    values: np.ndarray  # (N,) float64
    oov_mask: np.ndarray  # (N,) bool, True where the submodel could not score

    def __post_init__(self):
        if self.values.shape != self.oov_mask.shape:
            raise ValueError("values and oov_mask must have equal length")


@dataclass(frozen=True)
class FusionExample:
    features: ScoreFeatureVector
    label: int  # 1 iff the candidate is the true next click


@dataclass(frozen=True)
class CandidateSet:
    session_id: str
    position: int
    prefix: tuple[str, ...]
    true_next: str
    negatives: tuple[str, ...]

    @property
    def candidates(self) -> tuple[str, ...]:
        return (self.true_next,) + self.negatives


@dataclass(frozen=True)
class FusionConfig:
    hidden: int = 64
    n_neg: int = 50
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 256
    adam_betas: tuple[float, float] = (0.9, 0.98)
    seed: int = 0
    positions: str = "last"  # "last" (one candidate set per session) or "all"
    include_validation: bool = False
    mask_features: bool = False  # append the mask bits, doubling input width
    max_events: int | None = None
    activation: str = "tanh"  # "tanh" (bounded, robust to z outliers) or "relu"

    def validate(self) -> None:
        if self.hidden < 1:
            raise ConfigInvalid("hidden width must be >= 1")
        if self.n_neg < 1:
            raise ConfigInvalid("n_neg must be >= 1")
        if self.positions not in ("last", "all"):
            raise ConfigInvalid("positions must be 'last' or 'all'")
        if self.activation not in ("tanh", "relu"):
            raise ConfigInvalid("activation must be 'tanh' or 'relu'")


class FusionModel:
    """Two-layer MLP: input width -> hidden (nonlinear) -> 1 logit."""

    def __init__(self, input_width: int, hidden: int, params: dict[str, np.ndarray],
                 config: FusionConfig, registry_fingerprint: str,
                 mask_features: bool = False, activation: str = "tanh"):
        self.input_width = input_width
        self.hidden = hidden
        self.params = params
        self.config = config
        self.registry_fingerprint = registry_fingerprint
        self.mask_features = mask_features
        self.activation = activation

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def logits(self, features: np.ndarray) -> np.ndarray:
        """(E, input_width) feature rows -> (E,) fused scores."""
        z1 = features @ self.params["w1"] + self.params["b1"]
        return (self._act(z1) @ self.params["w2"] + self.params["b2"]).reshape(-1)


def init_fusion(input_width: int, config: FusionConfig,
                registry_fingerprint: str = "") -> FusionModel:
    config.validate()
    rng = derive_rng(config.seed, "fusion-init")
    scale = 1.0 / np.sqrt(max(input_width, 1))
    params = {
        "w1": rng.uniform(-scale, scale, size=(input_width, config.hidden)),
        "b1": np.zeros(config.hidden),
        "w2": rng.uniform(-scale, scale, size=(config.hidden, 1)),
        "b2": np.zeros(1),
    }
    return FusionModel(input_width, config.hidden, params, config,
                       registry_fingerprint, config.mask_features, config.activation)


def make_candidates(session: Session, position: int, catalog: Catalog,
                    n_neg: int, seed: int) -> CandidateSet:
    """True next item plus uniform negatives (no replacement) drawn from the
    catalog minus the prefix minus the truth; deterministic per
    (seed, session_id, position)."""
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    if position + 1 >= len(session.clicks):
        raise ValueError("position must leave a next click to predict")
    items = session.items
    prefix = items[: position + 1]
    truth = items[position + 1]
    taken = set(prefix) | {truth}
    eligible = [a.article_id for a in catalog.articles if a.article_id not in taken]
    if len(eligible) < n_neg:
        raise CatalogTooSmall(
            f"need {n_neg} negatives, only {len(eligible)} eligible items"
        )
    rng = derive_rng(seed, "cand", session.session_id, position)
    picks = rng.choice(len(eligible), size=n_neg, replace=False)
    negatives = tuple(eligible[i] for i in picks)
    return CandidateSet(session.session_id, position, tuple(prefix), truth, negatives)


# --- feature extraction ------------------------------------------------------

def _submodel_raw_scores(entry, catalog: Catalog, prefixes: Sequence[Sequence[str]],
                         candidates: Sequence[str]) -> np.ndarray:
    """Raw (E, C) scores for one registry entry; NaN marks unscorable cells."""
    filtered = [filter_clicks(p, entry.spec, catalog) for p in prefixes]
    if entry.model is None:
        return np.full((len(prefixes), len(candidates)), np.nan)
    if entry.base == "sasrec":
        return sasrec.score_matrix(entry.model, filtered, candidates)
    return sknn.score_matrix(entry.model, filtered, candidates)


def raw_score_tensor(registry: SubmodelRegistry, catalog: Catalog,
                     prefixes: Sequence[Sequence[str]],
                     candidates: Sequence[str]) -> np.ndarray:
    """(E, C, N) raw submodel scores with NaN where a submodel cannot score."""
    n = len(registry)
    out = np.empty((len(prefixes), len(candidates), n), dtype=np.float64)
    for i, entry in enumerate(registry.entries):
        out[:, :, i] = _submodel_raw_scores(entry, catalog, prefixes, candidates)
    return out


def standardize_scores(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Z-score per (event, submodel) across the candidate axis.

    ``raw`` is (E, C, N) with NaN for masked cells. Masked cells and
    zero-variance candidate sets come back as 0. Returns (features, mask).
    """
    mask = np.isnan(raw)
    valid = ~mask
    filled = np.where(mask, 0.0, raw)
    counts = np.maximum(valid.sum(axis=1, keepdims=True), 1)
    mu = filled.sum(axis=1, keepdims=True) / counts
    var = (np.square(filled - mu) * valid).sum(axis=1, keepdims=True) / counts
    sd = np.sqrt(var)
    live = valid & np.broadcast_to(sd > STD_EPS, raw.shape)
    feats = np.where(live, (filled - mu) / np.where(sd > STD_EPS, sd, 1.0), 0.0)
    return feats, mask


def feature_vectors(registry: SubmodelRegistry, catalog: Catalog,
                    prefix: Sequence[str],
                    candidates: Sequence[str]) -> list[ScoreFeatureVector]:
    """One standardized feature vector per candidate, in candidate order.

    Standardization is across exactly the candidate set passed here.
    """
    raw = raw_score_tensor(registry, catalog, [list(prefix)], candidates)
    feats, mask = standardize_scores(raw)
    return [ScoreFeatureVector(feats[0, c], mask[0, c]) for c in range(len(candidates))]


def _assemble_input(feats: np.ndarray, mask: np.ndarray, mask_features: bool) -> np.ndarray:
    """Flatten (E, C, N) into ((E*C), width) MLP input rows."""
    e, c, n = feats.shape
    x = feats.reshape(e * c, n)
    if mask_features:
        x = np.concatenate([x, (~mask).reshape(e * c, n).astype(np.float64)], axis=1)
    return x


# --- fusion training ---------------------------------------------------------

def _fusion_events(sessions: Sequence[Session], positions: str) -> list[tuple[Session, int]]:
    out = []
    for s in sessions:
        if len(s.clicks) < 2:
            continue
        if positions == "last":
            out.append((s, len(s.clicks) - 2))
        else:
            out.extend((s, t) for t in range(len(s.clicks) - 1))
    return out


def _train_mlp(model: FusionModel, x: np.ndarray, y: np.ndarray,
               weights: np.ndarray, config: FusionConfig) -> list[float]:
    opt = Adam(model.params, config.learning_rate, config.adam_betas)
    rng = derive_rng(config.seed, "fusion-shuffle")
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        total, batches = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb, wb = x[idx], y[idx], weights[idx]
            z1 = xb @ model.params["w1"] + model.params["b1"]
            r = model._act(z1)
            logit = (r @ model.params["w2"] + model.params["b2"]).reshape(-1)
            # weighted BCE-with-logits: softplus(logit) - y*logit
            loss = float(np.sum(wb * (np.logaddexp(0.0, logit) - yb * logit)) / np.sum(wb))
            sig = 1.0 / (1.0 + np.exp(-logit))
            dlogit = (wb * (sig - yb) / np.sum(wb)).reshape(-1, 1)
            grads = {
                "w2": r.T @ dlogit,
                "b2": dlogit.sum(axis=0),
            }
            dr = dlogit @ model.params["w2"].T
            dz1 = dr * (1.0 - r * r) if config.activation == "tanh" else dr * (z1 > 0)
            grads["w1"] = xb.T @ dz1
            grads["b1"] = dz1.sum(axis=0)
            opt.step(model.params, grads)
            total += loss
            batches += 1
        losses.append(total / max(batches, 1))
    return losses


def train_fusion_on_examples(x: np.ndarray, y: np.ndarray, config: FusionConfig,
                             registry_fingerprint: str = "") -> tuple[FusionModel, list[float]]:
    """Train the MLP on prebuilt feature rows (test seam and inner loop)."""
    config.validate()
    if len(x) == 0:
        raise NoTrainableEvents("no fusion examples")
    model = init_fusion(x.shape[1], config, registry_fingerprint)
    weights = np.where(y > 0, float(config.n_neg), 1.0)
    losses = _train_mlp(model, x, y, weights, config)
    return model, losses


def build_fusion_examples(registry: SubmodelRegistry, catalog: Catalog,
                          sessions: Sequence[Session], config: FusionConfig,
                          chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and labels per the candidate-generation procedure."""
    events = _fusion_events(sessions, config.positions)
    if config.max_events is not None and len(events) > config.max_events:
        rng = derive_rng(config.seed, "fusion-events")
        keep = sorted(rng.choice(len(events), size=config.max_events, replace=False))
        events = [events[i] for i in keep]
    if not events:
        raise NoTrainableEvents("no prediction events in fusion training sessions")

    xs, ys = [], []
    for start in range(0, len(events), chunk):
        part = events[start:start + chunk]
        cand_sets = [
            make_candidates(s, t, catalog, config.n_neg, config.seed) for s, t in part
        ]
        prefixes = [list(cs.prefix) for cs in cand_sets]
        # Shared candidate columns for the chunk; per-event sets are gathered below.
        columns = sorted({c for cs in cand_sets for c in cs.candidates})
        col_of = {c: i for i, c in enumerate(columns)}
        raw = raw_score_tensor(registry, catalog, prefixes, columns)
        for e, cs in enumerate(cand_sets):
            idx = [col_of[c] for c in cs.candidates]
            sub = raw[e: e + 1, idx, :]
            feats, mask = standardize_scores(sub)
            xs.append(_assemble_input(feats, mask, config.mask_features))
            lab = np.zeros(len(cs.candidates))
            lab[0] = 1.0
            ys.append(lab)
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def train_fusion(registry: SubmodelRegistry, catalog: Catalog,
                 train_sessions: Sequence[Session], config: FusionConfig,
                 validation_sessions: Sequence[Session] | None = None,
                 ) -> tuple[FusionModel, list[float]]:
    """Train the fusion MLP on candidate sets drawn from training sessions
    (plus validation sessions when configured); positives are weighted by
    ``n_neg`` to offset class imbalance."""
    config.validate()
    sessions = list(train_sessions)
    if config.include_validation and validation_sessions:
        sessions.extend(validation_sessions)
    x, y = build_fusion_examples(registry, catalog, sessions, config)
    return train_fusion_on_examples(x, y, config, registry.fingerprint())


# --- inference ---------------------------------------------------------------

def _ranked(candidates: Sequence[str], keys: Sequence[float]) -> list[str]:
    """Descending by key; ascending item id on ties."""
    return [c for c, _ in sorted(zip(candidates, keys), key=lambda t: (-t[1], t[0]))]


def fuse_score(fusion: FusionModel, registry: SubmodelRegistry, catalog: Catalog,
               prefix: Sequence[str], candidates: Sequence[str]) -> list[str]:
    """Candidates ranked by fused logit (descending; lexicographic ties)."""
    if fusion.registry_fingerprint and fusion.registry_fingerprint != registry.fingerprint():
        raise RegistryMismatch("fusion model was trained against a different registry")
    raw = raw_score_tensor(registry, catalog, [list(prefix)], candidates)
    feats, mask = standardize_scores(raw)
    logits = fusion.logits(_assemble_input(feats, mask, fusion.mask_features))
    return _ranked(candidates, logits.tolist())


def mean_ranks(raw_scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean per-submodel ordinal rank per candidate of one event.

    ``raw_scores`` is (C, N). Within a submodel, rank 1 is the best raw
    score; ties resolve by candidate position (callers pass candidates in
    the lexicographic order they want ties resolved in). Masked entries get
    the penalty rank C + 1.
    """
    c, n = raw_scores.shape
    ranks = np.full((c, n), float(c + 1))
    for j in range(n):
        valid = ~mask[:, j]
        if not valid.any():
            continue
        scores = raw_scores[valid, j]
        order = np.argsort(-scores, kind="stable")
        r = np.empty(len(scores))
        r[order] = np.arange(1, len(scores) + 1)
        ranks[valid, j] = r
    return ranks.mean(axis=1)


def mean_rank_fuse(registry: SubmodelRegistry, catalog: Catalog,
                   prefix: Sequence[str], candidates: Sequence[str]) -> list[str]:
    """Candidates ranked by ascending mean rank across submodels."""
    order = sorted(range(len(candidates)), key=lambda i: candidates[i])
    cands_sorted = [candidates[i] for i in order]
    raw = raw_score_tensor(registry, catalog, [list(prefix)], cands_sorted)
    mask = np.isnan(raw[0])
    means = mean_ranks(np.where(mask, 0.0, raw[0]), mask)
    return [c for c, _ in sorted(zip(cands_sorted, means), key=lambda t: (t[1], t[0]))]


# --- batch recommenders for the evaluation harness ---------------------------

@dataclass
class FusionRecommender:
    name: str
    fusion: FusionModel
    registry: SubmodelRegistry
    catalog: Catalog
    chunk: int = 128

    def score_matrix(self, prefixes: Sequence[Sequence[str]],
                     candidates: Sequence[str]) -> np.ndarray:
        out = np.empty((len(prefixes), len(candidates)))
        for start in range(0, len(prefixes), self.chunk):
            part = list(prefixes[start:start + self.chunk])
            raw = raw_score_tensor(self.registry, self.catalog, part, candidates)
            feats, mask = standardize_scores(raw)
            x = _assemble_input(feats, mask, self.fusion.mask_features)
            out[start:start + len(part)] = self.fusion.logits(x).reshape(len(part), -1)
        return out


@dataclass
class MeanRankRecommender:
    """Scores are negated mean ranks, so descending score = ascending mean rank."""

    name: str
    registry: SubmodelRegistry
    catalog: Catalog
    chunk: int = 128

    def score_matrix(self, prefixes: Sequence[Sequence[str]],
                     candidates: Sequence[str]) -> np.ndarray:
        out = np.empty((len(prefixes), len(candidates)))
        for start in range(0, len(prefixes), self.chunk):
            part = list(prefixes[start:start + self.chunk])
            raw = raw_score_tensor(self.registry, self.catalog, part, candidates)
            mask = np.isnan(raw)
            raw0 = np.where(mask, 0.0, raw)
            for e in range(len(part)):
                out[start + e] = -mean_ranks(raw0[e], mask[e])
        return out


@dataclass
class SingleModelRecommender:
    """Adapter putting one trained model behind the evaluation interface."""

    name: str
    model: object  # SasrecModel | SknnModel
    chunk: int = 512

    def score_matrix(self, prefixes: Sequence[Sequence[str]],
                     candidates: Sequence[str]) -> np.ndarray:
        scorer = sasrec.score_matrix if isinstance(self.model, sasrec.SasrecModel) else sknn.score_matrix
        out = np.empty((len(prefixes), len(candidates)))
        for start in range(0, len(prefixes), self.chunk):
            part = list(prefixes[start:start + self.chunk])
            out[start:start + len(part)] = scorer(self.model, part, candidates)
        return out


# --- checkpointing -----------------------------------------------------------

def save_fusion(model: FusionModel, path: str | Path) -> None:
    """Versioned binary: JSON header (widths, config echo, registry
    fingerprint) followed by named float32 tensors."""
    header = {
        "input_width": model.input_width,
        "hidden": model.hidden,
        "mask_features": model.mask_features,
        "activation": model.activation,
        "registry_fingerprint": model.registry_fingerprint,
        "config": {**model.config.__dict__, "adam_betas": list(model.config.adam_betas)},
    }
    buf = io.BytesIO()
    buf.write(FUSION_MAGIC)
    buf.write(struct.pack("<I", FUSION_VERSION))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = model.params[name]
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", t.ndim))
        for dim in t.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_fusion(path: str | Path, registry: SubmodelRegistry | None = None) -> FusionModel:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def need(nbytes: int) -> bytes:
        chunk = view.read(nbytes)
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated fusion checkpoint {path}")
        return chunk

    if need(4) != FUSION_MAGIC:
        raise CheckpointError(f"{path} is not a fusion checkpoint")
    (version,) = struct.unpack("<I", need(4))
    if version != FUSION_VERSION:
        raise CheckpointError(f"unsupported fusion checkpoint version {version}")
    (hlen,) = struct.unpack("<I", need(4))
    header = json.loads(need(hlen))
    cfg_d = dict(header["config"])
    cfg_d["adam_betas"] = tuple(cfg_d["adam_betas"])
    config = FusionConfig(**cfg_d)
    (count,) = struct.unpack("<I", need(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(2))
        name = need(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", need(1))
        shape = tuple(struct.unpack("<Q", need(8))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(need(4 * size), dtype="<f4").reshape(shape).astype(np.float64)

    model = FusionModel(header["input_width"], header["hidden"], params, config,
                        header["registry_fingerprint"], header["mask_features"],
                        header.get("activation", "tanh"))
    if registry is not None:
        width = 2 * len(registry) if model.mask_features else len(registry)
        if model.input_width != width:
            raise RegistryMismatch(
                f"fusion input width {model.input_width} does not match registry of {len(registry)} submodels"
            )
        if model.registry_fingerprint and model.registry_fingerprint != registry.fingerprint():
            raise RegistryMismatch("fusion checkpoint fingerprint differs from the registry")
    return model
