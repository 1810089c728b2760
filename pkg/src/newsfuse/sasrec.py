"""Self-attentive sequential recommender with a hand-rolled numpy kernel.

The network is a causal transformer over item sequences: shared item
embeddings (scaled into the input path), right-anchored positional
embeddings, pre-norm blocks of masked self-attention and a two-layer
pointwise feed-forward, and a final layer norm. Next-item scores are dot
products between the final-position hidden state and item embeddings.

Forward, backward, and Adam all live here in plain numpy: training runs in
single precision, while ``grad_check`` re-runs the whole computation in
double precision and compares every analytic gradient against central
finite differences.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Session
from .errors import (
    CheckpointError,
    ConfigInvalid,
    EmptyPrefixAfterFiltering,
    NoTrainableEvents,
)
from .optimizer import Adam
from .util import derive_rng

LN_EPS = 1e-8
MASKED_LOGIT = -1e9
CHECKPOINT_MAGIC = b"NFSR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SasrecConfig:
    max_seq_len: int = 50
    embed_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    dropout_rate: float = 0.2
    n_epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.98)
    l2_emb: float = 0.0
    seed: int = 0
    patience: int = 3

    def validate(self) -> None:
        if self.max_seq_len < 1 or self.embed_dim < 1 or self.n_blocks < 1:
            raise ConfigInvalid("max_seq_len, embed_dim, n_blocks must be >= 1")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigInvalid(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigInvalid("dropout_rate must lie in [0,1)")
        if self.batch_size < 1 or self.n_epochs < 0:
            raise ConfigInvalid("batch_size must be >= 1 and n_epochs >= 0")
        if self.l2_emb < 0:
            raise ConfigInvalid("l2_emb must be >= 0")


class SasrecModel:
    """Parameter container plus the item-id <-> contiguous-index map."""

    def __init__(self, config: SasrecConfig, items: Sequence[str],
                 params: dict[str, np.ndarray]):
        self.config = config
        self.items = tuple(items)  # index i+1 <-> items[i]; index 0 is padding
        self.item_to_idx = {item: i + 1 for i, item in enumerate(self.items)}
        self.params = params

    @property
    def vocab(self) -> frozenset[str]:
        return frozenset(self.item_to_idx)

    @property
    def vocab_size(self) -> int:
        return len(self.items)

    def encode(self, prefix: Sequence[str]) -> list[int]:
        """Vocabulary-filtered index sequence, truncated to the most recent window."""
        idx = [self.item_to_idx[a] for a in prefix if a in self.item_to_idx]
        return idx[-self.config.max_seq_len:]


def _param_names(cfg: SasrecConfig) -> list[str]:
    names = ["item_emb", "pos_emb"]
    for b in range(cfg.n_blocks):
        for w in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                  "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            names.append(f"blk{b}_{w}")
    names += ["lnf_g", "lnf_b"]
    return names


def _init_params(cfg: SasrecConfig, vocab_size: int, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    d = cfg.embed_dim
    scale = 1.0 / math.sqrt(d)

    def mat(*shape):
        return rng.uniform(-scale, scale, size=shape).astype(dtype)

    params: dict[str, np.ndarray] = {}
    item_emb = mat(vocab_size + 1, d)
    item_emb[0] = 0.0
    params["item_emb"] = item_emb
    params["pos_emb"] = mat(cfg.max_seq_len, d)
    for b in range(cfg.n_blocks):
        p = f"blk{b}_"
        params[p + "ln1_g"] = np.ones(d, dtype=dtype)
        params[p + "ln1_b"] = np.zeros(d, dtype=dtype)
        for w in ("wq", "wk", "wv", "wo", "w1", "w2"):
            params[p + w] = mat(d, d)
        for w in ("bq", "bk", "bv", "bo", "b1", "b2"):
            params[p + w] = np.zeros(d, dtype=dtype)
        params[p + "ln2_g"] = np.ones(d, dtype=dtype)
        params[p + "ln2_b"] = np.zeros(d, dtype=dtype)
    params["lnf_g"] = np.ones(d, dtype=dtype)
    params["lnf_b"] = np.zeros(d, dtype=dtype)
    return params


def init(config: SasrecConfig, vocab: Iterable[str]) -> SasrecModel:
    """Fresh model over a sorted vocabulary; deterministic per config seed."""
    config.validate()
    items = sorted(set(vocab))
    if not items:
        raise ConfigInvalid("vocabulary must be non-empty")
    rng = derive_rng(config.seed, "sasrec-init")
    return SasrecModel(config, items, _init_params(config, len(items), rng))


# --- numpy layers ----------------------------------------------------------

def _layer_norm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    # the mean terms absorb the 1/d factors of the mu/var chain rules
    dx = inv * (dxhat
                - np.mean(dxhat, axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def _dropout_fwd(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x, None
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = (rng.random(x.shape, dtype=draw_dtype) >= rate).astype(x.dtype)
    keep /= x.dtype.type(1.0 - rate)
    return x * keep, keep


def _dropout_bwd(dy, keep):
    return dy if keep is None else dy * keep


def _split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _softmax_masked(logits, allowed):
    shifted = np.where(allowed, logits, MASKED_LOGIT)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e = np.where(allowed, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.maximum(denom, 1e-30)


def _forward_batch(params, cfg: SasrecConfig, x_idx: np.ndarray, dropout_rng=None):
    """Hidden states for a batch of left-padded index rows.

    ``x_idx`` is (B, L) with 0 = padding and L <= max_seq_len. Positional
    rows are anchored to the right edge of the configured window so a
    sequence embeds identically under any padded width. Returns the final
    (B, L, d) hidden states and the cache for backprop.
    """
    d = cfg.embed_dim
    n = cfg.max_seq_len
    bsz, length = x_idx.shape
    dtype = params["item_emb"].dtype

    pad_mask = (x_idx > 0).astype(dtype)[..., None]  # (B, L, 1)
    h = params["item_emb"][x_idx] * math.sqrt(d) + params["pos_emb"][n - length: n]
    h = h * pad_mask
    h, drop0 = _dropout_fwd(h, cfg.dropout_rate, dropout_rng)

    real = x_idx > 0  # (B, L)
    causal = np.tril(np.ones((length, length), dtype=bool))
    allowed = causal[None, :, :] & real[:, None, :]
    diag = np.eye(length, dtype=bool)
    allowed = allowed | diag[None, :, :]  # self always visible: keeps softmax defined
    allowed = allowed[:, None, :, :]  # (B, 1, L, L) broadcast over heads

    scale = 1.0 / math.sqrt(d // cfg.n_heads)
    blocks = []
    for bix in range(cfg.n_blocks):
        p = f"blk{bix}_"
        a, ln1c = _layer_norm_fwd(h, params[p + "ln1_g"], params[p + "ln1_b"])
        q = a @ params[p + "wq"] + params[p + "bq"]
        k = a @ params[p + "wk"] + params[p + "bk"]
        v = a @ params[p + "wv"] + params[p + "bv"]
        qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
        logits = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        att = _softmax_masked(logits, allowed)
        att_d, adrop = _dropout_fwd(att, cfg.dropout_rate, dropout_rng)
        ctx = att_d @ vh
        merged = _merge_heads(ctx)
        o = merged @ params[p + "wo"] + params[p + "bo"]
        o_d, odrop = _dropout_fwd(o, cfg.dropout_rate, dropout_rng)
        h_att = h + o_d

        f_in, ln2c = _layer_norm_fwd(h_att, params[p + "ln2_g"], params[p + "ln2_b"])
        z1 = f_in @ params[p + "w1"] + params[p + "b1"]
        r1 = np.maximum(z1, 0.0)
        r1_d, rdrop = _dropout_fwd(r1, cfg.dropout_rate, dropout_rng)
        f = r1_d @ params[p + "w2"] + params[p + "b2"]
        f_d, fdrop = _dropout_fwd(f, cfg.dropout_rate, dropout_rng)
        h_new = (h_att + f_d) * pad_mask

        blocks.append({
            "h_in": h, "a": a, "ln1c": ln1c, "qh": qh, "kh": kh, "vh": vh,
            "att": att, "adrop": adrop, "att_d": att_d, "merged": merged,
            "odrop": odrop, "h_att": h_att, "f_in": f_in, "ln2c": ln2c,
            "z1": z1, "r1_d": r1_d, "rdrop": rdrop, "fdrop": fdrop,
        })
        h = h_new

    out, lnfc = _layer_norm_fwd(h, params["lnf_g"], params["lnf_b"])
    out = out * pad_mask
    cache = {
        "x_idx": x_idx, "pad_mask": pad_mask, "allowed": allowed, "drop0": drop0,
        "blocks": blocks, "lnfc": lnfc, "h_last": h, "scale": scale, "length": length,
    }
    return out, cache


def _backward_batch(params, cfg: SasrecConfig, cache, dout):
    """Gradients of every parameter given d(loss)/d(final hidden states)."""
    d = cfg.embed_dim
    n = cfg.max_seq_len
    x_idx = cache["x_idx"]
    pad_mask = cache["pad_mask"]
    allowed = cache["allowed"]
    length = cache["length"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    def outer(x, dy):
        # (B,L,d)^T (B,L,k) contracted over batch and position, via one GEMM
        return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])

    dout = dout * pad_mask
    dh, dg, db = _layer_norm_bwd(dout, cache["lnfc"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    for bix in reversed(range(cfg.n_blocks)):
        p = f"blk{bix}_"
        c = cache["blocks"][bix]
        dh = dh * pad_mask

        df_d = dh
        df = _dropout_bwd(df_d, c["fdrop"])
        grads[p + "w2"] += outer(c["r1_d"], df)
        grads[p + "b2"] += df.sum(axis=(0, 1))
        dr1_d = df @ params[p + "w2"].T
        dr1 = _dropout_bwd(dr1_d, c["rdrop"])
        dz1 = dr1 * (c["z1"] > 0)
        grads[p + "w1"] += outer(c["f_in"], dz1)
        grads[p + "b1"] += dz1.sum(axis=(0, 1))
        df_in = dz1 @ params[p + "w1"].T
        dh_att_ffn, dg2, db2 = _layer_norm_bwd(df_in, c["ln2c"])
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2
        dh_att = dh + dh_att_ffn  # residual

        do_d = dh_att
        do = _dropout_bwd(do_d, c["odrop"])
        grads[p + "wo"] += outer(c["merged"], do)
        grads[p + "bo"] += do.sum(axis=(0, 1))
        dmerged = do @ params[p + "wo"].T
        dctx = _split_heads(dmerged, cfg.n_heads)

        datt_d = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["att_d"].transpose(0, 1, 3, 2) @ dctx
        datt = _dropout_bwd(datt_d, c["adrop"])
        att = c["att"]
        dlogits = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dlogits = np.where(allowed, dlogits, 0.0)
        dlogits = dlogits * cache["scale"]
        dqh = dlogits @ c["kh"]
        dkh = dlogits.transpose(0, 1, 3, 2) @ c["qh"]

        dq = _merge_heads(dqh)
        dk = _merge_heads(dkh)
        dv = _merge_heads(dvh)
        a = c["a"]
        grads[p + "wq"] += outer(a, dq)
        grads[p + "bq"] += dq.sum(axis=(0, 1))
        grads[p + "wk"] += outer(a, dk)
        grads[p + "bk"] += dk.sum(axis=(0, 1))
        grads[p + "wv"] += outer(a, dv)
        grads[p + "bv"] += dv.sum(axis=(0, 1))
        da = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dh_pre, dg1, db1 = _layer_norm_bwd(da, c["ln1c"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        dh = dh_att + dh_pre  # residual into the block input

    dh = _dropout_bwd(dh, cache["drop0"])
    dh = dh * pad_mask
    grads["pos_emb"][n - length: n] += dh.sum(axis=0)
    demb = dh * math.sqrt(d)
    np.add.at(grads["item_emb"], x_idx.reshape(-1), demb.reshape(-1, d))
    return grads


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _loss_and_grads(params, cfg: SasrecConfig, x_idx, pos_idx, neg_idx,
                    dropout_rng=None):
    """Mean binary cross-entropy over (positive, sampled-negative) logits.

    Positions with a zero positive target are padding and excluded. Returns
    (loss, grads) with embedding weight decay folded in.
    """
    out, cache = _forward_batch(params, cfg, x_idx, dropout_rng)
    emb = params["item_emb"]
    valid = pos_idx > 0
    m = max(int(valid.sum()), 1)

    pos_e = emb[pos_idx]
    neg_e = emb[neg_idx]
    lp = np.sum(out * pos_e, axis=-1)
    ln_ = np.sum(out * neg_e, axis=-1)
    loss_terms = _softplus(-lp) + _softplus(ln_)
    loss = float(np.sum(loss_terms * valid) / m)

    dlp = (-_sigmoid(-lp) / m) * valid
    dln = (_sigmoid(ln_) / m) * valid
    dout = dlp[..., None] * pos_e + dln[..., None] * neg_e
    grads = _backward_batch(params, cfg, cache, dout)

    d = cfg.embed_dim
    dpos_flat = (dlp[..., None] * out).reshape(-1, d)
    dneg_flat = (dln[..., None] * out).reshape(-1, d)
    np.add.at(grads["item_emb"], pos_idx.reshape(-1), dpos_flat)
    np.add.at(grads["item_emb"], neg_idx.reshape(-1), dneg_flat)

    if cfg.l2_emb > 0:
        for name in ("item_emb", "pos_emb"):
            loss += cfg.l2_emb * float(np.sum(params[name].astype(np.float64) ** 2))
            grads[name] += 2.0 * cfg.l2_emb * params[name]
    return loss, grads


# --- public operations ------------------------------------------------------

def forward(model: SasrecModel, sequence: Sequence[int], train_mode: bool = False,
            dropout_rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-position hidden states for one index sequence, left-padded to n.

    Causality holds position-wise: the state at window slot t never depends
    on items right of t. An all-padding input returns all-zero states (no
    prediction can be made from it).
    """
    n = model.config.max_seq_len
    idx = list(sequence)[-n:]
    row = np.zeros((1, n), dtype=np.int64)
    if idx:
        row[0, n - len(idx):] = idx
    rng = dropout_rng if train_mode else None
    out, _ = _forward_batch(model.params, model.config, row, rng)
    return out[0]


def hidden_states_batch(model: SasrecModel, prefixes: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
    """Final-position hidden state per prefix, plus a validity flag.

    Prefixes are vocabulary-filtered; a prefix with no in-vocab item gets a
    zero state and a False flag.
    """
    n = model.config.max_seq_len
    encoded = [model.encode(p) for p in prefixes]
    valid = np.array([len(e) > 0 for e in encoded], dtype=bool)
    d = model.config.embed_dim
    states = np.zeros((len(prefixes), d), dtype=model.params["item_emb"].dtype)
    live = [i for i, ok in enumerate(valid) if ok]
    if not live:
        return states, valid
    length = min(n, max(len(encoded[i]) for i in live))
    x = np.zeros((len(live), length), dtype=np.int64)
    for r, i in enumerate(live):
        seq = encoded[i][-length:]
        x[r, length - len(seq):] = seq
    out, _ = _forward_batch(model.params, model.config, x, None)
    states[live] = out[:, -1, :]
    return states, valid


def score(model: SasrecModel, prefix: Sequence[str], candidates: Sequence[str]) -> dict[str, float]:
    """Candidate scores given a prefix; out-of-vocabulary candidates map to NaN."""
    encoded = model.encode(prefix)
    if not encoded:
        raise EmptyPrefixAfterFiltering(
            "prefix has no items inside the model vocabulary"
        )
    states, _ = hidden_states_batch(model, [list(prefix)])
    h = states[0]
    emb = model.params["item_emb"]
    out: dict[str, float] = {}
    for c in candidates:
        idx = model.item_to_idx.get(c)
        out[c] = float("nan") if idx is None else float(h @ emb[idx])
    return out


def score_matrix(model: SasrecModel, prefixes: Sequence[Sequence[str]],
                 candidates: Sequence[str]) -> np.ndarray:
    """(n_prefixes, n_candidates) score matrix; NaN marks OOV candidates and
    prefixes left empty by vocabulary filtering."""
    states, valid = hidden_states_batch(model, prefixes)
    emb = model.params["item_emb"]
    idx = np.array([model.item_to_idx.get(c, 0) for c in candidates], dtype=np.int64)
    known = np.array([c in model.item_to_idx for c in candidates], dtype=bool)
    scores = states @ emb[idx].T
    scores = scores.astype(np.float64)
    scores[:, ~known] = np.nan
    scores[~valid, :] = np.nan
    return scores


def _build_rows(model: SasrecModel, sessions: Sequence[Session]) -> list[list[int]]:
    n = model.config.max_seq_len
    rows = []
    for s in sessions:
        idx = [model.item_to_idx[a] for a in s.items if a in model.item_to_idx]
        if len(idx) >= 2:
            rows.append(idx[-(n + 1):])
    return rows


def _sample_negatives(pos: np.ndarray, x: np.ndarray, vocab_size: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One uniform negative per positive, avoiding the positive at the same
    position and every item of the input row.

    When the vocabulary is so small that no item satisfies both exclusions,
    the in-row exclusion is relaxed (the negative still differs from the
    positive whenever the vocabulary has more than one item).
    """
    neg = rng.integers(1, vocab_size + 1, size=pos.shape)
    valid = pos > 0
    neg[~valid] = 0
    row_items = [r[r > 0] for r in x]
    for _ in range(40):
        bad = valid & (neg == pos)
        for b in range(pos.shape[0]):
            if row_items[b].size:
                bad[b] |= valid[b] & np.isin(neg[b], row_items[b])
        n_bad = int(bad.sum())
        if n_bad == 0:
            return neg
        neg[bad] = rng.integers(1, vocab_size + 1, size=n_bad)
    # Exact fallback for stubborn (typically tiny-vocabulary) positions.
    for b in range(pos.shape[0]):
        forbidden = set(int(v) for v in row_items[b])
        for t in range(pos.shape[1]):
            if not valid[b, t]:
                continue
            p = int(pos[b, t])
            if int(neg[b, t]) != p and int(neg[b, t]) not in forbidden:
                continue
            pool = [i for i in range(1, vocab_size + 1) if i != p and i not in forbidden]
            if pool:
                neg[b, t] = pool[int(rng.integers(0, len(pool)))]
            elif vocab_size > 1:
                neg[b, t] = (p % vocab_size) + 1
            else:
                neg[b, t] = p
    return neg


def _hr_at_10(model: SasrecModel, events: list[tuple[list[str], str]]) -> float:
    if not events:
        return 0.0
    prefixes = [e[0] for e in events]
    states, valid = hidden_states_batch(model, prefixes)
    emb = model.params["item_emb"]
    scores = states @ emb[1:].T  # (E, V)
    hits = 0
    for i, (prefix, truth) in enumerate(events):
        t_idx = model.item_to_idx.get(truth)
        if t_idx is None or not valid[i]:
            continue
        row = scores[i].copy()
        for a in prefix:
            j = model.item_to_idx.get(a)
            if j is not None:
                row[j - 1] = -np.inf
        if np.sum(row > row[t_idx - 1]) < 10:
            hits += 1
    return hits / len(events)


def _val_events(model: SasrecModel, sessions: Sequence[Session],
                cap: int = 2000) -> list[tuple[list[str], str]]:
    events = []
    for s in sessions:
        items = s.items
        for t in range(1, len(items)):
            events.append((list(items[:t]), items[t]))
            if len(events) >= cap:
                return events
    return events


def train(model: SasrecModel, sessions: Sequence[Session],
          config: SasrecConfig | None = None,
          val_sessions: Sequence[Session] | None = None) -> tuple[SasrecModel, list[float]]:
    """Train in place; returns the model and the per-epoch mean loss trace.

    With validation sessions, stops early when HR@10 has not improved for
    ``patience`` epochs and restores the best parameters seen.
    """
    cfg = config or model.config
    cfg.validate()
    rows = _build_rows(model, sessions)
    if not rows:
        raise NoTrainableEvents("no session contributes a (prefix, next-item) pair")

    n = cfg.max_seq_len
    vocab_size = model.vocab_size
    opt = Adam(model.params, cfg.learning_rate, cfg.adam_betas)
    shuffle_rng = derive_rng(cfg.seed, "sasrec-shuffle")
    val_ev = _val_events(model, val_sessions) if val_sessions else None

    best_hr = -1.0
    best_params = None
    stale = 0
    losses: list[float] = []
    for epoch in range(cfg.n_epochs):
        order = shuffle_rng.permutation(len(rows))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(rows), cfg.batch_size):
            batch_rows = [rows[i] for i in order[start:start + cfg.batch_size]]
            length = min(n, max(len(r) - 1 for r in batch_rows))
            x = np.zeros((len(batch_rows), length), dtype=np.int64)
            pos = np.zeros((len(batch_rows), length), dtype=np.int64)
            for b, r in enumerate(batch_rows):
                inp = r[:-1][-length:]
                tgt = r[1:][-length:]
                x[b, length - len(inp):] = inp
                pos[b, length - len(tgt):] = tgt
            neg_rng = derive_rng(cfg.seed, "sasrec-neg", epoch, n_batches)
            neg = _sample_negatives(pos, x, vocab_size, neg_rng)
            drop_rng = derive_rng(cfg.seed, "sasrec-drop", epoch, n_batches)
            loss, grads = _loss_and_grads(model.params, cfg, x, pos, neg,
                                          dropout_rng=drop_rng)
            opt.step(model.params, grads)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / max(n_batches, 1))

        if val_ev is not None:
            hr = _hr_at_10(model, val_ev)
            if hr > best_hr + 1e-12:
                best_hr = hr
                best_params = {k: v.copy() for k, v in model.params.items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_params is not None:
        model.params = best_params
    return model, losses


def initial_loss(model: SasrecModel, sessions: Sequence[Session],
                 config: SasrecConfig | None = None) -> float:
    """Mean per-batch BCE of the current parameters over one deterministic
    pass (same statistic as the training loss trace, no updates applied)."""
    cfg = config or model.config
    rows = _build_rows(model, sessions)
    if not rows:
        raise NoTrainableEvents("no session contributes a (prefix, next-item) pair")
    n = cfg.max_seq_len
    total, count = 0.0, 0
    for start in range(0, len(rows), cfg.batch_size):
        batch_rows = rows[start:start + cfg.batch_size]
        length = min(n, max(len(r) - 1 for r in batch_rows))
        x = np.zeros((len(batch_rows), length), dtype=np.int64)
        pos = np.zeros((len(batch_rows), length), dtype=np.int64)
        for b, r in enumerate(batch_rows):
            inp = r[:-1][-length:]
            tgt = r[1:][-length:]
            x[b, length - len(inp):] = inp
            pos[b, length - len(tgt):] = tgt
        neg_rng = derive_rng(cfg.seed, "sasrec-neg", -1, start)
        neg = _sample_negatives(pos, x, model.vocab_size, neg_rng)
        loss, _ = _loss_and_grads(model.params, cfg, x, pos, neg)
        total += loss
        count += 1
    return total / max(count, 1)


def grad_check(config: SasrecConfig | None = None, h: float = 1e-5) -> float:
    """Max relative error of analytic vs. central-difference gradients.

    Runs a tiny double-precision model on a fixed two-sequence batch with
    dropout disabled; every parameter tensor is perturbed element-wise.
    """
    cfg = config or SasrecConfig(
        max_seq_len=5, embed_dim=8, n_blocks=1, n_heads=2, dropout_rate=0.0,
        l2_emb=1e-3, seed=123,
    )
    cfg.validate()
    if cfg.dropout_rate != 0.0:
        cfg = replace(cfg, dropout_rate=0.0)

    vocab_size = 7
    rng = derive_rng(cfg.seed, "gradcheck")
    params = _init_params(cfg, vocab_size, rng, dtype=np.float64)
    length = cfg.max_seq_len
    x = np.zeros((2, length), dtype=np.int64)
    pos = np.zeros((2, length), dtype=np.int64)
    seq1 = rng.integers(1, vocab_size + 1, size=length + 1)
    seq2 = rng.integers(1, vocab_size + 1, size=4)
    x[0, :] = seq1[:-1]
    pos[0, :] = seq1[1:]
    x[1, length - 3:] = seq2[:3]
    pos[1, length - 3:] = seq2[1:]
    neg = np.where(pos > 0, ((pos + 1) % vocab_size) + 1, 0)

    _, grads = _loss_and_grads(params, cfg, x, pos, neg)

    def loss_at() -> float:
        loss, _ = _loss_and_grads(params, cfg, x, pos, neg)
        return loss

    max_rel = 0.0
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(gflat[i]), abs(numeric), 1e-6)
            max_rel = max(max_rel, abs(gflat[i] - numeric) / denom)
    return max_rel


# --- checkpointing ----------------------------------------------------------

def _config_to_dict(cfg: SasrecConfig) -> dict:
    d = cfg.__dict__.copy()
    d["adam_betas"] = list(cfg.adam_betas)
    return d


def _config_from_dict(d: dict) -> SasrecConfig:
    d = dict(d)
    d["adam_betas"] = tuple(d["adam_betas"])
    return SasrecConfig(**d)


def save(model: SasrecModel, path: str | Path) -> None:
    """Versioned binary checkpoint: config echo, vocab map, raw tensors.

    Layout: magic, u32 version, two u32-length-prefixed JSON blobs (config,
    vocab list in index order), u32 tensor count, then per tensor a
    u16-length name, u8 rank, u64 dims, and row-major little-endian float32
    data.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for blob in (json.dumps(_config_to_dict(model.config), sort_keys=True),
                 json.dumps(list(model.items))):
        raw = blob.encode("utf-8")
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


def load(path: str | Path) -> SasrecModel:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def need(nbytes: int) -> bytes:
        chunk = view.read(nbytes)
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated checkpoint {path}")
        return chunk

    if need(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a sasrec checkpoint")
    (version,) = struct.unpack("<I", need(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", need(4))
    cfg = _config_from_dict(json.loads(need(clen)))
    (vlen,) = struct.unpack("<I", need(4))
    items = json.loads(need(vlen))
    (count,) = struct.unpack("<I", need(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(2))
        name = need(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", need(1))
        shape = tuple(struct.unpack("<Q", need(8))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(need(4 * size), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.float32).copy()
    missing = set(_param_names(cfg)) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return SasrecModel(cfg, items, params)
