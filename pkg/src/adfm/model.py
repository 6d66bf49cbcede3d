"""The ADFM network over the tape-based numerics kernel.

Long-term channels go through aggregation -> embedding -> behavior selection
(self-attention, scoring gate, hard top-k) -> target-attention interest
extraction.  The behaviors left out by the top-k feed an adversarial
extractor with its own head; that path exists for training only.

All forward functions work on a padded :class:`~adfm.batch.Batch`; the
single-sequence operations accept 2-D inputs as well.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .batch import Batch, collate, prepare_all
from .data import PROFILE_VOCAB, channel_key, parse_channel
from .errors import ConfigError, ContractError
from .hau import DEFAULT_BUCKETING, AggregatedSequence
from .numerics import Tensor

GROUPS = ("Embeddings", "BSU", "IEU", "AIEU", "MainMLP", "AdvMLP")
LONG_POOLING = ("bsu", "ieu_all", "sum")
PROB_EPS = 1e-7
SIDE_KINDS = ("item", "brand", "shop", "category")


@dataclass
class ModelConfig:
    embed_dim: int = 16
    mlp_hidden: tuple = (256, 128, 64)
    n_heads: int = 2
    k_select: int = 20
    channels: list = field(default_factory=lambda: [("click", "item")])
    short_channels: list = field(default_factory=lambda: [("click", "item")])
    gate_hidden: tuple = (32,)
    vocab: dict = field(default_factory=lambda: {"item": 5000, "brand": 400, "shop": 200, "category": 20})
    profile_vocab: tuple = PROFILE_VOCAB
    n_count_buckets: int = DEFAULT_BUCKETING.n_count
    n_recency_buckets: int = DEFAULT_BUCKETING.n_recency
    long_pooling: str = "bsu"
    adv_updates_embeddings: bool = False
    k_per_channel: dict = field(default_factory=dict)
    embed_init: float = 0.01

    def __post_init__(self):
        self.mlp_hidden = tuple(self.mlp_hidden)
        self.gate_hidden = tuple(self.gate_hidden)
        self.profile_vocab = tuple(self.profile_vocab)
        self.channels = [tuple(c) for c in self.channels]
        self.short_channels = [tuple(c) for c in self.short_channels]

    def validate(self):
        if self.embed_dim < 1 or self.n_heads < 1 or self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.k_select < 1 or any(k < 1 for k in self.k_per_channel.values()):
            raise ConfigError("k_select must be >= 1")
        if len(self.mlp_hidden) < 1 or any(h < 1 for h in self.mlp_hidden):
            raise ConfigError("mlp_hidden needs at least one positive layer")
        if any(h < 1 for h in self.gate_hidden):
            raise ConfigError("gate_hidden layers must be positive")
        if self.long_pooling not in LONG_POOLING:
            raise ConfigError(f"long_pooling must be one of {LONG_POOLING}")
        if not self.embed_init > 0:
            raise ConfigError("embed_init must be positive")
        for ch in (*self.channels, *self.short_channels):
            if ch[1] not in self.vocab:
                raise ConfigError(f"no vocabulary for target kind {ch[1]!r}")
        return self

    def k_for(self, channel):
        return int(self.k_per_channel.get(channel_key(channel), self.k_select))

    def to_json(self):
        d = asdict(self)
        d["channels"] = [channel_key(c) for c in self.channels]
        d["short_channels"] = [channel_key(c) for c in self.short_channels]
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["channels"] = [parse_channel(c) for c in d.get("channels", [])]
        d["short_channels"] = [parse_channel(c) for c in d.get("short_channels", [])]
        return cls(**d)


class ModelParams:
    """Named parameter tensors, each tagged with one freeze group."""

    def __init__(self, tensors, groups):
        self.tensors = dict(tensors)
        self.groups = dict(groups)
        for name in self.tensors:
            if self.groups.get(name) not in GROUPS:
                raise ContractError(f"parameter {name!r} has no valid group")

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def group(self, *groups):
        return {n: t for n, t in self.tensors.items() if self.groups[n] in groups}

    def set_trainable(self, groups):
        for n, t in self.tensors.items():
            t.requires_grad = self.groups[n] in groups
            t.grad = None

    def checksum(self, *groups):
        h = hashlib.sha256()
        for n in sorted(self.tensors):
            if not groups or self.groups[n] in groups:
                h.update(n.encode())
                h.update(np.ascontiguousarray(self.tensors[n].data).tobytes())
        return h.hexdigest()

    def copy(self):
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.tensors.items()},
            self.groups,
        )

    def n_values(self):
        return int(sum(t.data.size for t in self.tensors.values()))


def _ch(channel):
    return channel_key(channel)


def init_params(config: ModelConfig, seed=0):
    """Glorot-uniform matrices, zero biases, uniform(+-embed_init) embeddings."""
    config.validate()
    rng = np.random.default_rng(seed)
    D = config.embed_dim
    dh = D // config.n_heads
    tensors, groups = {}, {}

    def add(name, tensor, group):
        tensor.name = name
        tensors[name] = tensor
        groups[name] = group

    for kind in SIDE_KINDS:
        add(f"emb.{kind}", nx.embedding_uniform(rng, config.vocab.get(kind, 1), D, config.embed_init), "Embeddings")
    for f, n in enumerate(config.profile_vocab):
        add(f"emb.profile{f}", nx.embedding_uniform(rng, n, D, config.embed_init), "Embeddings")
    add("emb.count", nx.embedding_uniform(rng, config.n_count_buckets, D, config.embed_init), "Embeddings")
    add("emb.recency", nx.embedding_uniform(rng, config.n_recency_buckets, D, config.embed_init), "Embeddings")

    for ch in config.channels:
        c = _ch(ch)
        for w in ("wq", "wk", "wv"):
            add(f"bsu.{c}.{w}", nx.glorot_uniform(rng, D, D), "BSU")
        widths = (D, *config.gate_hidden, 1)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            add(f"bsu.{c}.gate.w{i}", nx.glorot_uniform(rng, a, b), "BSU")
            add(f"bsu.{c}.gate.b{i}", nx.zeros((b,)), "BSU")
        for unit, group in (("ieu", "IEU"), ("aieu", "AIEU")):
            for h in range(config.n_heads):
                for w in ("wc", "ws", "we"):
                    add(f"{unit}.{c}.h{h}.{w}", nx.glorot_uniform(rng, D, dh), group)

    n_in = input_width(config)
    for head, group in (("main", "MainMLP"), ("adv", "AdvMLP")):
        widths = (n_in, *config.mlp_hidden, 1)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            add(f"{head}.w{i}", nx.glorot_uniform(rng, a, b), group)
            add(f"{head}.b{i}", nx.zeros((b,)), group)
    return ModelParams(tensors, groups)


def input_width(config):
    D = config.embed_dim
    return D * (len(config.profile_vocab) + 1 + len(config.short_channels) + len(config.channels))


# ------------------------------------------------------------------ helpers


def _lookup(table, ids, mask=None):
    """Embedding rows for ``ids``; masked positions contribute exact zeros."""
    if mask is None:
        return nx.gather_rows(table, ids)
    rows = nx.gather_rows(table, np.where(mask, ids, 0))
    return nx.mul(rows, mask[..., None].astype(np.float64))


def _safe_mask(mask):
    """Unmask position 0 of rows with nothing unmasked, so softmax is defined.

    Callers zero those rows' outputs afterwards.
    """
    empty = ~mask.any(axis=-1)
    if not empty.any():
        return mask
    mask = mask.copy()
    mask[empty, 0] = True
    return mask


def _take(x, idx):
    """Per-sample row gather: x[..., idx, :] with idx of shape (..., K)."""
    if x.ndim == 2:
        return nx.gather_rows(x, idx)
    B, M, D = x.shape
    flat = nx.reshape(x, (B * M, D))
    offsets = (np.arange(B) * M)[:, None]
    return nx.gather_rows(flat, idx + offsets)


def _tables(params, detached):
    names = [f"emb.{k}" for k in SIDE_KINDS] + ["emb.count", "emb.recency"]
    names += [n for n in params.tensors if n.startswith("emb.profile")]
    return {n: (nx.detach(params[n]) if detached else params[n]) for n in names}


def _mlp(x, params, head, n_layers):
    h = x
    for i in range(n_layers):
        h = nx.add(nx.matmul(h, params[f"{head}.w{i}"]), params[f"{head}.b{i}"])
        if i < n_layers - 1:
            h = nx.relu(h)
    return h


# ------------------------------------------------------------------- units


def embed_aggregated(seq, params, config=None, mask=None, tables=None):
    """Row i = emb(target id) + emb(count bucket) + emb(recency bucket).

    ``seq`` is an :class:`AggregatedSequence` (result m x D) or a batched
    :class:`~adfm.batch.LongChannel`-like object (result B x M x D).
    """
    tables = tables or _tables(params, False)
    if isinstance(seq, AggregatedSequence):
        if not len(seq):
            raise ContractError("embed_aggregated needs at least one entry")
        kind = seq.channel[1]
        ids, cnt, rec = seq.target_ids, seq.count_buckets, seq.recency_buckets
    else:
        kind = seq.kind
        ids, cnt, rec, mask = seq.ids, seq.count, seq.recency, seq.mask
    out = nx.add(_lookup(tables[f"emb.{kind}"], ids, mask), _lookup(tables["emb.count"], cnt, mask))
    return nx.add(out, _lookup(tables["emb.recency"], rec, mask))


def bsu_self_attention(E, mask, params, channel):
    """Softmax((E Wq)(E Wk)^T / sqrt(D)) (E Wv), masked rows excluded and zeroed."""
    c = _ch(channel)
    D = E.shape[-1]
    q = nx.matmul(E, params[f"bsu.{c}.wq"])
    k = nx.matmul(E, params[f"bsu.{c}.wk"])
    v = nx.matmul(E, params[f"bsu.{c}.wv"])
    logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(D))
    if mask is None:
        return nx.matmul(nx.softmax_rows(logits), v)
    att = nx.softmax_rows(logits, _safe_mask(mask)[..., None, :])
    return nx.mul(nx.matmul(att, v), mask[..., None].astype(np.float64))


def bsu_gate(E_att, params, channel, n_layers=None):
    """Row-wise feed-forward scorer with sigmoid output; returns shape (..., m)."""
    c = _ch(channel)
    if n_layers is None:
        n_layers = sum(1 for n in params.tensors if n.startswith(f"bsu.{c}.gate.w"))
    h = _mlp(E_att, params, f"bsu.{c}.gate", n_layers)
    return nx.reshape(nx.sigmoid(h), h.shape[:-1])


@dataclass
class ChannelForward:
    scores: Tensor  # (..., m)
    scaled: Tensor  # (..., m, D): scores * attended embeddings
    selected: Tensor  # (..., k', D)
    selected_mask: np.ndarray
    selected_indices: np.ndarray
    rest: Tensor
    rest_mask: np.ndarray
    rest_indices: np.ndarray
    valid: np.ndarray
    embedded: Tensor | None = None


def select_top_k(scores, k, mask=None):
    """Positions of the k largest scores per row (ties -> lower index) and the rest.

    Returns (selected, selected_mask, rest, rest_mask); masked-out entries
    sort last and are flagged False.
    """
    g = np.asarray(scores, dtype=np.float64)
    valid = np.ones(g.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    M = g.shape[-1]
    K = min(int(k), M)
    order = np.argsort(np.where(valid, -g, np.inf), axis=-1, kind="stable")
    n_valid = valid.sum(axis=-1)[..., None]
    sel_mask = np.arange(K) < np.minimum(k, n_valid)
    rest_mask = (K + np.arange(M - K)) < n_valid
    return order[..., :K], sel_mask, order[..., K:], rest_mask


def bsu_filter(G, E_att, k, mask=None):
    """Scale rows by their score, then split them into top-k and the rest.

    Both partitions carry the score scaling so the gate receives gradient
    from either side; the split itself is not differentiable.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    valid = np.ones(G.shape, dtype=bool) if mask is None else mask
    sel, sel_mask, rest, rest_mask = select_top_k(G.data, k, valid)
    scaled = nx.mul(nx.reshape(G, (*G.shape, 1)), E_att)
    return ChannelForward(
        scores=G,
        scaled=scaled,
        selected=_take(scaled, sel),
        selected_mask=sel_mask,
        selected_indices=sel,
        rest=_take(scaled, rest),
        rest_mask=rest_mask,
        rest_indices=rest,
        valid=valid,
    )


def ieu_attend(E_sel, mask, E_target, params, prefix, n_heads):
    """Multi-head attention with the target as query over ``E_sel``.

    ``prefix`` names the unit and channel, e.g. ``"ieu.click:item"``.
    Returns shape (..., D): the heads concatenated.  Rows whose mask is all
    False come out as zeros.
    """
    D = E_target.shape[-1]
    q_in = nx.reshape(E_target, (*E_target.shape[:-1], 1, D))
    has_any = None
    if mask is not None:
        has_any = mask.any(axis=-1)
        mask = _safe_mask(mask)[..., None, :]
    heads = []
    for h in range(n_heads):
        q = nx.matmul(q_in, params[f"{prefix}.h{h}.wc"])
        k = nx.matmul(E_sel, params[f"{prefix}.h{h}.ws"])
        v = nx.matmul(E_sel, params[f"{prefix}.h{h}.we"])
        logits = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(D))
        heads.append(nx.matmul(nx.softmax_rows(logits, mask), v))
    out = nx.concat(heads, axis=-1)
    out = nx.reshape(out, (*out.shape[:-2], D))
    if has_any is not None and not has_any.all():
        out = nx.mul(out, has_any[..., None].astype(np.float64))
    return out


def target_embedding(target, params, tables=None):
    """Sum of item, brand, shop and category embeddings; -1 ids contribute zero.

    ``target`` is an ItemProfile or an int array (..., 4).
    """
    tables = tables or _tables(params, False)
    if hasattr(target, "item_id"):
        target = np.array([[target.item_id, target.brand_id, target.shop_id, target.category_id]])
    target = np.asarray(target, dtype=np.int64)
    out = None
    for j, kind in enumerate(SIDE_KINDS):
        ids = target[..., j]
        present = ids >= 0
        row = _lookup(tables[f"emb.{kind}"], ids, None if present.all() else present)
        out = row if out is None else nx.add(out, row)
    return out


# ----------------------------------------------------------------- forward


class _Kinded:
    """LongChannel view that knows its target kind."""

    def __init__(self, lc, kind):
        self.ids, self.count, self.recency, self.mask = lc.ids, lc.count, lc.recency, lc.mask
        self.kind = kind


def _as_batch(x, config):
    if isinstance(x, Batch):
        return x
    samples = [x] if not isinstance(x, (list, tuple)) else list(x)
    prepared = prepare_all(samples, len(config.profile_vocab))
    return collate(prepared, config.channels, config.short_channels)


def _base_features(batch, tables, config):
    feats = []
    for f in range(len(config.profile_vocab)):
        col = batch.profile[:, f]
        present = col >= 0
        feats.append(_lookup(tables[f"emb.profile{f}"], col, None if present.all() else present))
    target = target_embedding(batch.target, None, tables)
    feats.append(target)
    for ch in config.short_channels:
        ids, mask = batch.short[ch]
        if ids.shape[1] == 0:
            feats.append(Tensor(np.zeros((len(batch), config.embed_dim))))
            continue
        feats.append(nx.reshape(nx.sum_rows(_lookup(tables[f"emb.{ch[1]}"], ids, mask)), (len(batch), -1)))
    return feats, target


def _zeros(batch, config):
    return Tensor(np.zeros((len(batch), config.embed_dim)))


def forward_main(batch, params, config):
    """CTR probability from the selected behaviors.

    Returns (p_s of shape (B,), list of per-channel :class:`ChannelForward`;
    the list holds None for channels without a selection step).
    """
    batch = _as_batch(batch, config)
    tables = _tables(params, False)
    feats, target = _base_features(batch, tables, config)
    forwards = []
    for ch in config.channels:
        lc = batch.long[ch]
        if config.long_pooling == "sum":
            if lc.raw_ids.shape[1] == 0:
                feats.append(_zeros(batch, config))
            else:
                pooled = nx.sum_rows(_lookup(tables[f"emb.{ch[1]}"], lc.raw_ids, lc.raw_mask))
                feats.append(nx.reshape(pooled, (len(batch), -1)))
            forwards.append(None)
            continue
        if lc.ids.shape[1] == 0:
            feats.append(_zeros(batch, config))
            forwards.append(None)
            continue
        E = embed_aggregated(_Kinded(lc, ch[1]), params, tables=tables)
        if config.long_pooling == "ieu_all":
            feats.append(ieu_attend(E, lc.mask, target, params, f"ieu.{_ch(ch)}", config.n_heads))
            forwards.append(None)
            continue
        att = bsu_self_attention(E, lc.mask, params, ch)
        G = bsu_gate(att, params, ch, n_layers=len(config.gate_hidden) + 1)
        cf = bsu_filter(G, att, config.k_for(ch), lc.mask)
        cf.embedded = E
        feats.append(ieu_attend(cf.selected, cf.selected_mask, target, params, f"ieu.{_ch(ch)}", config.n_heads))
        forwards.append(cf)
    logits = _mlp(nx.concat(feats, axis=-1), params, "main", len(config.mlp_hidden) + 1)
    return nx.reshape(nx.sigmoid(logits), (len(batch),)), forwards


def adversarial_mask(channel_forwards):
    """Samples with at least one non-empty rest partition."""
    masks = [cf.rest_mask.any(axis=-1) for cf in channel_forwards if cf is not None]
    if not masks:
        return None
    return np.logical_or.reduce(masks)


def forward_adv(batch, params, config, channel_forwards):
    """CTR probability from the behaviors the selector left out.

    Returns (p_adv of shape (B,), boolean mask of samples that take part).
    Unless ``config.adv_updates_embeddings`` is set, no gradient from this
    path reaches the embedding tables.
    """
    batch = _as_batch(batch, config)
    block = not config.adv_updates_embeddings and any(
        t.requires_grad for t in _tables(params, False).values()
    )
    tables = _tables(params, block)
    feats, target = _base_features(batch, tables, config)
    included = adversarial_mask(channel_forwards)
    if included is None:
        included = np.zeros(len(batch), dtype=bool)
    for ch, cf in zip(config.channels, channel_forwards):
        if cf is None or cf.rest.shape[-2] == 0:
            feats.append(_zeros(batch, config))
            continue
        rest = cf.rest
        if block:
            bsu = [params[n] for n in params.tensors if n.startswith(f"bsu.{_ch(ch)}.")]
            if any(p.requires_grad for p in bsu):
                lc = batch.long[ch]
                E = embed_aggregated(_Kinded(lc, ch[1]), params, tables=tables)
                att = bsu_self_attention(E, lc.mask, params, ch)
                G = bsu_gate(att, params, ch, n_layers=len(config.gate_hidden) + 1)
                rest = _take(nx.mul(nx.reshape(G, (*G.shape, 1)), att), cf.rest_indices)
            else:
                rest = nx.detach(rest)
        feats.append(ieu_attend(rest, cf.rest_mask, target, params, f"aieu.{_ch(ch)}", config.n_heads))
    logits = _mlp(nx.concat(feats, axis=-1), params, "adv", len(config.mlp_hidden) + 1)
    return nx.reshape(nx.sigmoid(logits), (len(batch),)), included


def nll_loss(p, y, mask=None):
    """Mean negative log-likelihood over the samples where ``mask`` is True."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if p.data.size != y.size:
        raise ContractError(f"nll_loss: {p.data.size} probabilities vs {y.size} labels")
    p = nx.reshape(p, y.shape)
    w = np.ones_like(y) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.sum() == 0:
        return Tensor(0.0)
    pc = nx.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = nx.add(nx.mul(nx.log(pc), y), nx.mul(nx.log(nx.sub(1.0, pc)), 1.0 - y))
    return nx.scale(nx.sum(nx.mul(ll, w)), -1.0 / w.sum())


def predict(prepared, params, config, batch_size=256):
    """Main-path probabilities and per-channel selected aggregated positions."""
    probs, selections = [], []
    for i in range(0, len(prepared), batch_size):
        chunk = prepared[i : i + batch_size]
        batch = collate(chunk, config.channels, config.short_channels)
        p, forwards = forward_main(batch, params, config)
        probs.append(p.data.copy())
        for j in range(len(chunk)):
            row = {}
            for ch, cf in zip(config.channels, forwards):
                if cf is not None:
                    row[ch] = cf.selected_indices[j][cf.selected_mask[j]]
            selections.append(row)
    return (np.concatenate(probs) if probs else np.zeros(0)), selections


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, params, config, extra=None):
    meta = {"config": config.to_json(), "groups": params.groups, "extra": extra or {}}
    arrays = {f"param::{n}": t.data for n, t in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        tensors = {
            k[len("param::") :]: Tensor(z[k].copy(), requires_grad=True, name=k[len("param::") :])
            for k in z.files
            if k.startswith("param::")
        }
    config = ModelConfig.from_json(meta["config"])
    return ModelParams(tensors, meta["groups"]), config, meta.get("extra", {})
