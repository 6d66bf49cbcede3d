"""Shared oracles and fixtures-by-function for the test suite."""

from __future__ import annotations

import numpy as np

from adfm import numerics as nx
from adfm.batch import PreparedSample, collate
from adfm.data import DAY
from adfm.model import ModelConfig, forward_adv, forward_main, init_params, nll_loss

H = 1e-5


def rel_error(a, b):
    """Norm-relative difference, floored so two near-zero vectors compare equal."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr, h=H, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (modified in place and restored)."""
    flat = arr.reshape(-1)
    positions = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(arr.shape) if index is None else out[list(index)]


def tape_grads(loss_fn, tensors):
    """Analytic gradients of ``loss_fn()`` for each tensor, via one tape."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with nx.Tape() as tape:
        loss = loss_fn()
    nx.backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def check_op(loss_fn, tensors, tol=1e-4):
    """Largest relative error between tape and finite-difference gradients."""
    analytic = tape_grads(loss_fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        num = numeric_grad(lambda: loss_fn().item(), t.data)
        worst = max(worst, rel_error(g, num))
    return worst


# ------------------------------------------------------------ model fixtures

CH = ("click", "shop")


def small_config(**overrides):
    base = dict(
        embed_dim=4,
        mlp_hidden=(6,),
        n_heads=2,
        k_select=2,
        channels=[CH],
        short_channels=[("click", "item")],
        gate_hidden=(3,),
        vocab={"item": 12, "brand": 5, "shop": 9, "category": 4},
        profile_vocab=(3, 2),
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


def random_prepared(rng, m=6, config=None, label=None, user_id=0, request_id=0):
    """A prepared sample with ``m`` distinct aggregated entries in the long channel."""
    config = config or small_config()
    vocab = config.vocab
    kind = config.channels[0][1]
    ids = rng.choice(vocab[kind], size=m, replace=False).astype(np.int64)
    counts = rng.integers(1, 6, size=m)
    raw = np.repeat(ids, counts)
    profile = np.array([rng.integers(0, n) for n in config.profile_vocab], dtype=np.int64)
    target = np.array(
        [rng.integers(0, vocab["item"]), rng.integers(0, vocab["brand"]), rng.integers(0, vocab["shop"]), rng.integers(0, vocab["category"])],
        dtype=np.int64,
    )
    short = {ch: rng.integers(0, vocab[ch[1]], size=rng.integers(1, 4)).astype(np.int64) for ch in config.short_channels}
    y = int(rng.integers(0, 2)) if label is None else label
    return PreparedSample(
        user_id=user_id,
        request_id=request_id,
        label=y,
        profile=profile,
        target=target,
        short=short,
        long_raw={config.channels[0]: raw},
        long_ids={config.channels[0]: ids},
        long_count={config.channels[0]: rng.integers(0, config.n_count_buckets, size=m)},
        long_recency={config.channels[0]: rng.integers(0, config.n_recency_buckets, size=m)},
    )


def small_batch(seed=0, batch=3, m=6, config=None, **kw):
    config = config or small_config()
    rng = np.random.default_rng(seed)
    prepared = [random_prepared(rng, m, config, user_id=i, request_id=i) for i in range(batch)]
    return collate(prepared, config.channels, config.short_channels, **kw), prepared


def selection_gap(params, config, batch):
    """Smallest score gap across the top-k boundary of any row."""
    _, forwards = forward_main(batch, params, config)
    gaps = []
    for cf in forwards:
        if cf is None:
            continue
        G = np.where(cf.valid, cf.scores.data, -np.inf)
        s = -np.sort(-G, axis=-1)
        k = config.k_select
        if s.shape[-1] > k:
            gaps.append(np.min(s[:, k - 1] - s[:, k]))
    return min(gaps) if gaps else np.inf


def model_loss(params, config, batch, with_adv=False):
    p, forwards = forward_main(batch, params, config)
    loss = nll_loss(p, batch.labels)
    if with_adv:
        p_adv, included = forward_adv(batch, params, config, forwards)
        loss = nx.add(loss, nll_loss(p_adv, batch.labels, included))
    return loss


def well_separated_model(config, batch, seed=0, min_gap=1e-4, tries=50):
    """Parameters whose selection is not within ``min_gap`` of a tie."""
    for s in range(seed, seed + tries):
        params = init_params(config, s)
        # embeddings at unit scale so the forward is not numerically flat
        rng = np.random.default_rng(s)
        for name, t in params.items():
            if name.startswith("emb."):
                t.data[...] = rng.normal(0, 0.5, t.shape)
        if selection_gap(params, config, batch) > min_gap:
            return params
    raise RuntimeError("no well-separated parameter draw found")


def raw_times(n, rng, now=1_700_000_000, span_days=200):
    return np.sort(now - rng.integers(0, span_days * DAY, size=n))


def moving_average(x, window=20):
    return np.convolve(np.asarray(x, dtype=np.float64), np.ones(window) / window, mode="valid")


def phase_objective_trace(phase, seed, steps=200, lr=1e-3):
    """Per-step phase objective when one fixed batch is fed for ``steps`` steps.

    ``phase`` is "extractor" (Loss_s + Loss_adv) or "selector" (Loss_s - Loss_adv).
    """
    import itertools

    from adfm.training import EXTRACTOR_GROUPS, SELECTOR_GROUPS, TrainConfig, phase_extractors, phase_selector

    config = small_config(k_select=3)
    batch, _ = small_batch(seed=seed, batch=16, m=8, config=config)
    params = init_params(config, seed)
    run, groups, sign = {
        "extractor": (phase_extractors, EXTRACTOR_GROUPS, 1.0),
        "selector": (phase_selector, SELECTOR_GROUPS, -1.0),
    }[phase]
    state = TrainConfig(lr=lr).adam(params.group(*groups))
    log = run(itertools.repeat(batch), params, config, steps, state)
    return np.array([r.loss_s + sign * r.loss_adv for r in log.records])
