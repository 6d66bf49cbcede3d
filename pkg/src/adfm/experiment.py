"""Evaluation on held-out data and the ablation ladder."""

from __future__ import annotations

import logging
import time
from dataclasses import replace

import numpy as np

from .batch import prepare_all
from .data import SynthSpec, channel_key, synth_generate
from .metrics import evaluate, selection_precision
from .model import ModelConfig, predict
from .training import TrainConfig, train

log = logging.getLogger(__name__)

LADDER = ("sum_pool_baseline", "no_bsu", "no_adversary", "adversarial")


def useful_positions(prepared, truth, channel):
    """Aggregated positions of a sample whose target id had a useful raw event."""
    ids = prepared.long_ids.get(channel)
    raw = prepared.long_raw.get(channel)
    if ids is None or raw is None:
        return np.zeros(0, dtype=np.int64)
    good = truth.useful.get(channel_key(channel), np.zeros(0, dtype=np.int64))
    return np.flatnonzero(np.isin(ids, raw[np.asarray(good, dtype=np.int64)]))


def selection_diagnostics(prepared, truths, selections, channels):
    """(selection precision, expected precision of a uniform random k-of-m pick)."""
    chosen, useful, random_rate = [], [], []
    for prep, truth, sel in zip(prepared, truths, selections):
        for ch in channels:
            if ch not in sel or not len(prep.long_ids.get(ch, ())):
                continue
            good = useful_positions(prep, truth, ch)
            chosen.append(sel[ch])
            useful.append(good)
            random_rate.append(len(good) / len(prep.long_ids[ch]))
    if not chosen:
        return None, None
    return selection_precision(chosen, useful), float(np.mean(random_rate))


def evaluate_model(params, config, prepared, truths=None, batch_size=256):
    probs, selections = predict(prepared, params, config, batch_size)
    labels = np.array([p.label for p in prepared])
    precision = random_rate = None
    if truths is not None and config.long_pooling == "bsu":
        precision, random_rate = selection_diagnostics(prepared, truths, selections, config.channels)
    return evaluate(
        probs,
        labels,
        [p.user_id for p in prepared],
        [p.request_id for p in prepared],
        selection=precision,
        random_selection=random_rate,
    )


def desk_model_config(spec: SynthSpec, **overrides):
    """Scaled-down model defaults for synthetic desk runs.

    The synthetic profile and short-term features carry no planted signal
    but identify users, so desk models leave them out to keep the
    comparison about the long sequence.
    """
    base = ModelConfig(
        embed_dim=16,
        mlp_hidden=(64, 32),
        n_heads=2,
        k_select=20,
        channels=spec.channels,
        short_channels=[],
        gate_hidden=(32,),
        vocab=spec.vocab,
        profile_vocab=(),
    )
    return replace(base, **overrides)


def desk_train_config(seed=0, **overrides):
    """Training defaults for desk runs: a larger step size than the
    industrial default, and a slower selector so the alternation stays stable."""
    return replace(TrainConfig(seed=seed, lr=5e-3, selector_lr=5e-4, max_steps=4000), **overrides)


def run_mode(mode, train_set, test_set, test_truth, model_config, train_config):
    start = time.perf_counter()
    params, config, trainlog = train(train_set, replace(train_config, mode=mode), model_config)
    report = evaluate_model(params, config, test_set, test_truth)
    log.info("%s: auc %.4f (%s, %.1fs)", mode, report.auc, trainlog.status, time.perf_counter() - start)
    return report, params, config, trainlog


def run_ablation(spec: SynthSpec, model_config=None, train_config=None, modes=LADDER):
    """Train every mode on one synthetic dataset and evaluate on its test split."""
    train_samples, test_samples, truth = synth_generate(spec)
    model_config = model_config or desk_model_config(spec)
    train_config = train_config or desk_train_config(spec.seed)
    n_profile = len(model_config.profile_vocab)
    train_set = prepare_all(train_samples, n_profile)
    test_set = prepare_all(test_samples, n_profile)
    table = {}
    for mode in modes:
        table[mode] = run_mode(mode, train_set, test_set, truth["test"], model_config, train_config)[0]
    return table
