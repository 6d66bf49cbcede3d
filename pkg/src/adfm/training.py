"""Training loops: alternating adversarial phases, the joint objective and
the plain modes used as lower ablation rungs.

Extractor phases update embeddings, both interest extractors and both heads
on ``Loss_s + Loss_adv``; selector phases update only the behavior-selection
parameters on ``Loss_s - Loss_adv``.  ``Loss_adv`` is the CTR loss of the
adversarial head over samples that have a non-empty rest partition.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .batch import PreparedSample, collate, prepare_all
from .errors import ConfigError, ContractError
from .model import (
    ModelConfig,
    ModelParams,
    forward_adv,
    forward_main,
    init_params,
    nll_loss,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MODES = ("adversarial", "joint", "no_adversary", "sum_pool_baseline", "no_bsu")
MODE_POOLING = {
    "adversarial": "bsu",
    "joint": "bsu",
    "no_adversary": "bsu",
    "no_bsu": "ieu_all",
    "sum_pool_baseline": "sum",
}
EXTRACTOR_GROUPS = ("Embeddings", "IEU", "AIEU", "MainMLP", "AdvMLP")
SELECTOR_GROUPS = ("BSU",)
MAIN_GROUPS = ("Embeddings", "BSU", "IEU", "MainMLP")


@dataclass
class TrainConfig:
    mode: str = "adversarial"
    phase_len: int = 50
    batch_size: int = 64
    max_steps: int = 3000
    stop_eps: float = 1e-3
    stop_window: int = 5
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    selector_lr: float | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.phase_len < 1:
            raise ConfigError("phase_len must be >= 1")
        if self.stop_eps <= 0:
            raise ConfigError("stop_eps must be > 0")
        if self.batch_size < 1 or self.max_steps < 0 or self.stop_window < 1:
            raise ConfigError("batch_size, stop_window must be >= 1 and max_steps >= 0")
        return self

    def adam(self, params, selector=False):
        lr = self.selector_lr if selector and self.selector_lr is not None else self.lr
        return nx.AdamState.for_params(params, lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class StepRecord:
    step: int
    phase: str
    loss_s: float
    loss_adv: float | None
    updated: list

    def to_json(self):
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    status: str = "running"

    def extend(self, other):
        self.records.extend(other.records)

    def losses(self, key="loss_s", phase=None):
        return [getattr(r, key) for r in self.records if phase is None or r.phase == phase]

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json()) + "\n")
            fh.write(json.dumps({"status": self.status}) + "\n")


class BatchStream:
    """Endless, seeded stream of collated minibatches.

    Each epoch is shuffled; within pools of ``pool`` batches, samples are
    sorted by aggregated length so padding stays small, and the batch order
    is shuffled again.
    """

    def __init__(self, prepared, batch_size, channels, short_channels, seed=0, pool=16):
        if not prepared:
            raise ContractError("cannot stream an empty dataset")
        self.prepared = prepared
        self.batch_size = batch_size
        self.channels = channels
        self.short_channels = short_channels
        self.rng = np.random.default_rng(seed)
        self.pool = pool
        self._queue = []
        self.epoch = 0
        self._len = np.array([sum(len(v) for v in p.long_ids.values()) for p in prepared])

    def _refill(self):
        order = self.rng.permutation(len(self.prepared))
        span = self.batch_size * self.pool
        batches = []
        for i in range(0, len(order), span):
            chunk = order[i : i + span]
            chunk = chunk[np.argsort(self._len[chunk], kind="stable")]
            batches.extend(chunk[j : j + self.batch_size] for j in range(0, len(chunk), self.batch_size))
        self._queue = [batches[i] for i in self.rng.permutation(len(batches))]
        self.epoch += 1

    def __iter__(self):
        return self

    def __next__(self):
        if not self._queue:
            self._refill()
        idx = self._queue.pop()
        return collate([self.prepared[i] for i in idx], self.channels, self.short_channels)


def _losses(batch, params, config, with_adv):
    p, forwards = forward_main(batch, params, config)
    loss_s = nll_loss(p, batch.labels)
    if not with_adv:
        return loss_s, None, None
    p_adv, included = forward_adv(batch, params, config, forwards)
    loss_adv = nll_loss(p_adv, batch.labels, included)
    return loss_s, loss_adv, included


def _step(params, groups, state, objective_fn, batch, config, phase, step):
    params.set_trainable(groups)
    with nx.Tape() as tape:
        loss_s, loss_adv, included, objective = objective_fn(batch, params, config)
    updated = []
    if tape.produced(objective):
        nx.backward(objective, tape)
        live = {n: t for n, t in params.group(*groups).items() if t.grad is not None}
        if live:
            nx.adam_step(live, state)
            updated = sorted({params.groups[n] for n in live})
    adv = None if loss_adv is None else loss_adv.item()
    return StepRecord(step, phase, loss_s.item(), adv, updated), included


def _extractor_objective(batch, params, config):
    loss_s, loss_adv, included = _losses(batch, params, config, True)
    return loss_s, loss_adv, included, nx.add(loss_s, loss_adv)


def _selector_objective(batch, params, config):
    loss_s, loss_adv, included = _losses(batch, params, config, True)
    return loss_s, loss_adv, included, nx.sub(loss_s, loss_adv)


def _joint_objective(batch, params, config):
    loss_s, loss_adv, included = _losses(batch, params, config, True)
    return loss_s, loss_adv, included, nx.add(loss_s, nx.sub(loss_s, loss_adv))


def _main_objective(batch, params, config):
    loss_s, _, _ = _losses(batch, params, config, False)
    return loss_s, None, None, loss_s


def _run_phase(stream, params, config, n_steps, state, groups, objective, phase, start_step):
    frag = TrainLog()
    any_included = False
    for i in range(n_steps):
        rec, included = _step(params, groups, state, objective, next(stream), config, phase, start_step + i)
        frag.records.append(rec)
        if included is not None and included.any():
            any_included = True
    if n_steps and objective is not _main_objective and not any_included:
        warnings.warn(f"{phase} phase: every sample was adversarially masked; Loss_adv treated as 0")
    frag.status = "phase_done"
    return frag


def phase_extractors(stream, params, config, n_steps, state, start_step=0):
    """Selection frozen; minimize Loss_s + Loss_adv over the extractor groups."""
    return _run_phase(stream, params, config, n_steps, state, EXTRACTOR_GROUPS, _extractor_objective, "extractor", start_step)


def phase_selector(stream, params, config, n_steps, state, start_step=0):
    """Everything but selection frozen; minimize Loss_s - Loss_adv."""
    return _run_phase(stream, params, config, n_steps, state, SELECTOR_GROUPS, _selector_objective, "selector", start_step)


def _converged(history, eps, window):
    """Mean absolute change of both losses over the last ``window`` rounds."""
    if len(history) <= window:
        return False
    recent = np.asarray(history[-(window + 1) :], dtype=np.float64)
    deltas = np.abs(np.diff(recent, axis=0)).mean(axis=0)
    return bool(np.all(deltas < eps))


def model_config_for(mode, model_config):
    return replace(model_config, long_pooling=MODE_POOLING[mode])


def train(dataset, train_config: TrainConfig, model_config: ModelConfig, params: ModelParams | None = None):
    """Train from scratch (or from ``params``) and return (params, config, log).

    The returned model config carries the long-sequence pooling implied by
    the mode.
    """
    train_config.validate()
    config = model_config_for(train_config.mode, model_config).validate()
    if not dataset:
        raise ContractError("cannot train on an empty dataset")
    prepared = dataset if isinstance(dataset[0], PreparedSample) else prepare_all(dataset, len(config.profile_vocab))
    if params is None:
        params = init_params(config, train_config.seed)
    trainlog = TrainLog()
    if train_config.max_steps == 0:
        trainlog.status = "max_steps"
        return params, config, trainlog
    stream = BatchStream(prepared, train_config.batch_size, config.channels, config.short_channels, seed=train_config.seed)
    mode = train_config.mode
    L = train_config.phase_len
    step = 0
    history = []
    rounds = 0
    if mode == "adversarial":
        ext_state = train_config.adam(params.group(*EXTRACTOR_GROUPS))
        sel_state = train_config.adam(params.group(*SELECTOR_GROUPS), selector=True)
    else:
        groups = {
            "joint": EXTRACTOR_GROUPS + SELECTOR_GROUPS,
        }.get(mode, MAIN_GROUPS)
        state = train_config.adam(params.group(*groups))
        objective = _joint_objective if mode == "joint" else _main_objective
    while step < train_config.max_steps:
        if mode == "adversarial":
            n = min(L, train_config.max_steps - step)
            frag = phase_extractors(stream, params, config, n, ext_state, step)
            step += n
            trainlog.extend(frag)
            n = min(L, train_config.max_steps - step)
            if n:
                frag2 = phase_selector(stream, params, config, n, sel_state, step)
                step += n
                trainlog.extend(frag2)
                frag.extend(frag2)
        else:
            n = min(L, train_config.max_steps - step)
            frag = _run_phase(stream, params, config, n, state, groups, objective, mode, step)
            step += n
            trainlog.extend(frag)
        rounds += 1
        ls = np.mean([r.loss_s for r in frag.records])
        adv = [r.loss_adv for r in frag.records if r.loss_adv is not None]
        history.append((ls, np.mean(adv) if adv else 0.0))
        log.debug("%s step %d loss_s %.4f loss_adv %.4f", mode, step, *history[-1])
        if train_config.checkpoint_every and train_config.checkpoint_path and rounds % train_config.checkpoint_every == 0:
            save_checkpoint(train_config.checkpoint_path, params, config, {"step": step})
        if _converged(history, train_config.stop_eps, train_config.stop_window):
            trainlog.status = "converged"
            break
    else:
        trainlog.status = "max_steps"
    params.set_trainable(tuple(params.groups.values()))
    return params, config, trainlog
