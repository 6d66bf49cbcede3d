"""Command-line entry point: synth, aggregate, train, eval, ablate.

Every command reads one flat JSON config (``--config``) whose keys are the
union of the synthetic spec, model and training fields plus paths; single
keys can be overridden with ``--set key=value``.  Unknown keys are an
error.  Exit codes: 0 success, 1 a failed ablation row, 2 config error,
3 data error, 4 undefined metric.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .batch import infer_channels, prepare_all
from .data import (
    SynthSpec,
    dataset_vocab,
    load_dataset,
    load_ground_truth,
    parse_channel,
    synth_generate,
    write_dataset,
    write_ground_truth,
)
from .errors import ConfigError, ContractError, ParseError, SpecError, UndefinedMetricError
from .experiment import LADDER, desk_model_config, desk_train_config, evaluate_model, run_mode
from .hau import aggregate, compression_ratio
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("adfm")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_METRIC = 0, 1, 2, 3, 4

PATH_KEYS = {
    "data_in": "input dataset (JSONL)",
    "data_out": "output directory (synth) or file (aggregate)",
    "truth": "ground-truth sidecar JSONL aligned with data_in (eval)",
    "checkpoint": "model checkpoint (.npz) written by train, read by eval",
    "report": "report JSON path; stdout when unset",
    "train_log": "TrainLog JSONL written by train",
    "now": "aggregate reference time: 'request' or a unix timestamp",
}


def _field_docs():
    docs = {}
    for cls, label in ((SynthSpec, "synth"), (ModelConfig, "model"), (TrainConfig, "train")):
        for f in fields(cls):
            docs.setdefault(f.name, (label, f.default if not callable(f.default_factory) else f.default_factory()))
    return docs


FIELD_DOCS = _field_docs()
KNOWN_KEYS = set(FIELD_DOCS) | set(PATH_KEYS)


def _keys_epilog():
    lines = ["config keys (JSON file and --set):"]
    for name in sorted(FIELD_DOCS):
        label, default = FIELD_DOCS[name]
        lines.append(f"  {name:24s} [{label}] default {default!r}")
    for name, doc in PATH_KEYS.items():
        lines.append(f"  {name:24s} [path] {doc}")
    return "\n".join(lines)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=()):
    """Merge the JSON file and ``key=value`` overrides into one flat dict."""
    cfg = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = _parse_value(value)
    unknown = sorted(set(cfg) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _coerce(cls, cfg):
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, value in cfg.items():
        if key not in names:
            continue
        if key in ("channels", "short_channels"):
            value = [parse_channel(v) if isinstance(v, str) else tuple(v) for v in value]
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return kwargs


def synth_spec_from(cfg):
    try:
        spec = SynthSpec(**_coerce(SynthSpec, cfg))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    spec.validate()
    return spec


def train_config_from(cfg, base=None):
    tc = replace(base or TrainConfig(), **_coerce(TrainConfig, cfg))
    return tc.validate()


def model_config_from(cfg, base):
    return replace(base, **_coerce(ModelConfig, cfg)).validate()


def _require(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"missing required key {key!r}")
    return cfg[key]


def _load(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such dataset: {path}")
    return list(load_dataset(path))


def _emit_report(cfg, payload):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    if cfg.get("report"):
        with open(cfg["report"], "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ------------------------------------------------------------------ commands


def cmd_synth(cfg):
    spec = synth_spec_from(cfg)
    out = _require(cfg, "data_out")
    os.makedirs(out, exist_ok=True)
    train_set, test_set, truth = synth_generate(spec)
    write_dataset(os.path.join(out, "train.jsonl"), train_set)
    write_dataset(os.path.join(out, "test.jsonl"), test_set)
    write_ground_truth(os.path.join(out, "train.truth.jsonl"), truth["train"])
    write_ground_truth(os.path.join(out, "test.truth.jsonl"), truth["test"])
    _emit_report(cfg, {"train": len(train_set), "test": len(test_set), "data_out": out})
    return EXIT_OK


def _now_policy(value):
    if value in (None, "request"):
        return None
    try:
        return int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"now must be 'request' or an integer timestamp, got {value!r}") from None


def cmd_aggregate(cfg):
    src = _require(cfg, "data_in")
    dst = _require(cfg, "data_out")
    fixed_now = _now_policy(cfg.get("now"))
    raw_lengths, agg_lengths, n = [], [], 0
    with open(dst, "w", encoding="utf-8") as fh:
        if not os.path.exists(src):
            raise FileNotFoundError(f"no such dataset: {src}")
        for sample in load_dataset(src):
            now = sample.request_time() if fixed_now is None else fixed_now
            channels = {}
            for seq in sample.long_seqs:
                agg = aggregate(seq, now)
                raw_lengths.append(len(seq))
                agg_lengths.append(len(agg))
                channels[f"{seq.channel[0]}:{seq.channel[1]}"] = [
                    [int(i), int(c), int(r)] for i, c, r in zip(agg.target_ids, agg.count_buckets, agg.recency_buckets)
                ]
            row = {"user_id": sample.user_id, "request_id": sample.request_id, "now": int(now), "channels": channels}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
            n += 1
        ratio = compression_ratio(raw_lengths, agg_lengths) if raw_lengths else 0.0
        summary = {
            "summary": {
                "n_samples": n,
                "n_sequences": len(raw_lengths),
                "raw_events": int(np.sum(raw_lengths)) if raw_lengths else 0,
                "aggregated_entries": int(np.sum(agg_lengths)) if agg_lengths else 0,
                "compression_ratio": ratio,
            }
        }
        fh.write(json.dumps(summary) + "\n")
    _emit_report(cfg, summary["summary"])
    return EXIT_OK


def cmd_train(cfg):
    samples = _load(_require(cfg, "data_in"))
    if not samples:
        raise ContractError("training dataset is empty")
    long_ch, short_ch = infer_channels(samples)
    base = ModelConfig(channels=long_ch, short_channels=short_ch, vocab=dataset_vocab(samples))
    mc = model_config_from(cfg, base)
    tc = train_config_from(cfg)
    params, config, trainlog = train(prepare_all(samples, len(mc.profile_vocab)), tc, mc)
    path = _require(cfg, "checkpoint")
    save_checkpoint(path, params, config, {"mode": tc.mode, "steps": len(trainlog.records)})
    if cfg.get("train_log"):
        trainlog.write_jsonl(cfg["train_log"])
    losses = trainlog.losses()
    _emit_report(
        cfg,
        {
            "checkpoint": path,
            "mode": tc.mode,
            "steps": len(trainlog.records),
            "status": trainlog.status,
            "final_loss_s": losses[-1] if losses else None,
        },
    )
    return EXIT_OK


def _check_vocab(samples, config):
    seen = dataset_vocab(samples)
    over = {k: n for k, n in seen.items() if n > config.vocab.get(k, 1)}
    if over:
        detail = ", ".join(f"{k} needs {n} rows, model has {config.vocab.get(k, 1)}" for k, n in sorted(over.items()))
        raise ContractError(f"ids exceed the model vocabulary ({detail}); set 'vocab' when training")


def cmd_eval(cfg):
    params, config, _ = load_checkpoint(_require(cfg, "checkpoint"))
    samples = _load(_require(cfg, "data_in"))
    truths = load_ground_truth(cfg["truth"]) if cfg.get("truth") else None
    if truths is not None and len(truths) != len(samples):
        raise ContractError(f"truth has {len(truths)} rows for {len(samples)} samples")
    _check_vocab(samples, config)
    prepared = prepare_all(samples, len(config.profile_vocab))
    report = evaluate_model(params, config, prepared, truths)
    _emit_report(cfg, report.to_json())
    return EXIT_OK


def cmd_ablate(cfg):
    spec = synth_spec_from(cfg)
    mc = model_config_from(cfg, desk_model_config(spec))
    tc = train_config_from(cfg, desk_train_config(spec.seed))
    train_samples, test_samples, truth = synth_generate(spec)
    train_set = prepare_all(train_samples, len(mc.profile_vocab))
    test_set = prepare_all(test_samples, len(mc.profile_vocab))
    table, failed = {}, False
    for mode in LADDER:
        try:
            report = run_mode(mode, train_set, test_set, truth["test"], mc, tc)[0]
            table[mode] = {"status": "ok", **report.to_json()}
        except Exception as exc:  # one failed row must not hide the others
            log.error("mode %s failed: %s", mode, exc)
            table[mode] = {"status": "failed", "error": str(exc)}
            failed = True
    for mode, row in table.items():
        auc = row.get("auc")
        print(f"{mode:20s} {row['status']:6s} auc={auc:.4f}" if auc is not None else f"{mode:20s} {row['status']}", file=sys.stderr)
    _emit_report(cfg, table)
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic train/test split with ground truth"),
    "aggregate": (cmd_aggregate, "aggregate long sequences and report the compression ratio"),
    "train": (cmd_train, "train a model in any mode and write a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "ablate": (cmd_ablate, "train the four ablation modes on one synthetic spec"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="adfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = _keys_epilog()
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(
            name, help=help_text, description=help_text, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter
        )
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = load_run_config(args.config, args.set)
        return handler(cfg)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ContractError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
