"""Behavior-log data model, JSONL dataset format and the synthetic generator.

A dataset is a JSON Lines file, one sample per line::

    {"user_id": 3, "request_id": 17, "label": 1,
     "user_profile": [[0, 4], [1, 0], [2, 2]],
     "item": {"item_id": 812, "brand_id": 40, "shop_id": 7, "category_id": 12},
     "short_seqs": [{"type": "click", "kind": "item", "events": [[812, 1699990000]]}],
     "long_seqs":  [{"type": "click", "kind": "item", "events": [[5, 1690000000], ...]}],
     "timestamp": 1700000000}

``timestamp`` (the request time) is optional; unknown keys are ignored and a
missing side id is written as -1.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import ParseError, SpecError

BEHAVIOR_TYPES = ("impression", "click", "add_to_cart", "pay")
TARGET_KINDS = ("item", "brand", "shop", "category")
PROFILE_FEATURES = ("age", "gender", "income")
DAY = 86_400


def channel_key(channel):
    return f"{channel[0]}:{channel[1]}"


def parse_channel(key):
    behavior_type, _, kind = key.partition(":")
    if behavior_type not in BEHAVIOR_TYPES or kind not in TARGET_KINDS:
        raise ValueError(f"unknown channel {key!r}")
    return behavior_type, kind


@dataclass(frozen=True)
class BehaviorEvent:
    behavior_type: str
    target_kind: str
    target_id: int
    timestamp: int


class RawSequence:
    """Time-ordered events of one (behavior_type, target_kind) channel.

    Stored column-wise; ``events`` materializes :class:`BehaviorEvent` objects.
    """

    __slots__ = ("channel", "target_ids", "timestamps")

    def __init__(self, channel, target_ids=(), timestamps=()):
        self.channel = (str(channel[0]), str(channel[1]))
        self.target_ids = np.asarray(target_ids, dtype=np.int64).reshape(-1)
        self.timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        if self.target_ids.shape != self.timestamps.shape:
            raise ValueError("target_ids and timestamps differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) < 0):
            raise ValueError(f"events of channel {channel_key(self.channel)} are not time-sorted")

    @classmethod
    def from_events(cls, channel, events: Iterable[BehaviorEvent]):
        events = list(events)
        for e in events:
            if (e.behavior_type, e.target_kind) != tuple(channel):
                raise ValueError(f"event {e} does not belong to channel {channel}")
        return cls(channel, [e.target_id for e in events], [e.timestamp for e in events])

    @property
    def events(self):
        t, k = self.channel
        return [BehaviorEvent(t, k, int(i), int(s)) for i, s in zip(self.target_ids, self.timestamps)]

    def __len__(self):
        return len(self.target_ids)

    def __eq__(self, other):
        return (
            isinstance(other, RawSequence)
            and self.channel == other.channel
            and np.array_equal(self.target_ids, other.target_ids)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    def __repr__(self):
        return f"RawSequence({channel_key(self.channel)}, n={len(self)})"


@dataclass(frozen=True)
class ItemProfile:
    item_id: int
    brand_id: int = -1
    shop_id: int = -1
    category_id: int = -1


@dataclass
class Sample:
    user_id: int
    request_id: int
    label: int
    item: ItemProfile
    user_profile: list = field(default_factory=list)
    short_seqs: list = field(default_factory=list)
    long_seqs: list = field(default_factory=list)
    timestamp: int | None = None

    def request_time(self):
        """Reference time for recency: the request time, else the latest event."""
        if self.timestamp is not None:
            return self.timestamp
        latest = [int(s.timestamps[-1]) for s in (*self.short_seqs, *self.long_seqs) if len(s)]
        return max(latest, default=0)


# ------------------------------------------------------------------ JSONL io


def _seq_to_json(seq):
    return {
        "type": seq.channel[0],
        "kind": seq.channel[1],
        "events": [[int(i), int(t)] for i, t in zip(seq.target_ids, seq.timestamps)],
    }


def sample_to_json(sample):
    out = {
        "user_id": int(sample.user_id),
        "request_id": int(sample.request_id),
        "label": int(sample.label),
        "user_profile": [[int(f), int(v)] for f, v in sample.user_profile],
        "item": {
            "item_id": int(sample.item.item_id),
            "brand_id": int(sample.item.brand_id),
            "shop_id": int(sample.item.shop_id),
            "category_id": int(sample.item.category_id),
        },
        "short_seqs": [_seq_to_json(s) for s in sample.short_seqs],
        "long_seqs": [_seq_to_json(s) for s in sample.long_seqs],
    }
    if sample.timestamp is not None:
        out["timestamp"] = int(sample.timestamp)
    return out


def _require(obj, key, kind, line, where=None):
    name = f"{where}.{key}" if where else key
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError("missing required key", line, name)
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ParseError(f"expected int, got {type(value).__name__}", line, name)
    if kind is not int and not isinstance(value, kind):
        raise ParseError(f"expected {kind.__name__}, got {type(value).__name__}", line, name)
    return value


def _seq_from_json(obj, line, where):
    behavior_type = _require(obj, "type", str, line, where)
    kind = _require(obj, "kind", str, line, where)
    if behavior_type not in BEHAVIOR_TYPES:
        raise ParseError(f"unknown behavior type {behavior_type!r}", line, f"{where}.type")
    if kind not in TARGET_KINDS:
        raise ParseError(f"unknown target kind {kind!r}", line, f"{where}.kind")
    events = _require(obj, "events", list, line, where)
    ids, times = [], []
    for j, ev in enumerate(events):
        if (
            not isinstance(ev, list)
            or len(ev) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in ev)
        ):
            raise ParseError("event must be [target_id, timestamp]", line, f"{where}.events[{j}]")
        if ev[0] < 0:
            raise ParseError("negative target id", line, f"{where}.events[{j}]")
        ids.append(ev[0])
        times.append(ev[1])
    try:
        return RawSequence((behavior_type, kind), ids, times)
    except ValueError as exc:
        raise ParseError(str(exc), line, f"{where}.events") from None


def sample_from_json(obj, line=None):
    if not isinstance(obj, dict):
        raise ParseError("line is not a JSON object", line)
    label = _require(obj, "label", int, line)
    if label not in (0, 1):
        raise ParseError("label must be 0 or 1", line, "label")
    profile = _require(obj, "user_profile", list, line)
    for j, pair in enumerate(profile):
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, int) for x in pair)):
            raise ParseError("expected [feature_id, value_id]", line, f"user_profile[{j}]")
    item = _require(obj, "item", dict, line)
    side = {}
    for key in ("brand_id", "shop_id", "category_id"):
        side[key] = _require(item, key, int, line, "item") if key in item else -1
    seqs = {}
    for key in ("short_seqs", "long_seqs"):
        raw = _require(obj, key, list, line)
        seqs[key] = [_seq_from_json(s, line, f"{key}[{j}]") for j, s in enumerate(raw)]
    timestamp = _require(obj, "timestamp", int, line) if "timestamp" in obj else None
    return Sample(
        user_id=_require(obj, "user_id", int, line),
        request_id=_require(obj, "request_id", int, line),
        label=label,
        item=ItemProfile(item_id=_require(item, "item_id", int, line, "item"), **side),
        user_profile=[(f, v) for f, v in profile],
        short_seqs=seqs["short_seqs"],
        long_seqs=seqs["long_seqs"],
        timestamp=timestamp,
    )


def load_dataset(path) -> Iterator[Sample]:
    """Yield samples from a JSONL file in file order. Blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            yield sample_from_json(obj, lineno)


def write_dataset(path, samples: Iterable[Sample]):
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


# ------------------------------------------------------------------- split


def _user_fraction(user_id, seed):
    digest = hashlib.blake2b(f"{seed}:{user_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def train_test_split(samples, ratio, seed=0):
    """Partition by hashed user id: roughly ``ratio`` of users go to train."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    train, test = [], []
    for s in samples:
        (train if _user_fraction(s.user_id, seed) < ratio else test).append(s)
    if not test:
        warnings.warn("train_test_split produced an empty test set", stacklevel=2)
    return train, test


# --------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    """Knobs of the synthetic generator.

    Every user gets a latent interest distribution over ``interest_dim``
    categories.  A user's long sequence mixes interest-aligned events
    (useful, skewed to recent), repeated hot items drawn from a Zipf
    popularity over a small pool (duplicates) and uniform random items at
    uniform times (noise).  The click label of a candidate is
    Bernoulli(sigmoid(temperature * interest[c] + label_bias
    + recency_weight * recent_share[c])), with ``recent_share[c]`` the
    share of the user's useful events from the last ``recent_days`` that
    fall in category ``c``.
    """

    n_users: int = 2000
    n_items: int = 5000
    n_categories: int = 20
    seq_len_range: tuple = (60, 160)
    noise_fraction: float = 0.4
    duplicate_fraction: float = 0.3
    interest_dim: int = 3
    seed: int = 0
    interest_alpha: float | None = 1.0
    n_brands: int = 400
    n_shops: int = 200
    hot_pool: int = 40
    zipf_exponent: float = 1.1
    requests_per_user: int = 2
    candidates_per_request: int = 3
    interest_target_share: float = 0.5
    target_pool: int | None = 10
    temperature: float = 6.0
    label_bias: float = -2.0
    recency_weight: float = 1.0
    recent_days: int = 7
    useful_age_days: float = 20.0
    window_days: int = 180
    short_window_days: int = 3
    short_cap: int = 20
    long_kinds: tuple = ("shop",)
    short_kinds: tuple = ("item",)
    behavior_type: str = "click"
    train_ratio: float = 0.8
    end_time: int = 1_700_000_000

    def validate(self):
        counts = {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_categories": self.n_categories,
            "interest_dim": self.interest_dim,
            "n_brands": self.n_brands,
            "n_shops": self.n_shops,
            "hot_pool": self.hot_pool,
            "requests_per_user": self.requests_per_user,
            "candidates_per_request": self.candidates_per_request,
            "window_days": self.window_days,
        }
        for name, value in counts.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise SpecError(f"{name} must be a positive integer, got {value!r}")
        for name in ("noise_fraction", "duplicate_fraction", "interest_target_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_fraction + self.duplicate_fraction > 1.0:
            raise SpecError("noise_fraction + duplicate_fraction exceeds 1")
        if self.interest_dim > self.n_categories:
            raise SpecError("interest_dim exceeds n_categories")
        if self.n_items < self.n_categories:
            raise SpecError("need at least one item per category")
        lo, hi = self.seq_len_range
        if not 1 <= lo <= hi:
            raise SpecError(f"bad seq_len_range {self.seq_len_range}")
        if self.target_pool is not None and self.target_pool < 1:
            raise SpecError("target_pool must be positive or None")
        if self.hot_pool > self.n_items:
            raise SpecError("hot_pool exceeds n_items")
        if self.interest_alpha is not None and self.interest_alpha <= 0:
            raise SpecError("interest_alpha must be positive or None")
        if self.behavior_type not in BEHAVIOR_TYPES:
            raise SpecError(f"unknown behavior_type {self.behavior_type!r}")
        for kind in (*self.long_kinds, *self.short_kinds):
            if kind not in TARGET_KINDS:
                raise SpecError(f"unknown target kind {kind!r}")
        if not 0.0 < self.train_ratio < 1.0:
            raise SpecError("train_ratio must lie in (0, 1)")
        if self.useful_age_days <= 0:
            raise SpecError("useful_age_days must be positive")

    @property
    def channels(self):
        return [(self.behavior_type, k) for k in self.long_kinds]

    @property
    def short_channels(self):
        return [(self.behavior_type, k) for k in self.short_kinds]

    @property
    def vocab(self):
        return {
            "item": self.n_items,
            "brand": self.n_brands,
            "shop": self.n_shops,
            "category": self.n_categories,
        }


PROFILE_VOCAB = (8, 2, 5)


@dataclass
class GroundTruth:
    """Planted facts about one sample: useful raw-event indices per channel."""

    useful: dict
    p_click: float

    def to_json(self):
        return {
            "useful": {k: [int(i) for i in v] for k, v in self.useful.items()},
            "p_click": float(self.p_click),
        }

    @classmethod
    def from_json(cls, obj):
        return cls({k: np.asarray(v, dtype=np.int64) for k, v in obj["useful"].items()}, obj["p_click"])


class Catalog(NamedTuple):
    category: np.ndarray
    brand: np.ndarray
    shop: np.ndarray
    by_category: list
    hot_items: np.ndarray
    hot_probs: np.ndarray

    def side(self, kind, items):
        if kind == "item":
            return items
        return getattr(self, kind)[items]


def make_catalog(spec, rng):
    items = np.arange(spec.n_items)
    category = items % spec.n_categories
    # brands and shops nest inside categories
    brand = (rng.integers(0, max(spec.n_brands // spec.n_categories, 1), spec.n_items) * spec.n_categories + category) % spec.n_brands
    shop = (rng.integers(0, max(spec.n_shops // spec.n_categories, 1), spec.n_items) * spec.n_categories + category) % spec.n_shops
    by_category = [items[category == c] for c in range(spec.n_categories)]
    hot = rng.choice(spec.n_items, size=spec.hot_pool, replace=False)
    ranks = np.arange(1, spec.hot_pool + 1, dtype=float)
    weights = ranks ** (-spec.zipf_exponent)
    return Catalog(category, brand, shop, by_category, hot, weights / weights.sum())


def click_logit(spec, interest, category, recent_share):
    """Closed-form label logit used by the generator."""
    return spec.temperature * interest[category] + spec.label_bias + spec.recency_weight * recent_share[category]


def click_probability(spec, interest, category, recent_share):
    return 1.0 / (1.0 + math.exp(-click_logit(spec, interest, category, recent_share)))


def _user_interest(spec, rng):
    cats = rng.choice(spec.n_categories, size=spec.interest_dim, replace=False)
    if spec.interest_alpha is None:
        w = np.full(spec.interest_dim, 1.0 / spec.interest_dim)
    else:
        w = rng.dirichlet(np.full(spec.interest_dim, spec.interest_alpha))
    interest = np.zeros(spec.n_categories)
    interest[cats] = w
    return interest


def _long_events(spec, rng, catalog, interest):
    """Item ids, timestamps (ascending) and a useful-flag for one raw sequence."""
    lo, hi = spec.seq_len_range
    n = int(rng.integers(lo, hi + 1))
    n_noise = int(round(spec.noise_fraction * n))
    n_dup = int(round(spec.duplicate_fraction * n))
    n_useful = n - n_noise - n_dup
    window = spec.window_days * DAY

    cats = rng.choice(spec.n_categories, size=n_useful, p=interest)
    useful_items = np.array([rng.choice(catalog.by_category[c]) for c in cats], dtype=np.int64)
    useful_age = np.minimum(rng.exponential(spec.useful_age_days * DAY, n_useful), window - 1)
    dup_items = catalog.hot_items[rng.choice(spec.hot_pool, size=n_dup, p=catalog.hot_probs)]
    noise_items = rng.integers(0, spec.n_items, size=n_noise)
    other_age = rng.uniform(0, window - 1, size=n_dup + n_noise)

    items = np.concatenate([useful_items, dup_items, noise_items]).astype(np.int64)
    ages = np.concatenate([useful_age, other_age]).astype(np.int64) + 1
    useful = np.zeros(n, dtype=bool)
    useful[:n_useful] = True
    times = spec.end_time - ages
    order = np.argsort(times, kind="stable")
    return items[order], times[order], useful[order]


def _recent_share(spec, catalog, items, times, useful):
    recent = useful & (times >= spec.end_time - spec.recent_days * DAY)
    share = np.zeros(spec.n_categories)
    if recent.any():
        share += np.bincount(catalog.category[items[recent]], minlength=spec.n_categories)
        share /= share.sum()
    return share


def synth_generate(spec: SynthSpec):
    """Generate (train, test, ground_truth) as a pure function of ``spec``.

    ``ground_truth`` maps ``"train"``/``"test"`` to lists of
    :class:`GroundTruth` aligned with the sample lists.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    catalog = make_catalog(spec, rng)
    samples, truths = [], []
    request_id = 0
    for user in range(spec.n_users):
        interest = _user_interest(spec, rng)
        profile = [(f, int(rng.integers(0, n))) for f, n in enumerate(PROFILE_VOCAB)]
        items, times, useful = _long_events(spec, rng, catalog, interest)
        share = _recent_share(spec, catalog, items, times, useful)
        useful_idx = np.flatnonzero(useful)

        short_mask = times >= spec.end_time - spec.short_window_days * DAY
        short_pos = np.flatnonzero(short_mask)[-spec.short_cap:]
        long_seqs = [RawSequence(c, catalog.side(c[1], items), times) for c in spec.channels]
        short_seqs = [
            RawSequence(c, catalog.side(c[1], items)[short_pos], times[short_pos])
            for c in spec.short_channels
        ]
        truth_useful = {channel_key(c): useful_idx for c in spec.channels}

        support = np.flatnonzero(interest)
        for r in range(spec.requests_per_user):
            now = spec.end_time + r * 60
            for _ in range(spec.candidates_per_request):
                if rng.random() < spec.interest_target_share:
                    cat = int(rng.choice(support))
                else:
                    cat = int(rng.integers(0, spec.n_categories))
                pool = catalog.by_category[cat]
                if spec.target_pool is not None:
                    pool = pool[: spec.target_pool]
                target = int(rng.choice(pool))
                p = click_probability(spec, interest, cat, share)
                label = int(rng.random() < p)
                samples.append(
                    Sample(
                        user_id=user,
                        request_id=request_id,
                        label=label,
                        item=ItemProfile(
                            target, int(catalog.brand[target]), int(catalog.shop[target]), cat
                        ),
                        user_profile=list(profile),
                        short_seqs=short_seqs,
                        long_seqs=long_seqs,
                        timestamp=now,
                    )
                )
                truths.append(GroundTruth(truth_useful, p))
            request_id += 1

    keep = {id(s): t for s, t in zip(samples, truths)}
    train, test = train_test_split(samples, spec.train_ratio, spec.seed)
    return train, test, {"train": [keep[id(s)] for s in train], "test": [keep[id(s)] for s in test]}


def write_ground_truth(path, truths):
    with open(path, "w", encoding="utf-8") as fh:
        for t in truths:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")))
            fh.write("\n")


def load_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        return [GroundTruth.from_json(json.loads(line)) for line in fh if line.strip()]


def dataset_vocab(samples, spec=None):
    """Vocabulary sizes large enough for every id in ``samples``."""
    if spec is not None:
        return dict(spec.vocab)
    vocab = dict.fromkeys(TARGET_KINDS, 1)
    for s in samples:
        for kind, value in (
            ("item", s.item.item_id),
            ("brand", s.item.brand_id),
            ("shop", s.item.shop_id),
            ("category", s.item.category_id),
        ):
            vocab[kind] = max(vocab[kind], value + 1)
        for seq in (*s.short_seqs, *s.long_seqs):
            if len(seq):
                kind = seq.channel[1]
                vocab[kind] = max(vocab[kind], int(seq.target_ids.max()) + 1)
    return vocab
