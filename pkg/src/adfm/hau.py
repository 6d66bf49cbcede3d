"""Hierarchical aggregation: collapse a raw sequence into unique behaviors.

Each unique target id keeps its occurrence count and latest timestamp, both
also binned into small sparse buckets for embedding lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DAY, RawSequence
from .errors import ContractError

COUNT_BUCKETS = 8
RECENCY_DAYS = (0, 1, 3, 7, 14, 30, 60, 120, 180)
RECENCY_BUCKETS = len(RECENCY_DAYS) + 1


@dataclass(frozen=True)
class Bucketing:
    """Bin boundaries for count and recency. Defaults: log2 counts, day grid."""

    max_count_bucket: int = COUNT_BUCKETS - 1
    recency_days: tuple = RECENCY_DAYS

    @property
    def n_count(self):
        return self.max_count_bucket + 1

    @property
    def n_recency(self):
        return len(self.recency_days) + 1


DEFAULT_BUCKETING = Bucketing()


def bucket_count(n, bucketing=DEFAULT_BUCKETING):
    """floor(log2(n)) clamped to [0, max_count_bucket]."""
    n = int(n)
    if n < 1:
        raise ContractError(f"bucket_count needs n >= 1, got {n}")
    return min(n.bit_length() - 1, bucketing.max_count_bucket)


def bucket_recency(age_seconds, bucketing=DEFAULT_BUCKETING):
    """Index of the age on the day grid.

    Bucket 0 is age 0 exactly; bucket i holds ages in (days[i-1], days[i]];
    ages at or beyond the last grid point land in the overflow bucket.
    """
    age = int(age_seconds)
    if age < 0:
        raise ContractError(f"bucket_recency needs a non-negative age, got {age}")
    return int(_bucket_recency_array(np.array([age]), bucketing)[0])


def _bucket_recency_array(ages, bucketing):
    bounds = np.asarray(bucketing.recency_days, dtype=np.int64) * DAY
    idx = np.searchsorted(bounds, ages, side="left")
    idx[ages >= bounds[-1]] = len(bounds)
    return idx


def _bucket_count_array(counts, bucketing):
    return np.minimum(np.floor(np.log2(counts)).astype(np.int64), bucketing.max_count_bucket)


@dataclass(frozen=True)
class AggregatedBehavior:
    target_id: int
    count_bucket: int
    recency_bucket: int
    raw_count: int
    max_timestamp: int


@dataclass
class AggregatedSequence:
    """Unique behaviors of one channel, latest first (ties: lower id first)."""

    channel: tuple
    now: int
    target_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    raw_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    max_timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    count_buckets: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    recency_buckets: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.target_ids)

    @property
    def entries(self):
        return [
            AggregatedBehavior(int(i), int(c), int(r), int(n), int(t))
            for i, c, r, n, t in zip(
                self.target_ids,
                self.count_buckets,
                self.recency_buckets,
                self.raw_counts,
                self.max_timestamps,
            )
        ]

    def rebucket(self, bucketing):
        self.count_buckets = _bucket_count_array(self.raw_counts, bucketing)
        self.recency_buckets = _bucket_recency_array(self.now - self.max_timestamps, bucketing)
        return self


def aggregate(seq: RawSequence, now, bucketing=DEFAULT_BUCKETING):
    """Group ``seq`` by target id into an :class:`AggregatedSequence`."""
    times = seq.timestamps
    if len(times) and times.max() > now:
        raise ContractError(f"event at t={int(times.max())} is later than now={now}")
    if not len(times):
        return AggregatedSequence(seq.channel, int(now))
    ids, inverse, counts = np.unique(seq.target_ids, return_inverse=True, return_counts=True)
    latest = np.full(len(ids), np.iinfo(np.int64).min)
    np.maximum.at(latest, inverse, times)
    order = np.lexsort((ids, -latest))
    out = AggregatedSequence(
        seq.channel,
        int(now),
        target_ids=ids[order],
        raw_counts=counts[order],
        max_timestamps=latest[order],
    )
    return out.rebucket(bucketing)


def compression_ratio(raw_lengths, aggregated_lengths):
    """Mean over non-empty sequences of 1 - m/n (share of length removed)."""
    raw = np.asarray(raw_lengths, dtype=float)
    agg = np.asarray(aggregated_lengths, dtype=float)
    keep = raw > 0
    if not keep.any():
        return 0.0
    return float(np.mean(1.0 - agg[keep] / raw[keep]))


def aggregate_sample(sample, bucketing=DEFAULT_BUCKETING, now=None):
    """Aggregate every long sequence of a sample at its request time."""
    ref = sample.request_time() if now is None else now
    return [aggregate(s, ref, bucketing) for s in sample.long_seqs]
