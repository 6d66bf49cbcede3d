"""Turn samples into padded index arrays the model consumes.

Aggregation runs once per sample at preparation time; collation pads every
channel to the longest sequence in the batch and carries boolean masks.
Padding positions hold index 0 and are always masked out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample
from .hau import DEFAULT_BUCKETING, aggregate

EMPTY = np.zeros(0, dtype=np.int64)


@dataclass
class PreparedSample:
    user_id: int
    request_id: int
    label: int
    profile: np.ndarray  # value id per profile feature, -1 if absent
    target: np.ndarray  # item, brand, shop, category ids, -1 if absent
    short: dict  # channel -> ids
    long_raw: dict  # channel -> ids (with duplicates, time order)
    long_ids: dict  # channel -> unique ids after aggregation
    long_count: dict
    long_recency: dict


def prepare(sample: Sample, n_profile, bucketing=DEFAULT_BUCKETING, now=None):
    profile = np.full(n_profile, -1, dtype=np.int64)
    for f, v in sample.user_profile:
        if 0 <= f < n_profile:
            profile[f] = v
    it = sample.item
    target = np.array([it.item_id, it.brand_id, it.shop_id, it.category_id], dtype=np.int64)
    ref = sample.request_time() if now is None else now
    short = {s.channel: s.target_ids for s in sample.short_seqs}
    long_raw, ids, cnt, rec = {}, {}, {}, {}
    for s in sample.long_seqs:
        agg = aggregate(s, ref, bucketing)
        long_raw[s.channel] = s.target_ids
        ids[s.channel] = agg.target_ids
        cnt[s.channel] = agg.count_buckets
        rec[s.channel] = agg.recency_buckets
    return PreparedSample(
        sample.user_id, sample.request_id, sample.label, profile, target, short, long_raw, ids, cnt, rec
    )


def prepare_all(samples, n_profile, bucketing=DEFAULT_BUCKETING):
    return [prepare(s, n_profile, bucketing) for s in samples]


def _pad(rows, width=None):
    width = max((len(r) for r in rows), default=0) if width is None else width
    out = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        n = min(len(r), width)
        out[i, :n] = r[:n]
        mask[i, :n] = True
    return out, mask


@dataclass
class LongChannel:
    ids: np.ndarray  # B x M aggregated ids
    count: np.ndarray
    recency: np.ndarray
    mask: np.ndarray
    raw_ids: np.ndarray  # B x N raw ids
    raw_mask: np.ndarray


@dataclass
class Batch:
    labels: np.ndarray
    user_ids: np.ndarray
    request_ids: np.ndarray
    profile: np.ndarray
    target: np.ndarray
    short: dict  # channel -> (ids, mask)
    long: dict  # channel -> LongChannel

    def __len__(self):
        return len(self.labels)


def collate(prepared, long_channels, short_channels, pad_to=None):
    """Stack prepared samples into a :class:`Batch`.

    ``pad_to`` maps a long channel to a minimum padded width, which lets
    tests append masked padding rows.
    """
    pad_to = pad_to or {}
    short = {}
    for ch in short_channels:
        short[ch] = _pad([p.short.get(ch, EMPTY) for p in prepared])
    long = {}
    for ch in long_channels:
        rows = [p.long_ids.get(ch, EMPTY) for p in prepared]
        width = max(max((len(r) for r in rows), default=0), pad_to.get(ch, 0))
        ids, mask = _pad(rows, width)
        count, _ = _pad([p.long_count.get(ch, EMPTY) for p in prepared], width)
        recency, _ = _pad([p.long_recency.get(ch, EMPTY) for p in prepared], width)
        raw, raw_mask = _pad([p.long_raw.get(ch, EMPTY) for p in prepared])
        long[ch] = LongChannel(ids, count, recency, mask, raw, raw_mask)
    return Batch(
        labels=np.array([p.label for p in prepared], dtype=np.float64),
        user_ids=np.array([p.user_id for p in prepared], dtype=np.int64),
        request_ids=np.array([p.request_id for p in prepared], dtype=np.int64),
        profile=np.stack([p.profile for p in prepared]) if prepared else np.zeros((0, 0), np.int64),
        target=np.stack([p.target for p in prepared]) if prepared else np.zeros((0, 4), np.int64),
        short=short,
        long=long,
    )


def infer_channels(samples):
    """Long and short channels present anywhere in ``samples``, in first-seen order."""
    long_ch, short_ch = {}, {}
    for s in samples:
        for seq in s.long_seqs:
            long_ch.setdefault(seq.channel, None)
        for seq in s.short_seqs:
            short_ch.setdefault(seq.channel, None)
    return list(long_ch), list(short_ch)
