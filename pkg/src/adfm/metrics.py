"""AUC, group AUC and selection precision."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def auc(scores, labels):
    """Probability that a random positive outranks a random negative.

    Ties count one half (midranks, i.e. the Mann-Whitney U statistic).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"auc: {s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(scores, labels, group_ids):
    """Sample-count weighted mean of per-group AUC.

    Groups with a single label class are skipped.  Returns
    (value, n_groups_used, n_groups_skipped).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    g = np.asarray(group_ids).reshape(-1)
    if not (s.size == y.size == g.size):
        raise ValueError("gauc: scores, labels and group_ids differ in length")
    order = np.argsort(g, kind="stable")
    g_sorted = g[order]
    cuts = np.flatnonzero(g_sorted[1:] != g_sorted[:-1]) + 1
    total, weight, used, skipped = 0.0, 0, 0, 0
    for idx in np.split(order, cuts) if g.size else []:
        yy = y[idx]
        n_pos = int((yy == 1).sum())
        if n_pos == 0 or n_pos == yy.size:
            skipped += 1
            continue
        total += idx.size * auc(s[idx], yy)
        weight += idx.size
        used += 1
    if used == 0:
        raise UndefinedMetricError("gauc: no group has both label classes")
    return total / weight, used, skipped


def selection_precision(selected, useful):
    """Mean over samples of |selected & useful| / |selected|.

    Samples with an empty selection are left out; no usable sample gives 0.
    """
    values = []
    for sel, good in zip(selected, useful):
        sel = np.asarray(sel).reshape(-1)
        if sel.size == 0:
            continue
        values.append(np.isin(sel, np.asarray(good)).mean())
    return float(np.mean(values)) if values else 0.0


@dataclass
class EvalReport:
    auc: float
    gauc_user: float
    gauc_req: float
    n_samples: int
    n_groups_user: int
    n_groups_req: int
    n_groups_skipped: int
    selection_precision: float | None = None
    random_precision: float | None = None

    def to_json(self):
        return asdict(self)


def _safe_gauc(scores, labels, groups):
    try:
        return gauc(scores, labels, groups)
    except UndefinedMetricError:
        n = len(np.unique(groups))
        return float("nan"), 0, n


def evaluate(scores, labels, user_ids, request_ids, selection=None, random_selection=None):
    """Build an :class:`EvalReport`. AUC must be defined; GAUC may be NaN."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    gu, nu, su = _safe_gauc(scores, labels, user_ids)
    gr, nr, sr = _safe_gauc(scores, labels, request_ids)
    return EvalReport(
        auc=auc(scores, labels),
        gauc_user=gu,
        gauc_req=gr,
        n_samples=int(scores.size),
        n_groups_user=nu,
        n_groups_req=nr,
        n_groups_skipped=su + sr,
        selection_precision=selection,
        random_precision=random_selection,
    )
