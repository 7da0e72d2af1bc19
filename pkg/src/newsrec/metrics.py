"""Ranking metrics over impressions: AUC, MRR and nDCG@k.

The scalar functions take one :class:`ImpressionScores`; :func:`batch_metrics`
computes the same quantities for a padded matrix of impressions in a few
array passes. Ranking is by descending score with ties broken by original
position, so results do not depend on the sort implementation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyReportError, NumericError, SkipImpression

METRICS = ("auc", "mrr", "ndcg5", "ndcg10")

# upper bound on the pairwise comparison tensor built per chunk (elements)
_PAIR_BUDGET = 1 << 22


@dataclass
class ImpressionScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int8).ravel()
        if self.scores.shape != self.labels.shape:
            raise DimensionError(f"scores {self.scores.shape} and labels {self.labels.shape} differ")

    def __len__(self):
        return self.scores.shape[0]

    @property
    def scorable(self):
        n_pos = int(self.labels.sum())
        return len(self) >= 2 and 0 < n_pos < len(self)


def _check(imp, need_negative=True):
    n_pos = int(imp.labels.sum())
    if n_pos == 0 or (need_negative and n_pos == len(imp)):
        raise SkipImpression("impression needs at least one positive and one negative")


def _ranks(scores):
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return order, ranks


def auc(imp):
    """Fraction of (positive, negative) pairs ordered correctly; ties count 1/2."""
    _check(imp)
    pos = imp.scores[imp.labels == 1]
    neg = imp.scores[imp.labels == 0]
    gt = int((pos[:, None] > neg[None, :]).sum())
    eq = int((pos[:, None] == neg[None, :]).sum())
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def mrr(imp):
    """Mean over positives of 1/rank (MIND convention for multi-click impressions)."""
    _check(imp, need_negative=False)
    _, ranks = _ranks(imp.scores)
    return float(_seqsum(np.where(imp.labels == 1, 1.0 / ranks, 0.0))) / int(imp.labels.sum())


def _seqsum(x):
    # left-to-right along the last axis; trailing zeros (padding) cannot change the result
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1])
    return np.cumsum(x, axis=-1)[..., -1]


def _discounts(n):
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def ndcg_at_k(imp, k):
    _check(imp, need_negative=False)
    order, _ = _ranks(imp.scores)
    m = min(k, len(imp))
    disc = _discounts(m)
    dcg = float(_seqsum(imp.labels[order][:m] * disc))
    idcg = float(np.cumsum(disc)[min(k, int(imp.labels.sum())) - 1])
    return dcg / idcg


# -- batched -------------------------------------------------------------------


def pad_impressions(impressions):
    """Stack ragged impressions into (scores, labels, lengths); padding is 0."""
    lengths = np.array([len(i) for i in impressions], dtype=np.int64)
    width = int(lengths.max()) if len(lengths) else 0
    S = np.zeros((len(impressions), width), dtype=np.float64)
    Y = np.zeros((len(impressions), width), dtype=np.int8)
    for r, imp in enumerate(impressions):
        S[r, : len(imp)] = imp.scores
        Y[r, : len(imp)] = imp.labels
    return S, Y, lengths


def _pair_counts(S, pos, neg):
    """Per-row counts of (pos > neg) and (pos == neg) pairs, chunked to bound memory."""
    n, L = S.shape
    gt = np.zeros(n, dtype=np.int64)
    eq = np.zeros(n, dtype=np.int64)
    step = max(1, _PAIR_BUDGET // max(L * L, 1))
    for a in range(0, n, step):
        s, p, q = S[a:a + step], pos[a:a + step], neg[a:a + step]
        pairs = p[:, :, None] & q[:, None, :]
        diff = s[:, :, None] - s[:, None, :]
        gt[a:a + step] = np.sum((diff > 0) & pairs, axis=(1, 2))
        eq[a:a + step] = np.sum((diff == 0) & pairs, axis=(1, 2))
    return gt, eq


def batch_metrics(S, Y, lengths):
    """Per-impression metrics for a padded batch.

    Returns ``(values, scorable)`` where ``values`` maps each metric name to a
    float64 array of length N (NaN for skipped rows) and ``scorable`` marks
    the rows that were evaluated. Entries beyond ``lengths`` are ignored.
    """
    S = np.asarray(S, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if S.ndim != 2 or np.shape(Y) != S.shape or lengths.shape != (S.shape[0],):
        raise DimensionError(f"expected (N, L) scores/labels and (N,) lengths, got {S.shape}, "
                             f"{np.shape(Y)}, {lengths.shape}")
    n, L = S.shape
    valid = np.arange(L)[None, :] < lengths[:, None]
    if not np.isfinite(S[valid]).all():
        raise NumericError("non-finite score in evaluation batch")
    pos = (np.asarray(Y) == 1) & valid
    neg = (np.asarray(Y) == 0) & valid
    n_pos = pos.sum(axis=1)
    n_neg = neg.sum(axis=1)
    scorable = (n_pos > 0) & (n_neg > 0)

    gt, eq = _pair_counts(S, pos, neg)
    with np.errstate(invalid="ignore", divide="ignore"):
        auc_v = (gt + 0.5 * eq) / (n_pos * n_neg)

    # padding sorts last; -S keeps ties in index order under a stable sort
    key = np.where(valid, -S, np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, L + 1)[None, :].repeat(n, 0), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mrr_v = _seqsum(np.where(pos, 1.0 / ranks, 0.0)) / n_pos

    gains = np.take_along_axis(pos, order, axis=1).astype(np.float64)
    disc = _discounts(L)
    out = {"auc": auc_v, "mrr": mrr_v}
    for k in (5, 10):
        m = min(k, L)
        dcg = _seqsum(gains[:, :m] * disc[:m])
        ideal = np.cumsum(disc[:m])
        idcg = ideal[np.clip(np.minimum(n_pos, k), 1, m) - 1]
        out[f"ndcg{k}"] = dcg / idcg
    for name in out:
        out[name] = np.where(scorable, out[name], np.nan)
    return out, scorable


@dataclass
class MetricsReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_evaluated: int
    n_skipped: int

    def to_dict(self):
        """Flat JSON form: percentages under the metric names, raw values under ``*_raw``."""
        out = {}
        for m in METRICS:
            out[m] = round(100.0 * getattr(self, m), 6)
            out[f"{m}_raw"] = getattr(self, m)
        out["n_evaluated"] = self.n_evaluated
        out["n_skipped"] = self.n_skipped
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(*(float(d[f"{m}_raw"]) for m in METRICS), int(d["n_evaluated"]), int(d["n_skipped"]))

    @staticmethod
    def combine(reports):
        """Merge reports from disjoint shards (means weighted by evaluated counts)."""
        total = sum(r.n_evaluated for r in reports)
        if total == 0:
            raise EmptyReportError("no evaluated impressions in any shard")
        vals = [math.fsum(getattr(r, m) * r.n_evaluated for r in reports) / total for m in METRICS]
        return MetricsReport(*vals, total, sum(r.n_skipped for r in reports))


def report_from_values(values, scorable):
    """Unweighted means over evaluated impressions; fsum makes them order independent."""
    n_eval = int(np.sum(scorable))
    n_skip = int(len(scorable) - n_eval)
    if n_eval == 0:
        raise EmptyReportError(f"all {n_skip} impressions were skipped (need a positive and a negative each)")
    means = [math.fsum(values[m][scorable].tolist()) / n_eval for m in METRICS]
    return MetricsReport(*means, n_eval, n_skip)


def per_impression(impressions, workers=1, shard_size=4096):
    """Per-impression metric arrays for a list of :class:`ImpressionScores`.

    Impressions are grouped into shards of similar length so padding stays
    small; shards may run on a thread pool. Output order matches the input.
    """
    n = len(impressions)
    lengths = np.array([len(i) for i in impressions], dtype=np.int64)
    by_len = np.argsort(lengths, kind="stable")
    shards = [by_len[a:a + shard_size] for a in range(0, n, shard_size)]

    def run(idx):
        return batch_metrics(*pad_impressions([impressions[i] for i in idx]))

    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, shards))
    else:
        results = [run(s) for s in shards]
    values = {m: np.full(n, np.nan) for m in METRICS}
    scorable = np.zeros(n, dtype=bool)
    for idx, (vals, ok) in zip(shards, results):
        for m in METRICS:
            values[m][idx] = vals[m]
        scorable[idx] = ok
    return values, scorable


def evaluate_batch(impressions, workers=1):
    """Mean metrics over a list of :class:`ImpressionScores`, skipping unscorable ones."""
    if not len(impressions):
        raise EmptyReportError("evaluation batch is empty")
    return report_from_values(*per_impression(impressions, workers))
