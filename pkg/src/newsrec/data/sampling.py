"""Validation splits, negative sampling and mini-batch assembly."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError

log = logging.getLogger(__name__)

SPLIT_MODES = ("random", "chronological")
STRATEGIES = ("shuffled", "unshuffled")


def split_validation(impressions, mode="random", ratio=0.95, seed=0):
    """Partition training impressions into (train, valid).

    ``random`` shuffles with ``seed`` and keeps the first ceil(ratio * n) for
    training. ``chronological`` sorts by timestamp (stable) and gives the
    earliest ceil(ratio * n) to training. Both sides are non-empty.
    """
    if mode not in SPLIT_MODES:
        raise ConfigError(f"split mode must be one of {SPLIT_MODES}, got {mode!r}")
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(impressions)
    if n < 2:
        raise DataError(f"cannot split {n} impression(s); need at least 2")
    n_train = min(max(math.ceil(round(ratio * n, 9)), 1), n - 1)
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = sorted(range(n), key=lambda i: impressions[i].timestamp)
    train = [impressions[i] for i in order[:n_train]]
    valid = [impressions[i] for i in order[n_train:]]
    return train, valid


@dataclass
class TrainingSample:
    user_id: str
    history: list
    slate: list  # k+1 news ids
    labels: list  # one-hot over the slate

    @property
    def label_index(self):
        return self.labels.index(1)


def sample_negatives(impression, k=4, strategy="shuffled", seed=None):
    """One slate per positive: the positive plus ``k`` negatives.

    Negatives are drawn without replacement from the impression's own
    non-clicked candidates; when fewer than ``k`` exist the slate is filled by
    drawing with replacement. ``unshuffled`` pins the positive at index 0,
    ``shuffled`` permutes the slate. Impressions without negatives yield [].

    ``seed`` may be an int or a ``numpy.random.Generator`` (used as-is).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"sampling strategy must be one of {STRATEGIES}, got {strategy!r}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    positives = impression.positives
    negatives = impression.negatives
    if not positives:
        raise DataError(f"impression {impression.impression_id} has no positive")
    if not negatives:
        return []
    samples = []
    for pos in positives:
        if len(negatives) >= k:
            picks = rng.choice(len(negatives), size=k, replace=False)
        else:
            picks = rng.choice(len(negatives), size=k, replace=True)
        slate = [pos] + [negatives[i] for i in picks]
        labels = [1] + [0] * k
        if strategy == "shuffled":
            perm = rng.permutation(k + 1)
            slate = [slate[i] for i in perm]
            labels = [labels[i] for i in perm]
        samples.append(TrainingSample(impression.user_id, impression.history, slate, labels))
    return samples


def build_samples(impressions, k=4, strategy="shuffled", seed=0):
    """Slates for every impression; returns (samples, skipped_impressions, filled_slates)."""
    rng = np.random.default_rng(seed)
    samples, skipped, filled = [], 0, 0
    for imp in impressions:
        if not imp.positives:
            skipped += 1
            continue
        out = sample_negatives(imp, k, strategy, rng)
        if not out:
            skipped += 1
            continue
        if len(imp.negatives) < k:
            filled += len(out)
        samples.extend(out)
    if skipped:
        log.info("skipped %d impressions that cannot form a slate", skipped)
    if filled:
        log.info("%d slates filled by sampling negatives with replacement", filled)
    return samples, skipped, filled


@dataclass
class Batch:
    cand_rows: np.ndarray  # (B, k+1)
    hist_rows: np.ndarray  # (B, H), left-padded with row 0
    hist_mask: np.ndarray  # (B, H)
    user_idx: np.ndarray  # (B,)
    label_index: np.ndarray  # (B,)

    def __len__(self):
        return self.cand_rows.shape[0]


def history_rows(history, news_index, H):
    """Most recent ``H`` history items as rows, padding prepended."""
    rows = [news_index[n] for n in history if n in news_index][-H:]
    return [0] * (H - len(rows)) + rows


class Collator:
    """Turns a list of :class:`TrainingSample` into padded integer arrays."""

    def __init__(self, news_index, user_index, max_history_len):
        self.news_index = news_index
        self.user_index = user_index
        self.H = max_history_len

    def __call__(self, samples):
        cand = np.array([[self.news_index[n] for n in s.slate] for s in samples], dtype=np.int64)
        hist = np.array([history_rows(s.history, self.news_index, self.H) for s in samples], dtype=np.int64)
        users = np.array([self.user_index.get(s.user_id, 0) for s in samples], dtype=np.int64)
        labels = np.array([s.label_index for s in samples], dtype=np.int64)
        return Batch(cand, hist.reshape(len(samples), self.H), hist.reshape(len(samples), self.H) != 0, users, labels)


def make_batches(samples, batch_size, shuffle=True, seed=0, collate=None):
    """Yield consecutive batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield collate(chunk) if collate is not None else chunk
