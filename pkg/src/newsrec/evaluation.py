"""Evaluation through precomputed news and user vectors.

:func:`fast_evaluate` encodes every distinct article once and every distinct
(user, history) pair once, then scores impressions with inner products.
:func:`evaluate_naive` runs the encoders afresh for every impression and is
kept as the reference the fast path is tested against.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container
from .data.sampling import history_rows
from .errors import CacheMissError, DataError, StaleCacheError
from .metrics import ImpressionScores, evaluate_batch

log = logging.getLogger(__name__)


@dataclass
class Lookup:
    """Id -> row maps shared by training and evaluation."""

    news_index: dict
    user_index: dict
    max_history_len: int

    @classmethod
    def from_dataset(cls, dataset, max_history_len):
        return cls(dataset.news_index, dataset.user_index, max_history_len)

    def rows(self, news_ids):
        try:
            return np.array([self.news_index[n] for n in news_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown news id {exc.args[0]!r}") from None

    def history(self, history):
        """(rows, mask) of the most recent H history items, padding first."""
        rows = np.array(history_rows(history, self.news_index, self.max_history_len), dtype=np.int64)
        return rows, rows != 0


def history_key(user_id, rows):
    h = hashlib.blake2b(np.ascontiguousarray(rows, dtype=np.int64).tobytes(), digest_size=8)
    return user_id, h.hexdigest()


@dataclass
class VectorCache:
    """Precomputed vectors valid for exactly one parameter state (``fingerprint``)."""

    fingerprint: str
    news_ids: dict = field(default_factory=dict)  # news_id -> row in news_matrix
    news_matrix: np.ndarray = None
    user_keys: dict = field(default_factory=dict)  # (user_id, history hash) -> row in user_matrix
    user_matrix: np.ndarray = None

    def news_vector(self, news_id):
        try:
            return self.news_matrix[self.news_ids[news_id]]
        except KeyError:
            raise CacheMissError(f"no cached vector for article {news_id!r}") from None

    def check(self, model):
        fp = model.fingerprint()
        if fp != self.fingerprint:
            raise StaleCacheError(f"vector cache was built for parameters {self.fingerprint}, model is now {fp}")

    # -- persistence ------------------------------------------------------

    def save(self, path):
        header = {"kind": "vector-cache", "fingerprint": self.fingerprint}
        users = [[u, h] for u, h in self.user_keys]
        container.write_container(path, header, {
            "news_ids": list(self.news_ids),
            "news": self.news_matrix,
            "user_keys": users,
            "users": self.user_matrix,
        })

    @classmethod
    def load(cls, path, model=None):
        header, s = container.read_container(path)
        if header.get("kind") != "vector-cache":
            raise StaleCacheError(f"{path} is not a vector cache")
        cache = cls(header["fingerprint"], {n: i for i, n in enumerate(s["news_ids"])}, s["news"],
                    {(u, h): i for i, (u, h) in enumerate(s["user_keys"])}, s["users"])
        if model is not None:
            cache.check(model)
        return cache


def _check_tokens(model, rows):
    f = model.features
    vocab = model.store["word.table"].shape[0]
    for name in ("title", "abstract"):
        tok = getattr(f, name)[rows]
        if tok.size and (tok.min() < 0 or tok.max() >= vocab):
            raise DataError(f"{name} token ids outside the vocabulary (size {vocab})")


def _batched(fn, n, batch_size, workers):
    spans = [(a, min(a + batch_size, n)) for a in range(0, n, batch_size)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda s: fn(*s), spans))
    else:
        parts = [fn(a, b) for a, b in spans]
    return np.concatenate(parts) if parts else None


def precompute_news(model, news_ids, lookup, batch_size=512, workers=1):
    """Encode each distinct article once. Returns (news_id -> position, matrix)."""
    uniq = list(dict.fromkeys(news_ids))
    rows = lookup.rows(uniq)
    _check_tokens(model, rows)

    def enc(a, b):
        return model.encode_news(rows[a:b])

    matrix = _batched(enc, len(rows), batch_size, workers)
    if matrix is None:
        matrix = np.zeros((0, model.d_news), dtype=model.store.dtype)
    return {n: i for i, n in enumerate(uniq)}, matrix


def _gather_history(cache, hist_rows, pos_of_row):
    """(B, H, d) history vectors from the news cache; padding slots stay zero."""
    pos = pos_of_row[hist_rows]
    out = cache.news_matrix[np.maximum(pos, 0)]
    out[hist_rows == 0] = 0
    return out


def precompute_users(model, impressions, cache, lookup, batch_size=512, workers=1):
    """One user vector per distinct (user_id, effective history); fills ``cache`` in place."""
    keys, hist, mask, uidx = {}, [], [], []
    for imp in impressions:
        rows, m = lookup.history(imp.history)
        key = history_key(imp.user_id, rows)
        if key in keys:
            continue
        keys[key] = len(hist)
        hist.append(rows)
        mask.append(m)
        uidx.append(lookup.user_index.get(imp.user_id, 0))
    H = lookup.max_history_len
    hist = np.array(hist, dtype=np.int64).reshape(-1, H)
    mask = np.array(mask, dtype=bool).reshape(-1, H)
    uidx = np.array(uidx, dtype=np.int64)
    pos_of_row = np.full(max(lookup.news_index.values(), default=0) + 1, -1, dtype=np.int64)
    for n, p in cache.news_ids.items():
        pos_of_row[lookup.news_index[n]] = p
    needed = hist[hist != 0]
    missing = needed[pos_of_row[needed] < 0]
    if missing.size:
        index = {v: k for k, v in lookup.news_index.items()}
        raise CacheMissError(f"history article {index[int(missing[0])]!r} has no cached vector")

    def enc(a, b):
        return model.encode_user(_gather_history(cache, hist[a:b], pos_of_row), mask[a:b], uidx[a:b])

    matrix = _batched(enc, len(hist), batch_size, workers)
    if matrix is None:
        matrix = np.zeros((0, model.d_news), dtype=model.store.dtype)
    cache.user_keys = keys
    cache.user_matrix = matrix
    return cache


def build_cache(model, impressions, lookup, batch_size=512, workers=1):
    """Precompute every vector the given impressions need."""
    ids = []
    for imp in impressions:
        ids.extend(n for n, _ in imp.candidates)
        ids.extend(n for n in imp.history if n in lookup.news_index)
    cache = VectorCache(model.fingerprint())
    cache.news_ids, cache.news_matrix = precompute_news(model, ids, lookup, batch_size, workers)
    return precompute_users(model, impressions, cache, lookup, batch_size, workers)


def fast_scores(model, impressions, cache, lookup):
    """Per-impression score arrays from cached vectors."""
    cache.check(model)
    out = []
    for imp in impressions:
        rows, _ = lookup.history(imp.history)
        key = history_key(imp.user_id, rows)
        try:
            u = cache.user_matrix[cache.user_keys[key]]
        except KeyError:
            raise CacheMissError(f"no cached user vector for impression {imp.impression_id}") from None
        cand = cache.news_matrix[[cache.news_ids[n] if n in cache.news_ids else _miss(n) for n, _ in imp.candidates]]
        out.append(model.score(u, cand))
    return out


def _miss(news_id):
    raise CacheMissError(f"no cached vector for article {news_id!r}")


def _report(impressions, scores, workers=1):
    return evaluate_batch(
        [ImpressionScores(s, [y for _, y in imp.candidates]) for imp, s in zip(impressions, scores)], workers)


def fast_evaluate(model, impressions, lookup, cache=None, return_scores=False, batch_size=512, workers=1):
    """Metrics via cached vectors; builds the cache when none is supplied.

    A supplied cache must match the model's current fingerprint, otherwise
    :class:`StaleCacheError` is raised.
    """
    if cache is None:
        cache = build_cache(model, impressions, lookup, batch_size, workers)
    scores = fast_scores(model, impressions, cache, lookup)
    report = _report(impressions, scores, workers)
    return (report, scores) if return_scores else report


def naive_scores(model, impressions, lookup):
    out = []
    for imp in impressions:
        cand = model.encode_news(lookup.rows([n for n, _ in imp.candidates]))
        rows, mask = lookup.history(imp.history)
        hist = np.zeros((1, len(rows), model.d_news), dtype=model.store.dtype)
        real = np.flatnonzero(rows)
        if len(real):
            hist[0, real] = model.encode_news(rows[real])
        u = model.encode_user(hist, mask[None, :], [lookup.user_index.get(imp.user_id, 0)])
        out.append(model.score(u[0], cand))
    return out


def evaluate_naive(model, impressions, lookup, return_scores=False):
    """Full forward pass per impression with no reuse; the reference for :func:`fast_evaluate`."""
    scores = naive_scores(model, impressions, lookup)
    report = _report(impressions, scores)
    return (report, scores) if return_scores else report


@dataclass
class TimingReport:
    precompute_s: float
    first_pass_s: float
    steady_pass_s: float
    naive_s: float
    fast_encoder_calls: int
    naive_encoder_calls: int

    @property
    def speedup(self):
        return self.naive_s / max(self.precompute_s + self.first_pass_s, 1e-12)

    def to_dict(self):
        d = dict(self.__dict__)
        d["speedup"] = self.speedup
        return d


def timing_harness(model, impressions, lookup, batch_size=512, warmup=True):
    """Wall-clock and encoder-call comparison of the fast and naive paths.

    With ``warmup`` a first scoring pass touches every cache entry before the
    steady-state pass is timed, so one-off costs are reported separately.
    """
    model.reset_counters()
    t0 = time.perf_counter()
    cache = build_cache(model, impressions, lookup, batch_size)
    t1 = time.perf_counter()
    fast_scores(model, impressions, cache, lookup)
    t2 = time.perf_counter()
    if warmup:
        fast_scores(model, impressions, cache, lookup)
    t3 = time.perf_counter()
    fast_calls = model.news_encoder_calls + model.user_encoder_calls
    model.reset_counters()
    t4 = time.perf_counter()
    naive_scores(model, impressions, lookup)
    t5 = time.perf_counter()
    naive_calls = model.news_encoder_calls + model.user_encoder_calls
    return TimingReport(t1 - t0, t2 - t1, (t3 - t2) if warmup else t2 - t1, t5 - t4, fast_calls, naive_calls)
