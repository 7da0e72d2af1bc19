"""Planted-preference synthetic data in MIND layout.

Each topic owns a disjoint vocabulary, every article title is drawn from
its topic's words, and every user prefers one topic. A clicked candidate is
on the user's topic with probability ``purity``; the non-clicked candidates
are drawn from other topics. The signal is therefore learnable from titles
alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .mind import ImpressionLog, NewsArticle, write_behaviors_tsv, write_news_tsv


@dataclass
class SyntheticSpec:
    topics: int = 10
    users: int = 200
    articles: int = 500
    impressions: int = 10_000
    purity: float = 0.9
    words_per_topic: int = 30
    title_len: tuple = (4, 8)
    history_len: tuple = (3, 15)
    candidates: tuple = (5, 10)
    clicks: tuple = (1, 2)
    subcategories_per_topic: int = 3
    test_fraction: float = 0.2
    start_time: int = 1573462800  # 2019-11-11 09:00:00 UTC


@dataclass
class SyntheticData:
    articles: list
    topic_of: dict  # news_id -> topic
    user_topic: dict  # user_id -> topic
    train: list
    test: list


def _word(t, w):
    return f"t{t}w{w}"


def generate(spec=SyntheticSpec(), seed=0):
    if spec.topics < 2:
        raise ConfigError("synthetic data needs at least 2 topics")
    if spec.articles < spec.topics:
        raise ConfigError("need at least one article per topic")
    rng = np.random.default_rng(seed)
    articles, topic_of = [], {}
    by_topic = [[] for _ in range(spec.topics)]
    for i in range(spec.articles):
        t = i % spec.topics
        n_words = int(rng.integers(spec.title_len[0], spec.title_len[1] + 1))
        words = rng.integers(0, spec.words_per_topic, n_words)
        title = " ".join(_word(t, w) for w in words).capitalize()
        abstract = " ".join(_word(t, w) for w in rng.integers(0, spec.words_per_topic, 2 * n_words))
        nid = f"N{i + 1}"
        sub = int(rng.integers(spec.subcategories_per_topic))
        articles.append(NewsArticle(nid, f"topic{t}", f"topic{t}_sub{sub}", title, abstract))
        topic_of[nid] = t
        by_topic[t].append(nid)

    def pick_click(pref):
        if rng.random() < spec.purity:
            pool = by_topic[pref]
        else:
            pool = by_topic[int(rng.choice([t for t in range(spec.topics) if t != pref]))]
        return pool[int(rng.integers(len(pool)))]

    def pick_other(pref):
        t = int(rng.integers(spec.topics - 1))
        t = t + 1 if t >= pref else t
        pool = by_topic[t]
        return pool[int(rng.integers(len(pool)))]

    user_topic, histories = {}, {}
    for u in range(spec.users):
        uid = f"U{u + 1}"
        pref = int(rng.integers(spec.topics))
        user_topic[uid] = pref
        n_hist = int(rng.integers(spec.history_len[0], spec.history_len[1] + 1))
        histories[uid] = [pick_click(pref) for _ in range(n_hist)]

    impressions = []
    for m in range(spec.impressions):
        uid = f"U{int(rng.integers(spec.users)) + 1}"
        pref = user_topic[uid]
        n_cand = int(rng.integers(spec.candidates[0], spec.candidates[1] + 1))
        n_click = min(int(rng.integers(spec.clicks[0], spec.clicks[1] + 1)), n_cand - 1)
        chosen = []
        for _ in range(n_click):
            nid = pick_click(pref)
            while nid in chosen:
                nid = pick_click(pref)
            chosen.append(nid)
        cands = [(n, 1) for n in chosen]
        while len(cands) < n_cand:
            nid = pick_other(pref)
            if nid not in chosen:
                chosen.append(nid)
                cands.append((nid, 0))
        order = rng.permutation(len(cands))
        cands = [cands[i] for i in order]
        ts = spec.start_time + 30 * m + int(rng.integers(30))
        impressions.append(ImpressionLog(str(m + 1), uid, ts, list(histories[uid]), cands))

    n_test = int(round(spec.test_fraction * spec.impressions))
    train, test = impressions[: len(impressions) - n_test], impressions[len(impressions) - n_test:]
    return SyntheticData(articles, topic_of, user_topic, train, test)


def generate_synthetic(out_dir, spec=SyntheticSpec(), seed=0):
    """Write ``train/`` and ``test/`` MIND directories under ``out_dir``; returns the generated data."""
    data = generate(spec, seed)
    for name, imps in (("train", data.train), ("test", data.test)):
        d = os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        write_news_tsv(os.path.join(d, "news.tsv"), data.articles)
        write_behaviors_tsv(os.path.join(d, "behaviors.tsv"), imps)
    return data
