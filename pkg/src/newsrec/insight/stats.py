"""Exposure and click statistics per article, and subcategory distributions."""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class ArticleStats:
    news_id: str
    total_impressions: int
    total_clicks: int

    @property
    def ctr(self):
        return self.total_clicks / self.total_impressions if self.total_impressions else 0.0


def _fold(impressions):
    shown, clicked = Counter(), Counter()
    for imp in impressions:
        for nid, y in imp.candidates:
            shown[nid] += 1
            clicked[nid] += y
    return shown, clicked


def article_stats(impressions, workers=1, chunk=20_000):
    """One record per article shown as a candidate, sorted by news id."""
    impressions = list(impressions)
    parts = [impressions[a:a + chunk] for a in range(0, len(impressions), chunk)] or [[]]
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            folded = list(pool.map(_fold, parts))
    else:
        folded = [_fold(p) for p in parts]
    shown, clicked = Counter(), Counter()
    for s, c in folded:  # counter addition is order independent
        shown.update(s)
        clicked.update(c)
    return [ArticleStats(n, shown[n], clicked[n]) for n in sorted(shown)]


@dataclass
class PopulationSplit:
    top: list  # most-clicked ceil(5%) of articles
    bottom: list
    fraction: float = 0.05


def split_populations(stats, fraction=0.05, min_articles=20):
    """Top ``fraction`` of articles by clicks (ceiling count, ties by id) versus the rest."""
    n = len(stats)
    if n < min_articles:
        raise DataError(f"population split needs at least {min_articles} articles, got {n}")
    ranked = sorted(stats, key=lambda s: (-s.total_clicks, s.news_id))
    n_top = math.ceil(round(fraction * n, 9))
    return PopulationSplit(ranked[:n_top], ranked[n_top:], fraction)


@dataclass
class DistributionComparison:
    subcategories: list
    ground_truth: dict  # subcategory -> count
    recommended: dict
    top_n: int = 1

    @property
    def totals(self):
        return sum(self.ground_truth.values()), sum(self.recommended.values())

    def rows(self):
        return [(s, self.ground_truth.get(s, 0), self.recommended.get(s, 0)) for s in self.subcategories]


def _subcategory_of(article_index, news_id):
    a = article_index[news_id]
    return a if isinstance(a, str) else a.subcategory


def compare_distributions(ground_truth_clicks, recommendations, article_index, top_n=1):
    """Subcategory counts of clicked articles versus each impression's top-``top_n`` recommendations.

    ``recommendations`` is a list of ranked news-id lists (best first).
    ``article_index`` maps news id to a subcategory name or an article.
    """
    if top_n < 1:
        raise DataError(f"top_n must be >= 1, got {top_n}")
    clicks = list(ground_truth_clicks)
    recs = [nid for ranked in recommendations for nid in list(ranked)[:top_n]]
    unknown = sorted({n for n in clicks + recs if n not in article_index})
    if unknown:
        shown = ", ".join(unknown[:20]) + (" ..." if len(unknown) > 20 else "")
        raise DataError(f"{len(unknown)} article id(s) without a subcategory: {shown}")
    gt = Counter(_subcategory_of(article_index, n) for n in clicks)
    rc = Counter(_subcategory_of(article_index, n) for n in recs)
    subs = sorted(set(gt) | set(rc), key=lambda s: (-(gt[s] + rc[s]), s))
    return DistributionComparison(subs, dict(gt), dict(rc), top_n)


def rank_candidates(impressions, scores):
    """Candidate ids of each impression ordered by descending score (ties by position)."""
    out = []
    for imp, s in zip(impressions, scores):
        order = np.argsort(-np.asarray(s, dtype=np.float64), kind="stable")
        out.append([imp.candidates[i][0] for i in order])
    return out


def clicked_ids(impressions):
    return [n for imp in impressions for n, y in imp.candidates if y == 1]
